"""
Continuous reference values of the Juttner normalisation functions.

For phi(I) = I^((D-2)/2) the I-integral is done in closed form,

    int_0^inf exp(-g (1+I) p0) phi(I) dI = Gamma(D/2) exp(-g p0) / (g p0)^(D/2),

leaving a radial integral that reduces to K_1 when D = 2:
M(g) = 4 pi K_1(g) / g^2. Mtilde follows from Mtilde' = -M and Mtilde(inf) = 0.
Used only to check the quadrature grids.
"""
import math

import numpy as np
from scipy import integrate, special


def _radial(gamma: float, D: float) -> float:
    beta = 0.5 * D

    def integrand(p: float) -> float:
        # p^2 exp(-g (p0 - 1)) / (g p0)^beta, evaluated in log space
        if p <= 0.0:
            return 0.0
        p0 = math.hypot(1.0, p)
        return math.exp(2.0 * math.log(p) - gamma * (p0 - 1.0) - beta * math.log(gamma * p0))

    scale = math.exp(-gamma)
    if scale == 0.0:
        return 0.0
    value, _ = integrate.quad(integrand, 0.0, np.inf, epsabs=0.0, epsrel=1e-13, limit=200)
    return 4.0 * math.pi * special.gamma(beta) * scale * value


def M_oracle(gamma: float, D: float = 2.0) -> float:
    """M(gamma) on the untruncated domain."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if D == 2.0:
        return 4.0 * math.pi * special.kve(1, gamma) * math.exp(-gamma) / gamma**2
    return _radial(gamma, D)


def Mtilde_oracle(gamma: float, D: float = 2.0) -> float:
    """Mtilde(gamma) = int_gamma^inf M(g) dg."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    value, _ = integrate.quad(lambda g: M_oracle(g, D), gamma, np.inf, epsabs=0.0, epsrel=1e-12, limit=200)
    return value


def eta_oracle(gamma: float, D: float = 2.0) -> float:
    return Mtilde_oracle(gamma, D) / M_oracle(gamma, D)
