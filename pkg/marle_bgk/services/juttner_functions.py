"""
Juttner normalisation functions on the quadrature grid.

M^(k)(gamma)  = sum W (-(1+I)p0)^k exp(-gamma (1+I) p0)
Mt^(k)(gamma) = sum W (-(1+I)p0)^k exp(-gamma (1+I) p0) / ((1+I) p0)

All sums are taken with a shifted exponent exp(-gamma (a - a_min)) so ratios
never underflow; the common factor exp(-gamma a_min) is applied only when an
absolute value is requested.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Tuple

import numpy as np
import pandas as pd

from ..exceptions import GammaRangeError, MarleError
from .phase_grid import PhaseGrid

logger = logging.getLogger(__name__)

DEFAULT_BRACKET = (1e-3, 1e3)
MAX_ORDER = 4


@dataclass(frozen=True)
class EquilibriumConstants:
    gamma0: float
    eta0: float
    delta: float
    M0: float
    Mprime0: float
    Msecond0: float
    Mtilde0: float
    kappa: float
    gamma0_grid: float

    @property
    def m0(self) -> float:
        """M'(gamma0) / M(gamma0) = -delta."""
        return -self.delta

    def as_dict(self) -> Dict[str, float]:
        return {
            "gamma0": self.gamma0,
            "eta0": self.eta0,
            "delta": self.delta,
            "M0": self.M0,
            "Mprime0": self.Mprime0,
            "Msecond0": self.Msecond0,
            "Mtilde0": self.Mtilde0,
            "kappa": self.kappa,
            "gamma0_grid": self.gamma0_grid,
        }


def _check_gamma(gamma: float) -> None:
    if not (gamma > 0 and math.isfinite(gamma)):
        raise ValueError(f"gamma must be positive and finite, got {gamma}")


def _shifted_exponential(grid: PhaseGrid, gamma: float) -> Tuple[np.ndarray, float]:
    energy = grid.energy
    a_min = float(energy.min())
    return np.exp(-gamma * (energy - a_min)), a_min


def shifted_sums(grid: PhaseGrid, gamma: float, max_order: int = 2) -> Tuple[np.ndarray, float, float]:
    """
    Shifted sums S_k = sum W (-a)^k e, k = 0..max_order, the shifted
    Mtilde sum and the log scale -gamma a_min.
    """
    _check_gamma(gamma)
    e, a_min = _shifted_exponential(grid, gamma)
    we = grid.weights * e
    energy = grid.energy
    sums = np.empty(max_order + 1)
    term = we.copy()
    for k in range(max_order + 1):
        sums[k] = term.sum()
        term = term * (-energy)
    tilde = float((we / energy).sum())
    return sums, tilde, -gamma * a_min


def eval_M(grid: PhaseGrid, gamma: float, order: int = 0) -> float:
    """k-th gamma derivative of M on the grid; sign is (-1)^order."""
    if order < 0 or order > MAX_ORDER:
        raise ValueError(f"order must lie in [0, {MAX_ORDER}]")
    sums, _, log_scale = shifted_sums(grid, gamma, order)
    return float(sums[order] * math.exp(log_scale))


def eval_Mtilde(grid: PhaseGrid, gamma: float, order: int = 0) -> float:
    """k-th gamma derivative of Mtilde; Mtilde^(k) = -M^(k-1) for k >= 1."""
    if order < 0 or order > MAX_ORDER + 1:
        raise ValueError(f"order must lie in [0, {MAX_ORDER + 1}]")
    if order >= 1:
        return -eval_M(grid, gamma, order - 1)
    _, tilde, log_scale = shifted_sums(grid, gamma, 0)
    return float(tilde * math.exp(log_scale))


def log_M(grid: PhaseGrid, gamma: float) -> float:
    sums, _, log_scale = shifted_sums(grid, gamma, 0)
    return float(math.log(sums[0]) + log_scale)


def eta_of_gamma(grid: PhaseGrid, gamma: float) -> float:
    """Mtilde(gamma) / M(gamma), strictly increasing in gamma."""
    sums, tilde, _ = shifted_sums(grid, gamma, 0)
    return float(tilde / sums[0])


def d_eta_d_gamma(grid: PhaseGrid, gamma: float) -> float:
    """Slope of eta(gamma): -(M^2 + M' Mtilde) / M^2 > 0."""
    sums, tilde, _ = shifted_sums(grid, gamma, 1)
    M, Mp = sums[0], sums[1]
    return float(-(M * M + Mp * tilde) / (M * M))


def ratio_derivatives(grid: PhaseGrid, gamma: float) -> Dict[str, float]:
    """
    Scale-free combinations used by the Hessian of the Juttner family:
    m = M'/M, its derivative, kappa = M^2/(M^2 + M' Mtilde) and its derivative.
    """
    sums, tilde, _ = shifted_sums(grid, gamma, 2)
    M, Mp, Mpp = sums
    m = Mp / M
    dm = Mpp / M - m * m
    denom = M * M + Mp * tilde
    d_denom = 2.0 * M * Mp + Mpp * tilde - Mp * M
    kappa = M * M / denom
    dkappa = (2.0 * M * Mp * denom - M * M * d_denom) / (denom * denom)
    return {"m": float(m), "dm": float(dm), "kappa": float(kappa), "dkappa": float(dkappa)}


def solve_gamma(
    grid: PhaseGrid,
    eta: float,
    bracket: Tuple[float, float] = DEFAULT_BRACKET,
    rtol: float = 1e-15,
    max_iter: int = 200,
) -> float:
    """
    Invert eta = Mtilde/M for gamma with bisection safeguarding Newton steps.

    The bracket is kept in terms of sign of eta_of_gamma(g) - eta, which is
    monotone, so every accepted iterate stays inside a shrinking interval.
    """
    if not math.isfinite(eta):
        raise GammaRangeError("eta is not finite", {"eta": eta})
    lo, hi = bracket
    eta_lo, eta_hi = eta_of_gamma(grid, lo), eta_of_gamma(grid, hi)
    if not (eta_lo < eta < eta_hi):
        raise GammaRangeError(
            "eta outside the attainable range on the gamma bracket",
            {"eta": eta, "eta_min": eta_lo, "eta_max": eta_hi, "bracket": bracket},
        )

    # Start from the geometric midpoint, then Newton where it stays bracketed
    g = math.sqrt(lo * hi)
    for iteration in range(max_iter):
        sums, tilde, _ = shifted_sums(grid, g, 1)
        M, Mp = sums[0], sums[1]
        residual = tilde / M - eta
        if residual == 0.0:
            return g
        if residual > 0:
            hi = g
        else:
            lo = g
        slope = -(M * M + Mp * tilde) / (M * M)
        g_new = g - residual / slope if slope > 0 else math.sqrt(lo * hi)
        if not (lo < g_new < hi):
            g_new = math.sqrt(lo * hi)
        if abs(g_new - g) <= rtol * g or hi - lo <= rtol * g:
            return g_new
        g = g_new

    raise MarleError("solve_gamma did not converge", {"eta": eta, "iterations": max_iter})


def X_derivative(grid: PhaseGrid, eta: float) -> float:
    """Derivative of the inverse map X(eta) = solve_gamma(eta)."""
    return 1.0 / d_eta_d_gamma(grid, solve_gamma(grid, eta))


def equilibrium_constants(grid: PhaseGrid, gamma0: float = None) -> EquilibriumConstants:
    """Grid-consistent constants of the global equilibrium F0."""
    gamma0 = grid.spec.gamma0 if gamma0 is None else gamma0
    sums, tilde, log_scale = shifted_sums(grid, gamma0, 2)
    scale = math.exp(log_scale)
    M, Mp, Mpp = sums
    eta0 = tilde / M
    kappa = M * M / (M * M + Mp * tilde)

    # Momentum coefficient evaluated with the grid's own quadrature
    e, _ = _shifted_exponential(grid, gamma0)
    F0 = e / M
    second_moment = float(grid.weights @ ((1.0 + grid.I) * grid.p[:, 0] ** 2 / grid.p0 * F0))
    gamma0_grid = 1.0 / second_moment

    consts = EquilibriumConstants(
        gamma0=float(gamma0),
        eta0=float(eta0),
        delta=float(-Mp / M),
        M0=float(M * scale),
        Mprime0=float(Mp * scale),
        Msecond0=float(Mpp * scale),
        Mtilde0=float(tilde * scale),
        kappa=float(kappa),
        gamma0_grid=float(gamma0_grid),
    )
    logger.debug("Computed equilibrium constants", extra=consts.as_dict())
    return consts


def gamma_table(grid: PhaseGrid, gammas: Iterable[float]) -> pd.DataFrame:
    rows = []
    for g in gammas:
        rows.append({
            "gamma": float(g),
            "M": eval_M(grid, g, 0),
            "Mprime": eval_M(grid, g, 1),
            "Mtilde": eval_Mtilde(grid, g, 0),
            "eta": eta_of_gamma(grid, g),
            "kappa": ratio_derivatives(grid, g)["kappa"],
        })
    return pd.DataFrame(rows, columns=["gamma", "M", "Mprime", "Mtilde", "eta", "kappa"])


def compact_bounds(
    grid: PhaseGrid,
    eta_lo: float,
    eta_hi: float,
    samples: int = 33,
    max_order: int = 2,
) -> Dict[str, Tuple[float, float]]:
    """
    Min and max of |M^(k)|, |Mtilde^(k)| and |X'(eta)| over eta in [eta_lo, eta_hi],
    with X the inverse of eta_of_gamma.
    """
    if not eta_lo < eta_hi:
        raise ValueError("eta_lo must be below eta_hi")
    etas = np.linspace(eta_lo, eta_hi, samples)
    table: Dict[str, list] = {f"M{k}": [] for k in range(max_order + 1)}
    table.update({f"Mtilde{k}": [] for k in range(max_order + 1)})
    table["X_prime"] = []
    for eta in etas:
        g = solve_gamma(grid, float(eta))
        for k in range(max_order + 1):
            table[f"M{k}"].append(abs(eval_M(grid, g, k)))
            table[f"Mtilde{k}"].append(abs(eval_Mtilde(grid, g, k)))
        table["X_prime"].append(abs(1.0 / d_eta_d_gamma(grid, g)))
    return {name: (float(min(vals)), float(max(vals))) for name, vals in table.items()}
