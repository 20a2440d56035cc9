"""
Linearisation of the Marle operator around the global equilibrium F0.

With s = sqrt(F0) and w = 1/((1+I) p0):

    P0 f = <s,f> s + g0 <(p/p0) s, f> . (1+I) p s + kappa <(w - eta0) s, f> (M'/M + (1+I) p0) s
    L f  = w (P0 f - f)

w P0 is stored as a symmetric rank-5 form sum_ab U_a C_ab <U_b, f> with
U = [s, w s, (p1/p0) s, (p2/p0) s, (p3/p0) s], so P0 is a projection that is
orthogonal for <w ., .>, and L is self-adjoint and non-positive in L^2(p, I).
The momentum coefficient g0 is the grid value 1 / sum W (1+I) (p1)^2 F0 / p0,
which equals gamma0 up to quadrature error and makes the kernel exact on the grid.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from ..exceptions import ConvergenceError, SmallDataError
from ..schemas import AnalysisConfig, MonitorResult
from .distributions import Background, Macrostate, build_background, from_perturbation, log_juttner
from .juttner_functions import log_M, ratio_derivatives, solve_gamma
from .moments import macrostate_of
from .oracles import M_oracle, Mtilde_oracle
from .phase_grid import PhaseGrid, build_grid

logger = logging.getLogger(__name__)

GAMMA_SAMPLE_NORM = 1e-2
GAMMA_AGREEMENT_TOL = 1e-8


@dataclass(frozen=True)
class OrthonormalBasis:
    """e1 = s, e_{1+i} = (1+I) p^i s / N_i, e5 = ((1+I) p0 - delta) s / N_5."""

    vectors: np.ndarray
    norms: np.ndarray
    delta: float

    def gram(self, grid: PhaseGrid) -> np.ndarray:
        return (self.vectors * grid.weights) @ self.vectors.T


@dataclass(frozen=True)
class LowRankOperator:
    U: np.ndarray
    C: np.ndarray
    weight: np.ndarray
    quad_weights: np.ndarray

    def moments(self, f: np.ndarray) -> np.ndarray:
        """<U_a, f> for a = 1..5 (last axis of f is (p, I))."""
        return (np.asarray(f) * self.quad_weights) @ self.U.T

    def apply_weighted_P0(self, f: np.ndarray) -> np.ndarray:
        """w P0 f."""
        return (self.moments(f) @ self.C) @ self.U

    def apply_P0(self, f: np.ndarray) -> np.ndarray:
        return self.apply_weighted_P0(f) / self.weight

    def apply_L(self, f: np.ndarray) -> np.ndarray:
        return self.apply_weighted_P0(f) - self.weight * np.asarray(f)


@dataclass(frozen=True)
class MicroMacroCoeffs:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    a_tilde: np.ndarray

    def reconstruct(self, bg: Background) -> np.ndarray:
        """a s + b . (1+I) p s + c ((1+I) p0 - delta) s."""
        grid, s = bg.grid, bg.sqrt_F0
        a_I = 1.0 + grid.I
        a = np.asarray(self.a)[..., None]
        c = np.asarray(self.c)[..., None]
        b_term = np.asarray(self.b) @ (a_I * grid.p.T)
        return (a + b_term + c * (grid.energy - bg.consts.delta)) * s


@dataclass(frozen=True)
class NonlinearParts:
    N_n: float
    N_u: np.ndarray
    N_eta: float
    Phi: float
    Psi: float
    linear_n: float
    linear_u: np.ndarray
    linear_eta: float


@dataclass(frozen=True)
class HessianQ:
    """Q with grad^2 F = Q F at the transitional state, one 5x5 block per node."""

    Q: np.ndarray
    state: Macrostate
    F_theta: np.ndarray
    log_F_theta: np.ndarray


@dataclass(frozen=True)
class SpectralReport:
    lam: float
    residual: float
    method: str
    n_nodes: int
    min_weight: float
    kernel_residual: float
    matvecs: int
    converged: bool

    def as_dict(self) -> Dict[str, object]:
        return {
            "lambda": self.lam,
            "residual": self.residual,
            "method": self.method,
            "n_nodes": self.n_nodes,
            "min_weight": self.min_weight,
            "kernel_residual": self.kernel_residual,
            "matvecs": self.matvecs,
            "converged": self.converged,
        }


def build_basis(bg: Background) -> OrthonormalBasis:
    grid, s, delta = bg.grid, bg.sqrt_F0, bg.consts.delta
    a_I = 1.0 + grid.I
    raw = np.vstack([
        s,
        a_I * grid.p[:, 0] * s,
        a_I * grid.p[:, 1] * s,
        a_I * grid.p[:, 2] * s,
        (grid.energy - delta) * s,
    ])
    norms = np.sqrt((raw * raw) @ grid.weights)
    vectors = raw / norms[:, None]
    vectors.setflags(write=False)
    return OrthonormalBasis(vectors=vectors, norms=norms, delta=delta)


def build_low_rank(bg: Background) -> LowRankOperator:
    grid, s, consts = bg.grid, bg.sqrt_F0, bg.consts
    w = grid.inv_energy
    U = np.vstack([s, w * s, (grid.p / grid.p0[:, None]).T * s])
    k = consts.kappa
    C = np.zeros((5, 5))
    C[0, 0] = -k * consts.eta0
    C[0, 1] = C[1, 0] = k
    C[1, 1] = k * consts.m0
    C[2, 2] = C[3, 3] = C[4, 4] = consts.gamma0_grid
    return LowRankOperator(U=U, C=C, weight=w, quad_weights=grid.weights)


def eval_hessian_Q(
    grid: PhaseGrid,
    state_theta: Macrostate,
    p: Optional[np.ndarray] = None,
    I: Optional[np.ndarray] = None,
) -> HessianQ:
    """
    Hessian of F(n, u, eta) = n/M(X(eta)) exp(-(1+I) X(eta) u^mu p_mu) in the
    variables (n, u1, u2, u3, eta), divided by F itself.
    """
    p = grid.p if p is None else np.atleast_2d(np.asarray(p, dtype=float))
    I = grid.I if I is None else np.atleast_1d(np.asarray(I, dtype=float))
    n, g = state_theta.n, state_theta.gamma
    u = state_theta.u_vec
    u0 = state_theta.u0
    p0 = np.sqrt(1.0 + np.einsum("ki,ki->k", p, p))
    a = 1.0 + I
    A = u0 * p0 - p @ u
    dA = u[None, :] / u0 * p0[:, None] - p

    r = ratio_derivatives(grid, g)
    m, dm, kappa, dkappa = r["m"], r["dm"], r["kappa"], r["dkappa"]
    ma = m + a * A

    K = p.shape[0]
    Q = np.zeros((K, 5, 5))
    Q[:, 0, 1:4] = -(a * g)[:, None] * dA / n
    Q[:, 0, 4] = kappa * ma / n
    outer = np.einsum("ki,kj->kij", dA, dA)
    second = (np.eye(3)[None, :, :] / u0 - np.outer(u, u)[None, :, :] / u0**3) * p0[:, None, None]
    Q[:, 1:4, 1:4] = (a * a * g * g)[:, None, None] * outer - (a * g)[:, None, None] * second
    Q[:, 1:4, 4] = kappa * a[:, None] * dA - (a * g)[:, None] * dA * (kappa * ma)[:, None]
    Q[:, 4, 4] = kappa * kappa * ma * ma - kappa * dkappa * ma - kappa * kappa * dm
    Q[:, 1:, 0] = Q[:, 0, 1:]
    Q[:, 4, 1:4] = Q[:, 1:4, 4]

    log_F = math.log(n) - log_M(grid, g) - g * a * A
    return HessianQ(Q=Q, state=state_theta, F_theta=np.exp(log_F), log_F_theta=log_F)


class LinearizedOperator:
    """P0, P, L, the micro-macro split and the nonlinear remainder Gamma around F0."""

    def __init__(self, bg: Background, theta_order: int = 8):
        self.bg = bg
        self.grid = bg.grid
        self.consts = bg.consts
        self.basis = build_basis(bg)
        self.low_rank = build_low_rank(bg)
        self.theta_order = theta_order

    # Linear operators
    def inner(self, f: np.ndarray, g: np.ndarray):
        return (np.asarray(f) * np.asarray(g)) @ self.grid.weights

    def norm(self, f: np.ndarray) -> float:
        return float(math.sqrt(max(float(np.sum(self.inner(f, f))), 0.0)))

    def apply_P0(self, f: np.ndarray) -> np.ndarray:
        return self.low_rank.apply_P0(f)

    def apply_L(self, f: np.ndarray) -> np.ndarray:
        return self.low_rank.apply_L(f)

    def apply_P(self, f: np.ndarray) -> np.ndarray:
        coeffs = (np.asarray(f) * self.grid.weights) @ self.basis.vectors.T
        return coeffs @ self.basis.vectors

    def micro_macro(self, f: np.ndarray) -> MicroMacroCoeffs:
        coeffs = (np.asarray(f) * self.grid.weights) @ self.basis.vectors.T
        norms = self.basis.norms
        a = coeffs[..., 0]
        b = coeffs[..., 1:4] / norms[1:4]
        c = coeffs[..., 4] / norms[4]
        return MicroMacroCoeffs(a=a, b=b, c=c, a_tilde=a - self.basis.delta * c)

    def kernel_fields(self) -> np.ndarray:
        """s and (1+I) p^mu s, shape (5, size)."""
        s, grid = self.bg.sqrt_F0, self.grid
        a_I = 1.0 + grid.I
        return np.vstack([s, grid.energy * s, (a_I[:, None] * grid.p).T * s])

    def rayleigh_quotient(self, f: np.ndarray) -> Optional[float]:
        """-<Lf, f> / ||(I-P) f||^2, or None when f lies in the kernel."""
        micro = f - self.apply_P(f)
        denom = float(self.inner(micro, micro))
        if denom <= 1e-24 * float(self.inner(f, f)):
            return None
        return -float(self.inner(self.apply_L(f), f)) / denom

    def weighted_norm_split(self, f: np.ndarray) -> Dict[str, float]:
        Pf = self.apply_P(f)
        micro0 = f - self.apply_P0(f)
        w = self.low_rank.weight
        return {
            "macro_norm2": float(self.inner(Pf, Pf)),
            "micro_norm2": float(self.inner(f - Pf, f - Pf)),
            "dissipation": -float(self.inner(self.apply_L(f), f)),
            "w_norm2": float(self.inner(w * f, f)),
            "w_micro_norm2": float(self.inner(w * micro0, micro0)),
        }

    # Spectral gap
    def _euclidean_factors(self):
        sqrt_w = np.sqrt(self.grid.weights)
        Ut = self.low_rank.U * sqrt_w
        kernel = (self.basis.vectors * sqrt_w).T
        Qk, _ = np.linalg.qr(kernel)
        return Ut, Qk

    def spectral_gap(
        self,
        method: str = "auto",
        dense_limit: int = 2000,
        tol: float = 1e-12,
        maxiter: Optional[int] = None,
    ) -> SpectralReport:
        """
        Smallest eigenvalue of -L on the orthogonal complement of its kernel.

        Works with g = sqrt(W) f so -L becomes diag(w) - Ut^T C Ut; the kernel
        is shifted to sigma = 2 max(w) and the smallest remaining eigenvalue
        is lambda.
        """
        w = self.low_rank.weight
        C = self.low_rank.C
        N = w.shape[0]
        Ut, Qk = self._euclidean_factors()
        sigma = 2.0 * float(w.max())
        if method == "auto":
            method = "dense" if N <= dense_limit else "lanczos"

        counter = {"matvecs": 0}

        def apply_A(g: np.ndarray) -> np.ndarray:
            g = np.asarray(g).reshape(-1)
            return w * g - Ut.T @ (C @ (Ut @ g)) + sigma * (Qk @ (Qk.T @ g))

        kernel_residual = float(np.linalg.norm(w[:, None] * Qk - Ut.T @ (C @ (Ut @ Qk)), axis=0).max())

        if method == "dense":
            A = np.diag(w) - Ut.T @ C @ Ut + sigma * (Qk @ Qk.T)
            values, vectors = np.linalg.eigh(0.5 * (A + A.T))
            lam, vec = float(values[0]), vectors[:, 0]
            converged = True
        else:
            V = np.hstack([Ut.T, Qk])
            S = scipy.linalg.block_diag(-C, sigma * np.eye(Qk.shape[1]))
            Vd = V / w[:, None]
            core = scipy.linalg.lu_factor(np.eye(V.shape[1]) + S @ (V.T @ Vd))

            def apply_inverse(g: np.ndarray) -> np.ndarray:
                counter["matvecs"] += 1
                g = np.asarray(g).reshape(-1)
                return g / w - Vd @ scipy.linalg.lu_solve(core, S @ (Vd.T @ g))

            def counted_A(g: np.ndarray) -> np.ndarray:
                counter["matvecs"] += 1
                return apply_A(g)

            A_op = LinearOperator((N, N), matvec=counted_A, dtype=float)
            inv_op = LinearOperator((N, N), matvec=apply_inverse, dtype=float)
            # Seeded start vector; a mirror-symmetric one misses antisymmetric corner modes
            v0 = np.random.Generator(np.random.Philox(key=0)).standard_normal(N)
            try:
                values, vectors = eigsh(
                    A_op, k=1, sigma=0.0, which="LM", OPinv=inv_op, tol=tol, maxiter=maxiter, v0=v0
                )
            except ArpackNoConvergence as e:
                raise ConvergenceError(
                    "Lanczos eigensolver did not converge",
                    {"matvecs": counter["matvecs"], "converged_values": len(e.eigenvalues)},
                ) from e
            lam, vec = float(values[0]), vectors[:, 0]
            converged = True

        residual = float(np.linalg.norm(apply_A(vec) - lam * vec) / np.linalg.norm(vec))
        report = SpectralReport(
            lam=lam,
            residual=residual,
            method=method,
            n_nodes=N,
            min_weight=float(w.min()),
            kernel_residual=kernel_residual,
            matvecs=counter["matvecs"],
            converged=converged,
        )
        logger.info(f"Spectral gap {lam:.6e} ({method}, residual {residual:.2e})", extra=report.as_dict())
        return report

    # Nonlinear structure
    def nonlinear_parts(self, f: np.ndarray) -> NonlinearParts:
        m = self.low_rank.moments(f)
        if np.ndim(m) != 1:
            raise ValueError("nonlinear_parts expects a single (p, I) field")
        A, C, B = float(m[0]), float(m[1]), m[2:5]
        eta0 = self.consts.eta0
        BB = float(B @ B)
        Phi = 2.0 * A + A * A - BB
        if Phi <= -1.0:
            raise SmallDataError("1 + Phi <= 0: perturbation outside the small-data region", {"Phi": Phi})
        root = math.sqrt(1.0 + Phi)
        N_n = 0.5 * A * A - 0.5 * BB - Phi * Phi / (2.0 * (2.0 + Phi + 2.0 * root))
        Psi = A + N_n
        if Psi <= -1.0:
            raise SmallDataError("1 + Psi <= 0: perturbation outside the small-data region", {"Psi": Psi})
        ratio = Psi / (1.0 + Psi)
        N_u = -ratio * B
        N_eta = -eta0 * N_n + eta0 * Psi * Psi / (1.0 + Psi) - ratio * C
        return NonlinearParts(
            N_n=N_n,
            N_u=N_u,
            N_eta=N_eta,
            Phi=Phi,
            Psi=Psi,
            linear_n=A,
            linear_u=B.copy(),
            linear_eta=C - eta0 * A,
        )

    def transitional_state(self, parts: NonlinearParts, theta: float) -> Macrostate:
        """(1, 0, eta0) + theta ((n, u, eta) - (1, 0, eta0)) with gamma = X(eta)."""
        eta0 = self.consts.eta0
        dn = parts.linear_n + parts.N_n
        du = parts.linear_u + parts.N_u
        deta = parts.linear_eta + parts.N_eta
        eta = eta0 + theta * deta
        gamma = self.consts.gamma0 if theta == 0.0 else solve_gamma(self.grid, eta)
        return Macrostate(n=1.0 + theta * dn, u=tuple(float(c) for c in theta * du), gamma=gamma, eta=eta)

    def gamma_direct(self, f: np.ndarray) -> np.ndarray:
        """
        Gamma from the nonlinear parts plus the Taylor remainder
        int_0^1 (1-theta) v^T Q_theta v F_theta dtheta, v = (n-1, u, eta-eta0),
        evaluated with a Gauss-Legendre rule in theta.
        """
        grid, bg, consts = self.grid, self.bg, self.consts
        parts = self.nonlinear_parts(f)
        v = np.concatenate([[parts.linear_n + parts.N_n], parts.linear_u + parts.N_u, [parts.linear_eta + parts.N_eta]])

        nodes, weights = np.polynomial.legendre.leggauss(self.theta_order)
        thetas = 0.5 * (nodes + 1.0)
        omegas = 0.5 * weights
        remainder = np.zeros(grid.size)
        log_s = 0.5 * bg.log_F0
        if np.any(v != 0.0):
            for theta, omega in zip(thetas, omegas):
                hess = eval_hessian_Q(grid, self.transitional_state(parts, float(theta)))
                quad = np.einsum("a,kab,b->k", v, hess.Q, v)
                remainder += omega * (1.0 - theta) * quad * np.exp(hess.log_F_theta - log_s)

        s = bg.sqrt_F0
        B = parts.linear_u
        a_I = 1.0 + grid.I
        bracket = (
            parts.N_n
            + consts.gamma0 * a_I * (grid.p @ parts.N_u)
            + consts.kappa * (consts.m0 + grid.energy) * parts.N_eta
            + (consts.gamma0 - consts.gamma0_grid) * a_I * (grid.p @ B)
        )
        return grid.inv_energy * (bracket * s + remainder)

    def gamma_defect(self, f: np.ndarray) -> np.ndarray:
        """w (F_E - F) / s - L f with F_E the Eckart-formula Juttner field of F."""
        bg = self.bg
        F = from_perturbation(bg, f)
        state = macrostate_of(self.grid, F)
        diff_over_s = bg.sqrt_F0 * np.expm1(log_juttner(self.grid, state) - bg.log_F0)
        return self.grid.inv_energy * (diff_over_s - self.apply_P0(f))


def random_perturbation(bg: Background, rng: np.random.Generator) -> np.ndarray:
    """s u with u ~ U[-1, 1] on every node."""
    return bg.sqrt_F0 * rng.uniform(-1.0, 1.0, size=bg.grid.size)


@dataclass
class OperatorAnalysis:
    report: Dict[str, object]
    monitors: List[MonitorResult]

    @property
    def passed(self) -> bool:
        return all(m.passed for m in self.monitors)

    def failed_monitors(self) -> List[str]:
        return [m.name for m in self.monitors if not m.passed]


def _check(name: str, value: float, threshold: float, below: bool = True) -> MonitorResult:
    passed = value <= threshold if below else value > threshold
    return MonitorResult(name=name, passed=bool(passed), value=float(value), threshold=float(threshold))


def analyze_operator(config: AnalysisConfig) -> OperatorAnalysis:
    """Kernel, symmetry, coercivity and nonlinear-remainder checks on one grid."""
    grid = build_grid(config.grid)
    bg = build_background(grid)
    op = LinearizedOperator(bg, theta_order=config.theta_order)
    rng = np.random.Generator(np.random.Philox(key=config.seed))

    kernel = op.kernel_fields()
    kernel_errors = [op.norm(op.apply_P0(e) - e) / op.norm(e) for e in kernel]

    adjoint = 0.0
    for _ in range(config.n_pairs):
        f, g = random_perturbation(bg, rng), random_perturbation(bg, rng)
        gap = abs(op.inner(op.apply_L(f), g) - op.inner(f, op.apply_L(g)))
        adjoint = max(adjoint, gap / (op.norm(f) * op.norm(g)))

    spectral = op.spectral_gap(config.gap_method, config.dense_limit, config.eig_tol, config.eig_maxiter)
    coercivity = -np.inf
    for _ in range(config.n_coercivity):
        f = random_perturbation(bg, rng)
        micro = f - op.apply_P(f)
        excess = op.inner(op.apply_L(f), f) + spectral.lam * op.inner(micro, micro)
        coercivity = max(coercivity, float(excess) / float(op.inner(f, f)))

    f = random_perturbation(bg, rng)
    f *= GAMMA_SAMPLE_NORM / op.norm(f)
    direct, defect = op.gamma_direct(f), op.gamma_defect(f)
    # Gamma is quadratic in f: the gap is measured on the ||f||^2 scale
    gamma_agreement = op.norm(direct - defect) / GAMMA_SAMPLE_NORM**2

    D = config.grid.D
    gamma0 = config.grid.gamma0
    quadrature = {
        "M": abs(bg.consts.M0 - M_oracle(gamma0, D)) / M_oracle(gamma0, D),
        "Mtilde": abs(bg.consts.Mtilde0 - Mtilde_oracle(gamma0, D)) / Mtilde_oracle(gamma0, D),
    }

    monitors = [
        _check("kernel_identities", max(kernel_errors), 1e-10),
        _check("self_adjointness", adjoint, 1e-12),
        _check("spectral_gap_positive", spectral.lam, 0.0, below=False),
        _check("coercivity", coercivity, 1e-10),
        _check("gamma_agreement", gamma_agreement, GAMMA_AGREEMENT_TOL),
    ]
    report = {
        "config": config.model_dump(mode="json"),
        "constants": bg.consts.as_dict(),
        "kernel_errors": kernel_errors,
        "self_adjointness": adjoint,
        "spectral_gap": spectral.as_dict(),
        "coercivity_excess": coercivity,
        "gamma_agreement": gamma_agreement,
        "quadrature_vs_oracle": quadrature,
        "monitors": [m.model_dump() for m in monitors],
        "passed": all(m.passed for m in monitors),
    }
    return OperatorAnalysis(report=report, monitors=monitors)
