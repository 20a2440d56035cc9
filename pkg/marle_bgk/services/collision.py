"""
Marle relaxation operator: local equilibria, the BGK right-hand side,
conservation diagnostics and the exponential relaxation substep.

The collision term is (F_E - F) / (tau (1+I) p0). Its moments against the
collision invariants 1 and (1+I) p^mu vanish when F_E matches the eta-moment
and the particle flux V^mu of F; local_equilibrium enforces both on the grid.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from ..exceptions import ConvergenceError, NonFiniteInputError
from .distributions import Macrostate, contraction, log_juttner, make_macrostate
from .juttner_functions import shifted_sums
from .moments import ENTROPY_FLOOR, invariant_totals, invariant_weights, macrostate_of
from .phase_grid import PhaseGrid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConservationDefect:
    """Moments of the BGK right-hand side against 1, (1+I)p0, (1+I)p1, (1+I)p2, (1+I)p3."""

    absolute: np.ndarray
    relative: np.ndarray

    @property
    def max_relative(self) -> float:
        return float(np.max(np.abs(self.relative)))


@dataclass(frozen=True)
class CollisionParams:
    tau: float = 1.0
    mode: str = "frozen"
    picard_iterations: int = 3
    conservative: bool = False
    workers: int = 1
    tol: float = 1e-12
    max_iter: int = 30

    @classmethod
    def from_settings(cls, settings, tau: float) -> "CollisionParams":
        return cls(
            tau=tau,
            mode=settings.mode,
            picard_iterations=settings.picard_iterations,
            conservative=settings.conservative_projection,
            workers=settings.workers,
            tol=settings.newton_tol,
            max_iter=settings.newton_max_iter,
        )


def matching_weights(grid: PhaseGrid) -> np.ndarray:
    """Rows 1/((1+I)p0), p^mu/p0: the moments F_E must share with F."""
    return np.vstack([grid.inv_energy, np.ones(grid.size), (grid.p / grid.p0[:, None]).T])


def _check(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        raise NonFiniteInputError("distribution holds non-finite values")
    return F


def local_equilibrium(
    grid: PhaseGrid,
    F: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 30,
) -> Tuple[Macrostate, np.ndarray]:
    """
    Juttner field sharing eta n and V^mu with F on the grid.

    Starts from the Eckart formulas and corrects (n, u, gamma) with Newton
    steps on the five discrete moments.
    """
    F = _check(F)
    G = matching_weights(grid) * grid.weights
    target = G @ F
    scale = np.abs(G) @ np.abs(F)
    scale = np.where(scale > 0, scale, 1.0)

    start = macrostate_of(grid, F)
    n, u, gamma = start.n, start.u_vec.copy(), start.gamma
    a = 1.0 + grid.I
    for iteration in range(max_iter + 1):
        state = Macrostate(n=n, u=tuple(u), gamma=gamma, eta=start.eta)
        FE = np.exp(log_juttner(grid, state))
        residual = G @ FE - target
        if np.max(np.abs(residual) / scale) <= tol:
            return make_macrostate(grid, n, u, gamma), FE
        if iteration == max_iter:
            break

        u0 = state.u0
        A = contraction(grid, u)
        sums, _, _ = shifted_sums(grid, gamma, 1)
        m = sums[1] / sums[0]
        dA = u[:, None] / u0 * grid.p0[None, :] - grid.p.T
        derivs = np.vstack([
            FE / n,
            -gamma * a * dA * FE,
            (-m - a * A) * FE,
        ])
        J = G @ derivs.T
        step = np.linalg.solve(J, -residual)

        lam = 1.0
        while n + lam * step[0] <= 0 or gamma + lam * step[4] <= 0:
            lam *= 0.5
            if lam < 1e-8:
                raise ConvergenceError("moment matching left the admissible region", {"n": n, "gamma": gamma})
        n += lam * step[0]
        u = u + lam * step[1:4]
        gamma += lam * step[4]

    raise ConvergenceError(
        "local equilibrium moment matching did not converge",
        {"iterations": max_iter, "residual": float(np.max(np.abs(residual) / scale))},
    )


def _map_cells(func: Callable[[np.ndarray], np.ndarray], F: np.ndarray, workers: int) -> np.ndarray:
    if F.ndim == 1:
        return func(F)
    if workers <= 1 or F.shape[0] == 1:
        return np.stack([func(cell) for cell in F])
    out = np.empty_like(F)

    def run(i: int) -> None:
        out[i] = func(F[i])

    with ThreadPoolExecutor(max_workers=workers) as executor:
        list(executor.map(run, range(F.shape[0])))
    return out


def local_equilibria(
    grid: PhaseGrid,
    F: np.ndarray,
    workers: int = 1,
    tol: float = 1e-12,
    max_iter: int = 30,
) -> Tuple[List[Macrostate], np.ndarray]:
    """Per-cell local equilibria of a spatial field, shape (n_x, size)."""
    F = _check(F)
    states: List[Optional[Macrostate]] = [None] * F.shape[0]
    out = np.empty_like(F)

    def run(i: int) -> None:
        states[i], out[i] = local_equilibrium(grid, F[i], tol, max_iter)

    if workers <= 1:
        for i in range(F.shape[0]):
            run(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            list(executor.map(run, range(F.shape[0])))
    return states, out


def _equilibrium_field(grid: PhaseGrid, F: np.ndarray, params: CollisionParams) -> np.ndarray:
    if F.ndim == 1:
        return local_equilibrium(grid, F, params.tol, params.max_iter)[1]
    return local_equilibria(grid, F, params.workers, params.tol, params.max_iter)[1]


def bgk_rhs(grid: PhaseGrid, F: np.ndarray, tau: Optional[float] = None, FE: Optional[np.ndarray] = None) -> np.ndarray:
    """(F_E - F) / (tau (1+I) p0), cell by cell for spatial fields."""
    F = _check(F)
    tau = grid.spec.tau if tau is None else tau
    if FE is None:
        FE = _equilibrium_field(grid, F, CollisionParams(tau=tau))
    return (FE - F) * grid.inv_energy / tau


def conservation_defect(grid: PhaseGrid, F: np.ndarray, tau: Optional[float] = None) -> ConservationDefect:
    tau = grid.spec.tau if tau is None else tau
    rhs = bgk_rhs(grid, F, tau)
    psi = invariant_weights(grid)
    absolute = (rhs * grid.weights) @ psi.T
    scale = (np.abs(F) * grid.weights * grid.inv_energy / tau) @ np.abs(psi).T
    relative = absolute / np.where(scale > 0, scale, 1.0)
    return ConservationDefect(absolute=absolute, relative=relative)


def entropy_production(grid: PhaseGrid, F: np.ndarray, tau: Optional[float] = None, floor: float = ENTROPY_FLOOR) -> float:
    """-sum W (1 + ln F) Q(F) over nodes with F above the floor."""
    rhs = bgk_rhs(grid, F, tau)
    F = np.asarray(F, dtype=float)
    mask = F > floor
    return float(-(grid.weights[mask] * (1.0 + np.log(F[mask]))) @ rhs[mask])


def conservative_projection(grid: PhaseGrid, G: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """
    Multiplicative correction G (1 + sum c_a psi_a) restoring the five
    invariant totals sum W psi_a G to ``targets``.
    """
    psi = invariant_weights(grid)
    wG = grid.weights * G
    mass_matrix = (psi * wG) @ psi.T
    rhs = targets - psi @ wG
    d = np.sqrt(np.abs(np.diag(mass_matrix)))
    d = np.where(d > 0, d, 1.0)
    c = np.linalg.solve(mass_matrix / np.outer(d, d), rhs / d) / d
    corrected = G * (1.0 + c @ psi)
    if np.all(G >= 0) and np.any(corrected < 0):
        logger.warning(
            "Conservative projection produced negative values",
            extra={"min_value": float(corrected.min())},
        )
    return corrected


def _relax_cell(grid: PhaseGrid, F: np.ndarray, dt: float, params: CollisionParams) -> np.ndarray:
    x = dt / (params.tau * grid.energy)
    decay = np.exp(-x)
    _, FE0 = local_equilibrium(grid, F, params.tol, params.max_iter)
    G = FE0 + decay * (F - FE0)

    if params.mode == "picard":
        # Exponential trapezoid: F_E interpolated linearly across the substep
        phi1 = -np.expm1(-x) / x
        for _ in range(params.picard_iterations):
            _, FE1 = local_equilibrium(grid, G, params.tol, params.max_iter)
            G = decay * F + (phi1 - decay) * FE0 + (1.0 - phi1) * FE1

    if params.conservative:
        G = conservative_projection(grid, G, invariant_totals(grid, F))
    return G


def relaxation_step(
    grid: PhaseGrid,
    F: np.ndarray,
    dt: float,
    params: Optional[CollisionParams] = None,
) -> np.ndarray:
    """
    Advance dF/dt = (F_E - F) / (tau (1+I) p0) by dt.

    frozen: F_E + exp(-dt/(tau (1+I) p0)) (F - F_E) with F_E from the substep start.
    picard: F_E at the substep end re-solved picard_iterations times from the
    latest predictor; every coefficient is non-negative so F >= 0 is kept.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    params = params or CollisionParams(tau=grid.spec.tau)
    F = _check(F)
    return _map_cells(lambda cell: _relax_cell(grid, cell, dt, params), F, params.workers)
