"""
Moments of a distribution: particle flux V^mu, energy-momentum tensor T^{mu nu},
entropy, and the Eckart-frame macrostate (n, u, gamma, eta).
"""
import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ..exceptions import DegenerateMomentsError, NonFiniteInputError
from .distributions import Macrostate
from .juttner_functions import solve_gamma
from .phase_grid import PhaseGrid

logger = logging.getLogger(__name__)

# F below this contributes nothing to F ln F (x ln x -> 0)
ENTROPY_FLOOR = 1e-300


@dataclass(frozen=True)
class MomentSet:
    Vmu: np.ndarray
    Tmunu: np.ndarray
    h0: float


def _four_momentum(grid: PhaseGrid) -> np.ndarray:
    """p^mu on every node, shape (4, size)."""
    return np.vstack([grid.p0, grid.p.T])


def _check_finite(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        raise NonFiniteInputError("distribution holds non-finite values")
    return F


def particle_flux(grid: PhaseGrid, F: np.ndarray) -> np.ndarray:
    """V^mu = sum W p^mu F / p0 over the last axis."""
    F = _check_finite(F)
    return (F * grid.weights) @ (_four_momentum(grid) / grid.p0).T


def compute_moments(grid: PhaseGrid, F: np.ndarray) -> MomentSet:
    F = _check_finite(F)
    pmu = _four_momentum(grid)
    wF = grid.weights * F
    Vmu = pmu @ (wF / grid.p0)
    Tmunu = (pmu * (wF * (1.0 + grid.I) / grid.p0)) @ pmu.T
    return MomentSet(Vmu=Vmu, Tmunu=0.5 * (Tmunu + Tmunu.T), h0=entropy_density(grid, F))


def eckart_decompose(m: MomentSet) -> Tuple[float, np.ndarray]:
    """n^2 = V^mu V_mu and u = V / n (spatial part)."""
    return eckart_from_flux(m.Vmu)


def eckart_from_flux(Vmu: np.ndarray) -> Tuple[float, np.ndarray]:
    V0 = float(Vmu[0])
    V = np.asarray(Vmu[1:], dtype=float)
    n2 = V0 * V0 - float(V @ V)
    if V0 <= 0 or n2 <= 0:
        raise DegenerateMomentsError(
            "particle flux is not future timelike",
            {"V0": V0, "V_norm": float(np.linalg.norm(V))},
        )
    n = math.sqrt(n2)
    return n, V / n


def compute_eta(grid: PhaseGrid, F: np.ndarray, n: float) -> float:
    """eta = (1/n) sum W F / ((1+I) p0)."""
    if n <= 0:
        raise DegenerateMomentsError("number density must be positive", {"n": n})
    F = _check_finite(F)
    return float((grid.weights * grid.inv_energy) @ F) / n


def macrostate_of(grid: PhaseGrid, F: np.ndarray) -> Macrostate:
    n, u = eckart_from_flux(particle_flux(grid, F))
    eta = compute_eta(grid, F, n)
    gamma = solve_gamma(grid, eta)
    return Macrostate(n=n, u=tuple(float(c) for c in u), gamma=gamma, eta=eta)


def entropy_density(grid: PhaseGrid, F: np.ndarray, floor: float = ENTROPY_FLOOR) -> float:
    """-sum W F ln F over nodes with F above the floor."""
    F = np.asarray(F, dtype=float)
    mask = F > floor
    Fm = F[mask]
    return float(-(grid.weights[mask] * Fm) @ np.log(Fm))


def entropy_flux(grid: PhaseGrid, F: np.ndarray, floor: float = ENTROPY_FLOOR) -> np.ndarray:
    """h^mu = -sum W p^mu F ln F / p0; h^0 is the entropy density."""
    F = np.asarray(F, dtype=float)
    mask = F > floor
    FlogF = np.zeros_like(F)
    FlogF[mask] = F[mask] * np.log(F[mask])
    return -(_four_momentum(grid) / grid.p0) @ (grid.weights * FlogF)


def invariant_weights(grid: PhaseGrid) -> np.ndarray:
    """Collision invariants 1, (1+I) p^mu as rows, shape (5, size)."""
    a = 1.0 + grid.I
    return np.vstack([np.ones(grid.size), a * grid.p0, a * grid.p.T])


def invariant_totals(grid: PhaseGrid, F: np.ndarray) -> np.ndarray:
    """sum W psi_a F for the five collision invariants; per cell for spatial fields."""
    return (np.asarray(F) * grid.weights) @ invariant_weights(grid).T
