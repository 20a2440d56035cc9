"""
Generalized Juttner family, the global equilibrium F0 and the map between
absolute distributions F and perturbations f = (F - F0) / sqrt(F0).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from ..exceptions import InadmissibleStateError
from .juttner_functions import EquilibriumConstants, equilibrium_constants, eta_of_gamma, log_M
from .phase_grid import PhaseGrid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Macrostate:
    """Eckart-frame parameters of one cell; u is the spatial part of u^mu."""

    n: float
    u: Tuple[float, float, float]
    gamma: float
    eta: float

    @property
    def u_vec(self) -> np.ndarray:
        return np.asarray(self.u, dtype=float)

    @property
    def u0(self) -> float:
        return math.sqrt(1.0 + float(self.u_vec @ self.u_vec))

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "u1": self.u[0],
            "u2": self.u[1],
            "u3": self.u[2],
            "gamma": self.gamma,
            "eta": self.eta,
        }


def make_macrostate(grid: PhaseGrid, n: float, u: Sequence[float], gamma: float) -> Macrostate:
    """Macrostate with eta filled in from gamma on this grid."""
    u = tuple(float(c) for c in u)
    return Macrostate(n=float(n), u=u, gamma=float(gamma), eta=eta_of_gamma(grid, gamma))


@dataclass(frozen=True)
class Background:
    """Global equilibrium F0 on a grid together with its constants."""

    grid: PhaseGrid
    consts: EquilibriumConstants
    F0: np.ndarray = field(repr=False)
    sqrt_F0: np.ndarray = field(repr=False)
    log_F0: np.ndarray = field(repr=False)

    @property
    def state(self) -> Macrostate:
        return Macrostate(n=1.0, u=(0.0, 0.0, 0.0), gamma=self.consts.gamma0, eta=self.consts.eta0)


def build_background(grid: PhaseGrid, consts: Optional[EquilibriumConstants] = None) -> Background:
    consts = consts or equilibrium_constants(grid)
    energy = grid.energy
    shifted = -consts.gamma0 * (energy - energy.min())
    log_S = math.log(float(grid.weights @ np.exp(shifted)))
    log_F0 = shifted - log_S
    F0 = np.exp(log_F0)
    sqrt_F0 = np.exp(0.5 * log_F0)
    for arr in (F0, sqrt_F0, log_F0):
        arr.setflags(write=False)
    return Background(grid=grid, consts=consts, F0=F0, sqrt_F0=sqrt_F0, log_F0=log_F0)


def eval_global_equilibrium(grid: PhaseGrid, consts: EquilibriumConstants) -> np.ndarray:
    """F0 = exp(-gamma0 (1+I) p0) / M(gamma0), normalised by the grid's own M."""
    return build_background(grid, consts).F0.copy()


def contraction(grid: PhaseGrid, u: Sequence[float]) -> np.ndarray:
    """u^mu p_mu = u0 p0 - u . p on every node."""
    u = np.asarray(u, dtype=float)
    u0 = math.sqrt(1.0 + float(u @ u))
    return u0 * grid.p0 - grid.p @ u


def log_juttner(grid: PhaseGrid, state: Macrostate) -> np.ndarray:
    A = contraction(grid, state.u)
    if np.any(A <= 0.0):
        raise InadmissibleStateError(
            "u^mu p_mu <= 0 on the grid; the state or grid is corrupted",
            {"u": state.u, "min_contraction": float(A.min())},
        )
    if state.n <= 0:
        raise InadmissibleStateError("number density must be positive", {"n": state.n})
    return math.log(state.n) - log_M(grid, state.gamma) - state.gamma * (1.0 + grid.I) * A


def eval_juttner(grid: PhaseGrid, state: Macrostate) -> np.ndarray:
    """F_E = n / M(gamma) exp(-(1+I) gamma u^mu p_mu)."""
    return np.exp(log_juttner(grid, state))


def to_perturbation(bg: Background, F: np.ndarray) -> np.ndarray:
    return (np.asarray(F, dtype=float) - bg.F0) / bg.sqrt_F0


def from_perturbation(bg: Background, f: np.ndarray) -> np.ndarray:
    """Inverse of to_perturbation; negative values are kept as they are."""
    return bg.F0 + bg.sqrt_F0 * np.asarray(f, dtype=float)
