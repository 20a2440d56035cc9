"""
Phase-space discretisation: periodic x, truncated 3D momentum box and
truncated internal-energy half-line.

Nodes of the (p, I) product are stored flat, momentum-major: node index
``k * n_I + j`` pairs momentum node ``k`` with internal-energy node ``j``.
Spatial fields carry a leading cell axis, shape ``(n_x, size)``.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np
from scipy.special import roots_genlaguerre, roots_jacobi

from ..exceptions import GridError, NonFiniteInputError
from ..schemas import GridSpec

logger = logging.getLogger(__name__)

# exp() underflows below this exponent; sqrt(F0) must stay representable
_MIN_LOG = -700.0

ExtraWeight = Union[None, np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class PhaseGrid:
    spec: GridSpec
    axis_nodes: np.ndarray
    axis_weights: np.ndarray
    internal_nodes: np.ndarray
    internal_weights: np.ndarray
    p: np.ndarray
    p0: np.ndarray
    I: np.ndarray
    weights: np.ndarray
    mirror: np.ndarray
    x: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def n_x(self) -> int:
        return self.x.shape[0]

    @property
    def dx(self) -> float:
        return self.spec.L_x / self.spec.n_x

    @property
    def energy(self) -> np.ndarray:
        """(1+I) p0 on every node."""
        return (1.0 + self.I) * self.p0

    @property
    def inv_energy(self) -> np.ndarray:
        return 1.0 / self.energy

    @property
    def velocity(self) -> np.ndarray:
        """Advection speed p1/p0 along the slab."""
        return self.p[:, 0] / self.p0

    def describe(self) -> dict:
        return {
            "spec": self.spec.model_dump(mode="json"),
            "size": self.size,
            "n_x": self.n_x,
            "min_weight": float(self.weights.min()),
            "max_energy": float(self.energy.max()),
        }


def _symmetrize(nodes: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return 0.5 * (nodes - nodes[::-1]), 0.5 * (weights + weights[::-1])


def momentum_axis_rule(spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Symmetric 1D rule on [-p_max, p_max]; endpoints included for sinh/uniform."""
    n, p_max = spec.n_p, spec.p_max
    if spec.momentum_rule == "sinh":
        s = spec.p_scale
        T = np.arcsinh(p_max / s)
        t = np.linspace(-T, T, n)
        h = 2.0 * T / (n - 1)
        weights = h * s * np.cosh(t)
        weights[0] *= 0.5
        weights[-1] *= 0.5
        nodes = s * np.sinh(t)
    elif spec.momentum_rule == "uniform":
        nodes = np.linspace(-p_max, p_max, n)
        h = 2.0 * p_max / (n - 1)
        weights = np.full(n, h)
        weights[0] *= 0.5
        weights[-1] *= 0.5
    else:
        y, wy = np.polynomial.legendre.leggauss(n)
        nodes = p_max * y
        weights = p_max * wy
    return _symmetrize(nodes, weights)


def internal_rule(spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for the integral of phi(I) g(I) over I >= 0, phi absorbed."""
    beta = 0.5 * (spec.D - 2.0)
    n = spec.n_I
    if spec.internal_rule == "laguerre":
        x, wx = roots_genlaguerre(n, beta)
        c = x[-1] / spec.I_max
        nodes = x / c
        weights = np.exp(np.log(wx) + x - (beta + 1.0) * np.log(c))
    else:
        y, wy = roots_jacobi(n, 0.0, beta)
        half = 0.5 * spec.I_max
        nodes = half * (1.0 + y)
        weights = wy * half ** (beta + 1.0)
    return nodes, weights


def check_tails(spec: GridSpec) -> None:
    g = spec.gamma0
    internal_tail = np.exp(-g * (1.0 + spec.I_max))
    momentum_tail = np.exp(-g * np.sqrt(1.0 + spec.p_max**2))
    if internal_tail > spec.tail_tol:
        raise GridError(
            f"I_max={spec.I_max} too small for gamma0={g}: tail {internal_tail:.3e} exceeds tail_tol",
            field="I_max",
            details={"tail_tol": spec.tail_tol},
        )
    if momentum_tail > spec.tail_tol:
        raise GridError(
            f"p_max={spec.p_max} too small for gamma0={g}: tail {momentum_tail:.3e} exceeds tail_tol",
            field="p_max",
            details={"tail_tol": spec.tail_tol},
        )


def build_grid(spec: GridSpec) -> PhaseGrid:
    """Tensor-product grid with phi(I) absorbed into the combined weights."""
    check_tails(spec)

    axis_nodes, axis_weights = momentum_axis_rule(spec)
    internal_nodes, internal_weights = internal_rule(spec)
    if np.any(axis_weights <= 0) or np.any(internal_weights <= 0):
        raise GridError("quadrature produced non-positive weights", field="n_p")

    P1, P2, P3 = np.meshgrid(axis_nodes, axis_nodes, axis_nodes, indexing="ij")
    W1, W2, W3 = np.meshgrid(axis_weights, axis_weights, axis_weights, indexing="ij")
    p_mom = np.stack([P1.ravel(), P2.ravel(), P3.ravel()], axis=1)
    w_mom = (W1 * W2 * W3).ravel()

    n_mom = p_mom.shape[0]
    n_I = internal_nodes.shape[0]
    p = np.repeat(p_mom, n_I, axis=0)
    I = np.tile(internal_nodes, n_mom)
    weights = np.repeat(w_mom, n_I) * np.tile(internal_weights, n_mom)
    p0 = np.sqrt(1.0 + np.einsum("ki,ki->k", p, p))

    k = np.arange(n_mom)
    mirror = (((n_mom - 1 - k)[:, None]) * n_I + np.arange(n_I)[None, :]).ravel()

    energy = (1.0 + I) * p0
    half_log_span = 0.5 * spec.gamma0 * (energy.max() - energy.min())
    if -half_log_span < _MIN_LOG:
        raise GridError(
            "sqrt(F0) underflows at the box corners; reduce p_max or I_max for this gamma0",
            field="p_max",
            details={"gamma0": spec.gamma0, "max_energy": float(energy.max())},
        )

    x = np.arange(spec.n_x) * (spec.L_x / spec.n_x)

    arrays = (axis_nodes, axis_weights, internal_nodes, internal_weights, p, p0, I, weights, mirror, x)
    for arr in arrays:
        arr.setflags(write=False)

    grid = PhaseGrid(
        spec=spec,
        axis_nodes=axis_nodes,
        axis_weights=axis_weights,
        internal_nodes=internal_nodes,
        internal_weights=internal_weights,
        p=p,
        p0=p0,
        I=I,
        weights=weights,
        mirror=mirror,
        x=x,
    )
    logger.debug(
        f"Built phase grid with {grid.size} (p, I) nodes and {grid.n_x} cells",
        extra={"momentum_rule": spec.momentum_rule, "internal_rule": spec.internal_rule},
    )
    return grid


def _resolve_weight(grid: PhaseGrid, extra_weight: ExtraWeight) -> np.ndarray:
    if extra_weight is None:
        return grid.weights
    if callable(extra_weight):
        extra_weight = extra_weight(grid.p, grid.I)
    return grid.weights * np.asarray(extra_weight, dtype=float)


def integrate_pI(grid: PhaseGrid, values: np.ndarray, extra_weight: ExtraWeight = None):
    """
    Weighted (p, I) quadrature over the last axis of ``values``.

    Returns a float for a single (p, I) field and one value per cell for a
    spatial field.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != grid.size:
        raise ValueError(f"field has {values.shape[-1]} nodes, grid has {grid.size}")
    if not np.all(np.isfinite(values)):
        raise NonFiniteInputError("non-finite values passed to integrate_pI")
    result = values @ _resolve_weight(grid, extra_weight)
    if np.ndim(result) == 0:
        return float(result)
    return result


def inner(grid: PhaseGrid, f: np.ndarray, g: np.ndarray):
    """<f, g> in L^2 over (p, I) with the grid measure."""
    return (np.asarray(f) * np.asarray(g)) @ grid.weights


def mirror_field(grid: PhaseGrid, values: np.ndarray) -> np.ndarray:
    """values(-p, I) on the same nodes."""
    return np.asarray(values)[..., grid.mirror]


def grid_description(grid: PhaseGrid) -> dict:
    """JSON-ready dump of nodes and weights for external verification."""
    return {
        **grid.describe(),
        "axis_nodes": grid.axis_nodes.tolist(),
        "axis_weights": grid.axis_weights.tolist(),
        "internal_nodes": grid.internal_nodes.tolist(),
        "internal_weights": grid.internal_weights.tolist(),
        "x": grid.x.tolist(),
        "layout": "node = momentum_index * n_I + internal_index; momentum_index = (i1 * n_p + i2) * n_p + i3",
    }
