"""
Time integration of the Marle equation on the periodic slab.

Fields have shape (n_x, size): one (p, I) distribution per spatial cell.
Transport is an exact spectral shift per node, collisions are relaxed cell
by cell, and the two are combined by Strang or Lie splitting. The Duhamel
scheme integrates the mild formulation along characteristics instead.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..exceptions import DecayFitError, MarleError, SimulationAborted
from ..schemas import MonitorResult, Relax0DConfig, RunConfig
from .collision import (
    CollisionParams,
    conservation_defect,
    local_equilibria,
    relaxation_step,
)
from .distributions import Background, build_background, to_perturbation
from .linear_analysis import build_basis
from .moments import entropy_density, invariant_totals, invariant_weights, macrostate_of
from .phase_grid import PhaseGrid, build_grid

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    "t", "E", "mass", "E0", "E1", "E2", "E3", "entropy",
    "pert_mass", "pert_E0", "pert_E1", "pert_E2", "pert_E3",
    "defect_max", "min_F",
]
MACRO_COLUMNS = ["t", "x", "n", "u1", "u2", "u3", "gamma", "eta"]

NOMINAL_ORDER = {"strang": 2.0, "lie": 1.0, "duhamel": 2.0}


# Transport
def wavenumbers(grid: PhaseGrid) -> np.ndarray:
    """Angular wavenumbers of the rfft coefficients; the Nyquist entry is 0."""
    n_x = grid.n_x
    k = 2.0 * np.pi * np.fft.rfftfreq(n_x, d=grid.dx)
    if n_x % 2 == 0:
        k[-1] = 0.0
    return k


def _shift_spectrum(grid: PhaseGrid, F_hat: np.ndarray, dt: float) -> np.ndarray:
    k = wavenumbers(grid)
    shifted = F_hat * np.exp(-1j * dt * np.outer(k, grid.velocity))
    if grid.n_x % 2 == 0:
        shifted[-1] = 0.0
    return shifted


def transport_step(grid: PhaseGrid, F: np.ndarray, dt: float) -> np.ndarray:
    """F(x - (p1/p0) dt) for every (p, I) node by an rfft phase shift."""
    F = np.asarray(F, dtype=float)
    F_hat = np.fft.rfft(F, axis=0)
    return np.fft.irfft(_shift_spectrum(grid, F_hat, dt), n=grid.n_x, axis=0)


def spatial_derivative(grid: PhaseGrid, f: np.ndarray, order: int) -> np.ndarray:
    if order == 0:
        return np.asarray(f, dtype=float)
    f_hat = np.fft.rfft(f, axis=0)
    factor = (1j * wavenumbers(grid)) ** order
    return np.fft.irfft(factor[:, None] * f_hat, n=grid.n_x, axis=0)


def energy_functional(grid: PhaseGrid, f: np.ndarray, order: int) -> float:
    """sum_{k <= order} ||d^k f / dx^k||^2 over x, p and I."""
    if order < 0:
        raise ValueError("derivative order must be non-negative")
    total = 0.0
    for k in range(order + 1):
        d = spatial_derivative(grid, f, k)
        total += float(np.sum((d * d) @ grid.weights)) * grid.dx
    return total


# Splitting
def collide(grid: PhaseGrid, F: np.ndarray, dt: float, params: CollisionParams) -> np.ndarray:
    return relaxation_step(grid, F, dt, params)


def step(grid: PhaseGrid, F: np.ndarray, dt: float, scheme: str, params: CollisionParams) -> np.ndarray:
    """strang: T(dt/2) C(dt) T(dt/2); lie: T(dt) after C(dt)."""
    if scheme == "strang":
        F = transport_step(grid, F, 0.5 * dt)
        F = collide(grid, F, dt, params)
        return transport_step(grid, F, 0.5 * dt)
    if scheme == "lie":
        return transport_step(grid, collide(grid, F, dt, params), dt)
    raise ValueError(f"unknown splitting scheme: {scheme}")


class KineticSolver:
    """Splitting integrator bound to one configuration and grid."""

    def __init__(self, config: RunConfig, grid: Optional[PhaseGrid] = None, bg: Optional[Background] = None):
        self.config = config
        self.grid = grid or build_grid(config.grid)
        self.bg = bg or build_background(self.grid)
        self.params = CollisionParams.from_settings(config.collision, config.grid.tau)

    def step(self, F: np.ndarray, dt: Optional[float] = None, scheme: Optional[str] = None) -> np.ndarray:
        return step(self.grid, F, dt or self.config.dt, scheme or self.config.scheme.name, self.params)

    def advance(self, F: np.ndarray, n_steps: int, dt: Optional[float] = None) -> np.ndarray:
        for _ in range(n_steps):
            F = self.step(F, dt)
        return F


# Duhamel
def _equilibrium_trajectory(grid: PhaseGrid, trajectory: np.ndarray, params: CollisionParams) -> np.ndarray:
    out = np.empty_like(trajectory)
    for m in range(trajectory.shape[0]):
        out[m] = local_equilibria(grid, trajectory[m], params.workers, params.tol, params.max_iter)[1]
    return out


def duhamel_iterate(
    grid: PhaseGrid,
    trajectory: np.ndarray,
    F_init: np.ndarray,
    dt: float,
    params: CollisionParams,
) -> np.ndarray:
    """
    Next iterate of the mild formulation on the time grid of ``trajectory``:

        F(t+dt) = S_dt [e^{-x} F(t) + (phi1(x) - e^{-x}) G(t)] + (1 - phi1(x)) G(t+dt)

    with S the exact shift, x = dt / (tau (1+I) p0), phi1(x) = (1 - e^{-x}) / x
    and G the local equilibrium of the previous iterate at the stored times.
    The weights integrate the relaxation kernel exactly against G varying
    linearly along each characteristic.
    """
    x = dt * grid.inv_energy / params.tau
    decay = np.exp(-x)
    phi1 = -np.expm1(-x) / x
    G = _equilibrium_trajectory(grid, trajectory, params)
    out = np.empty_like(trajectory)
    out[0] = F_init
    for m in range(trajectory.shape[0] - 1):
        carried = decay * out[m] + (phi1 - decay) * G[m]
        out[m + 1] = transport_step(grid, carried, dt) + (1.0 - phi1) * G[m + 1]
    return out


@dataclass
class DuhamelResult:
    trajectory: np.ndarray
    differences: List[float]
    converged: bool


def duhamel_solve(
    grid: PhaseGrid,
    F_init: np.ndarray,
    dt: float,
    n_steps: int,
    params: CollisionParams,
    iterations: int = 4,
    tol: float = 1e-12,
    max_storage_mb: float = 2048.0,
) -> DuhamelResult:
    """Iterate from the time-constant trajectory F_init until the update is below tol."""
    F_init = np.asarray(F_init, dtype=float)
    storage_mb = 2 * (n_steps + 1) * F_init.size * 8 / 2**20
    if storage_mb > max_storage_mb:
        raise SimulationAborted(
            "Duhamel trajectory exceeds the storage limit",
            {"required_mb": round(storage_mb, 1), "max_storage_mb": max_storage_mb},
        )
    trajectory = np.broadcast_to(F_init, (n_steps + 1,) + F_init.shape).copy()
    scale = max(float(np.abs(F_init).max()), 1e-300)
    differences: List[float] = []
    for it in range(iterations):
        new = duhamel_iterate(grid, trajectory, F_init, dt, params)
        diff = float(np.abs(new - trajectory).max())
        differences.append(diff)
        trajectory = new
        logger.debug(f"Duhamel iteration {it + 1}: max update {diff:.3e}", extra={"iteration": it + 1, "update": diff})
        if diff <= tol * scale:
            return DuhamelResult(trajectory=trajectory, differences=differences, converged=True)
    return DuhamelResult(trajectory=trajectory, differences=differences, converged=False)


# Initial data and diagnostics
def perturbation_totals(grid: PhaseGrid, bg: Background, f: np.ndarray) -> np.ndarray:
    """Integrals of f sqrt(F0) against 1 and (1+I) p^mu over x, p and I."""
    per_cell = (np.asarray(f) * bg.sqrt_F0 * grid.weights) @ invariant_weights(grid).T
    return per_cell.sum(axis=0) * grid.dx


def build_initial_perturbation(config: RunConfig, grid: PhaseGrid, bg: Background) -> np.ndarray:
    """
    eps * sin|cos(2 pi m x / L) * g(p, I) with the macroscopic part of the
    spatial mean removed, so all five perturbation totals vanish.
    """
    ic = config.initial
    s = bg.sqrt_F0
    if ic.profile == "moments":
        c1, c2, c3 = ic.coefficients
        g = s * (c1 + c2 * grid.inv_energy + c3 * grid.velocity)
    else:
        rng = np.random.Generator(np.random.Philox(key=config.seed))
        g = s * rng.uniform(-1.0, 1.0, size=grid.size)
    arg = 2.0 * np.pi * ic.mode * grid.x / grid.spec.L_x
    phase = np.sin(arg) if ic.shape == "sin" else np.cos(arg)
    f = ic.amplitude * np.outer(phase, g)

    basis = build_basis(bg).vectors
    mean = f.mean(axis=0)
    f -= ((mean * grid.weights) @ basis.T) @ basis
    return f


def invariant_field_totals(grid: PhaseGrid, F: np.ndarray) -> np.ndarray:
    return invariant_totals(grid, F).sum(axis=0) * grid.dx


def total_entropy(grid: PhaseGrid, F: np.ndarray) -> float:
    return grid.dx * sum(entropy_density(grid, cell) for cell in F)


# Trace and monitors
@dataclass
class EnergyTrace:
    frame: pd.DataFrame
    lambda0: Optional[float] = None
    fit_residual: Optional[float] = None

    @classmethod
    def from_arrays(cls, times: Sequence[float], energy: Sequence[float]) -> "EnergyTrace":
        return cls(frame=pd.DataFrame({"t": np.asarray(times, dtype=float), "E": np.asarray(energy, dtype=float)}))

    @property
    def times(self) -> np.ndarray:
        return self.frame["t"].to_numpy()

    @property
    def energy(self) -> np.ndarray:
        return self.frame["E"].to_numpy()


def fit_decay_rate(
    trace: EnergyTrace,
    skip_fraction: float = 0.3,
    min_samples: int = 10,
    window: Optional[Tuple[float, float]] = None,
) -> Tuple[float, float]:
    """Least-squares slope of log E on the tail window; returns (lambda0, rms residual)."""
    t, E = trace.times, trace.energy
    if window is None:
        start = t[0] + skip_fraction * (t[-1] - t[0])
        mask = t >= start
    else:
        mask = (t >= window[0]) & (t <= window[1])
    mask &= np.isfinite(E) & (E > 0)
    if int(mask.sum()) < min_samples:
        raise DecayFitError(
            "not enough positive energy samples in the fit window",
            {"samples": int(mask.sum()), "required": min_samples},
        )
    tt, logE = t[mask], np.log(E[mask])
    slope, intercept = np.polyfit(tt, logE, 1)
    residual = float(np.sqrt(np.mean((logE - (slope * tt + intercept)) ** 2)))
    return float(-slope), residual


def _monitor(name: str, value: float, threshold: float, below: bool = True) -> MonitorResult:
    passed = value <= threshold if below else value >= threshold
    return MonitorResult(name=name, passed=bool(passed), value=float(value), threshold=float(threshold))


def _monitor_outcomes(frame: pd.DataFrame, config: RunConfig) -> List[MonitorResult]:
    mon = config.monitors
    totals = frame[["mass", "E0", "E1", "E2", "E3"]].to_numpy()
    scale = np.maximum(np.abs(totals[0]), abs(totals[0, 0]))
    drift = float((np.abs(totals - totals[0]) / scale).max())
    pert = float(frame[["pert_mass", "pert_E0", "pert_E1", "pert_E2", "pert_E3"]].abs().to_numpy().max())
    E = frame["E"].to_numpy()
    increase = float(np.diff(E).max()) if E.size > 1 else 0.0
    energy_slack = mon.energy_slack * max(1.0, float(E[0]))
    return [
        _monitor("positivity", float(frame["min_F"].min()), mon.positivity_floor, below=False),
        _monitor("perturbation_totals", pert, mon.totals_tol, below=True),
        _monitor("conservation_drift", drift, mon.drift_tol, below=True),
        _monitor("collision_defect", float(frame["defect_max"].max()), mon.defect_tol, below=True),
        _monitor("energy_monotone", increase, energy_slack, below=True),
    ]


@dataclass
class SimulationResult:
    config: RunConfig
    trace: EnergyTrace
    macro: pd.DataFrame
    monitors: List[MonitorResult]
    F_final: np.ndarray = field(repr=False)
    spectral_gap: Optional[float] = None

    @property
    def passed(self) -> bool:
        return all(m.passed for m in self.monitors)

    def failed_monitors(self) -> List[str]:
        return [m.name for m in self.monitors if not m.passed]

    def report(self) -> Dict[str, object]:
        ratio = None
        if self.spectral_gap and self.trace.lambda0 is not None:
            ratio = self.trace.lambda0 / self.spectral_gap
        return {
            "config": self.config.model_dump(mode="json"),
            "lambda0": self.trace.lambda0,
            "fit_residual": self.trace.fit_residual,
            "spectral_gap": self.spectral_gap,
            "decay_to_gap_ratio": ratio,
            "monitors": [m.model_dump() for m in self.monitors],
            "passed": self.passed,
            "samples": int(len(self.trace.frame)),
        }


class _Recorder:
    """Collects trace rows and macro snapshots while a run advances."""

    def __init__(self, config: RunConfig, grid: PhaseGrid, bg: Background):
        self.config, self.grid, self.bg = config, grid, bg
        self.rows: List[Dict[str, float]] = []
        self.macro_rows: List[Dict[str, float]] = []
        self.E_initial: Optional[float] = None

    def sample(self, step_index: int, F: np.ndarray) -> None:
        grid, bg = self.grid, self.bg
        t = step_index * self.config.dt
        f = to_perturbation(bg, F)
        E = energy_functional(grid, f, self.config.energy_order)
        if self.E_initial is None:
            self.E_initial = E
        elif self.E_initial > 0 and E > self.config.monitors.blowup_factor * self.E_initial:
            raise SimulationAborted(
                "energy functional exceeded the blow-up guard; the run left the small-data regime",
                {"step": step_index, "t": t, "E": E, "E_initial": self.E_initial},
            )
        totals = invariant_field_totals(grid, F)
        pert = perturbation_totals(grid, bg, f)
        defect = conservation_defect(grid, F, grid.spec.tau)
        row = {"t": t, "E": E}
        row.update(dict(zip(["mass", "E0", "E1", "E2", "E3"], totals.tolist())))
        row["entropy"] = total_entropy(grid, F)
        row.update(dict(zip(["pert_mass", "pert_E0", "pert_E1", "pert_E2", "pert_E3"], pert.tolist())))
        row["defect_max"] = defect.max_relative
        row["min_F"] = float(F.min())
        self.rows.append(row)

        if step_index % self.config.macro_every == 0 or step_index == self.config.n_steps:
            for x, cell in zip(grid.x, F):
                state = macrostate_of(grid, cell)
                self.macro_rows.append({"t": t, "x": float(x), **state.as_dict()})

    def is_sample_step(self, step_index: int) -> bool:
        return step_index % self.config.output_every == 0 or step_index == self.config.n_steps


def initial_field(config: RunConfig, grid: PhaseGrid, bg: Background) -> np.ndarray:
    f = build_initial_perturbation(config, grid, bg)
    return bg.F0 + bg.sqrt_F0 * f


def run_simulation(
    config: RunConfig,
    grid: Optional[PhaseGrid] = None,
    bg: Optional[Background] = None,
    spectral_gap: Optional[Callable[[Background], float]] = None,
) -> SimulationResult:
    """Integrate to t_end, sampling the energy trace and checking the run monitors."""
    grid = grid or build_grid(config.grid)
    bg = bg or build_background(grid)
    F = initial_field(config, grid, bg)
    recorder = _Recorder(config, grid, bg)
    n_steps = config.n_steps
    scheme = config.scheme.name
    logger.info(
        f"Starting {scheme} run: {n_steps} steps of dt={config.dt}",
        extra={"n_x": grid.n_x, "nodes": grid.size, "amplitude": config.initial.amplitude},
    )
    recorder.sample(0, F)

    if scheme == "duhamel":
        params = CollisionParams.from_settings(config.collision, config.grid.tau)
        result = duhamel_solve(
            grid, F, config.dt, n_steps, params,
            iterations=config.scheme.duhamel_iterations,
            tol=config.scheme.duhamel_tol,
            max_storage_mb=config.scheme.max_storage_mb,
        )
        if not result.converged:
            logger.warning(
                "Duhamel iteration stopped before reaching its tolerance",
                extra={"updates": result.differences},
            )
        for m in range(1, n_steps + 1):
            if recorder.is_sample_step(m):
                recorder.sample(m, result.trajectory[m])
        F = result.trajectory[-1]
    else:
        solver = KineticSolver(config, grid, bg)
        progress_every = max(1, n_steps // 10)
        for m in range(1, n_steps + 1):
            F = solver.step(F)
            if recorder.is_sample_step(m):
                recorder.sample(m, F)
            if m % progress_every == 0:
                logger.info(
                    f"Step {m}/{n_steps}",
                    extra={"step": m, "t": m * config.dt, "energy": recorder.rows[-1]["E"]},
                )

    frame = pd.DataFrame(recorder.rows, columns=TRACE_COLUMNS)
    trace = EnergyTrace(frame=frame)
    if config.initial.amplitude > 0:
        try:
            trace.lambda0, trace.fit_residual = fit_decay_rate(
                trace, config.monitors.fit_skip_fraction, config.monitors.fit_min_samples
            )
        except DecayFitError as e:
            logger.warning(f"Decay rate not fitted: {e}")

    monitors = _monitor_outcomes(frame, config)
    for m in monitors:
        level = logging.INFO if m.passed else logging.WARNING
        logger.log(level, f"Monitor {m.name}: {'pass' if m.passed else 'FAIL'}", extra={"monitor": m.name, "value": m.value})

    gap = spectral_gap(bg) if spectral_gap is not None else None
    return SimulationResult(
        config=config,
        trace=trace,
        macro=pd.DataFrame(recorder.macro_rows, columns=MACRO_COLUMNS),
        monitors=monitors,
        F_final=F,
        spectral_gap=gap,
    )


# Self-convergence
@dataclass
class ConvergenceResult:
    scheme: str
    dts: List[float]
    differences: List[float]
    orders: List[float]
    nominal: float
    tolerance: float = 0.2

    @property
    def observed(self) -> float:
        return self.orders[-1]

    @property
    def passed(self) -> bool:
        return abs(self.observed - self.nominal) <= self.tolerance

    def frame(self) -> pd.DataFrame:
        orders = [math.nan] + self.orders
        return pd.DataFrame({"dt": self.dts[1:], "difference": self.differences, "order": orders})


def final_state(config: RunConfig, grid: PhaseGrid, bg: Background) -> np.ndarray:
    F = initial_field(config, grid, bg)
    if config.scheme.name == "duhamel":
        params = CollisionParams.from_settings(config.collision, config.grid.tau)
        return duhamel_solve(
            grid, F, config.dt, config.n_steps, params,
            iterations=config.scheme.duhamel_iterations,
            tol=config.scheme.duhamel_tol,
            max_storage_mb=config.scheme.max_storage_mb,
        ).trajectory[-1]
    return KineticSolver(config, grid, bg).advance(F, config.n_steps)


def convergence_study(config: RunConfig, grid: Optional[PhaseGrid] = None) -> ConvergenceResult:
    """Final states at dt, dt/2, ... and observed orders log2(e_h / e_{h/2})."""
    grid = grid or build_grid(config.grid)
    bg = build_background(grid)
    dts = [config.dt / 2**level for level in range(config.convergence_levels)]
    states = []
    for dt in dts:
        run = config.model_copy(update={"dt": dt})
        logger.info(f"Convergence level dt={dt}", extra={"dt": dt, "steps": run.n_steps})
        states.append(final_state(run, grid, bg))

    differences = [
        float(np.sqrt(np.sum(((a - b) ** 2) @ grid.weights) * grid.dx)) for a, b in zip(states[:-1], states[1:])
    ]
    if min(differences) <= 0:
        raise MarleError("successive refinements agree exactly; no order can be measured", {"differences": differences})
    orders = [math.log2(e1 / e2) for e1, e2 in zip(differences[:-1], differences[1:])]
    return ConvergenceResult(
        scheme=config.scheme.name,
        dts=dts,
        differences=differences,
        orders=orders,
        nominal=NOMINAL_ORDER[config.scheme.name],
    )


# Space-homogeneous relaxation
@dataclass
class RelaxationResult:
    frame: pd.DataFrame
    monitors: List[MonitorResult]

    @property
    def passed(self) -> bool:
        return all(m.passed for m in self.monitors)

    def failed_monitors(self) -> List[str]:
        return [m.name for m in self.monitors if not m.passed]


def run_relaxation_0d(config: Relax0DConfig, grid: Optional[PhaseGrid] = None) -> RelaxationResult:
    """
    Relax seeded near-equilibrium distributions F0 (1 + a u), u ~ U[-1, 1],
    and record entropy, collision defect and positivity after every step.
    """
    grid = grid or build_grid(config.grid)
    bg = build_background(grid)
    params = CollisionParams.from_settings(config.collision, config.grid.tau)
    rng = np.random.Generator(np.random.Philox(key=config.seed))
    rows: List[Dict[str, float]] = []
    worst_entropy_drop = 0.0
    for sample in range(config.n_samples):
        F = bg.F0 * (1.0 + config.amplitude * rng.uniform(-1.0, 1.0, size=grid.size))
        totals0 = invariant_totals(grid, F)
        H_prev = entropy_density(grid, F)
        for k in range(config.steps + 1):
            if k > 0:
                F = relaxation_step(grid, F, config.dt, params)
            H = entropy_density(grid, F)
            if k > 0:
                worst_entropy_drop = max(worst_entropy_drop, H_prev - H)
            H_prev = H
            drift = np.abs(invariant_totals(grid, F) - totals0) / np.maximum(np.abs(totals0), abs(totals0[0]))
            rows.append({
                "sample": sample,
                "step": k,
                "t": k * config.dt,
                "entropy": H,
                "defect": conservation_defect(grid, F, config.grid.tau).max_relative,
                "drift": float(drift.max()),
                "min_F": float(F.min()),
            })
        logger.debug(f"Relaxed sample {sample}", extra={"sample": sample, "entropy": H})

    frame = pd.DataFrame(rows, columns=["sample", "step", "t", "entropy", "defect", "drift", "min_F"])
    monitors = [
        _monitor("entropy_monotone", worst_entropy_drop, config.entropy_slack, below=True),
        _monitor("collision_defect", float(frame["defect"].max()), config.defect_tol, below=True),
        _monitor("positivity", float(frame["min_F"].min()), config.positivity_floor, below=False),
    ]
    return RelaxationResult(frame=frame, monitors=monitors)
