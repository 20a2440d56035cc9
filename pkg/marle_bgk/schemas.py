"""
Marle BGK - Configuration Schemas

Versioned run configuration documents validated with pydantic. Every physics
parameter of a run lives in one of these models; a validation failure names
the offending field.
"""
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SCHEMA_VERSION = 1

# Largest perturbation amplitude accepted for initial data
SMALL_DATA_LIMIT = 0.1


class _Frozen(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# Phase space
class GridSpec(_Frozen):
    D: float = Field(2.0, gt=0, description="Internal degrees of freedom exponent in phi(I)=I^((D-2)/2)")
    p_max: float = Field(24.0, gt=0, description="Momentum cutoff per axis")
    n_p: int = Field(16, ge=2, description="Momentum nodes per axis")
    I_max: float = Field(24.0, gt=0, description="Internal-energy cutoff")
    n_I: int = Field(16, ge=2, description="Internal-energy nodes")
    n_x: int = Field(32, ge=2, description="Spatial cells")
    L_x: float = Field(6.283185307179586, gt=0, description="Spatial period")
    gamma0: float = Field(1.0, gt=0, description="Reference equilibrium parameter")
    tau: float = Field(1.0, gt=0, description="Relaxation time")
    momentum_rule: Literal["sinh", "uniform", "gauss"] = "sinh"
    p_scale: float = Field(1.0, gt=0, description="Scale s of the p = s*sinh(t) map")
    internal_rule: Literal["laguerre", "jacobi"] = "laguerre"
    tail_tol: float = Field(1e-10, gt=0, lt=1)

    @field_validator("D")
    @classmethod
    def validate_D(cls, v: float) -> float:
        if v > 64:
            raise ValueError("D above 64 is outside the supported internal-energy rules")
        return v


# Collision substep
class CollisionSettings(_Frozen):
    mode: Literal["frozen", "picard"] = "frozen"
    picard_iterations: int = Field(3, ge=1, le=50)
    conservative_projection: bool = False
    workers: int = Field(1, ge=1, le=256)
    newton_tol: float = Field(1e-12, gt=0, lt=1e-3)
    newton_max_iter: int = Field(30, ge=1)


class SchemeSettings(_Frozen):
    name: Literal["strang", "lie", "duhamel"] = "strang"
    duhamel_iterations: int = Field(4, ge=1, le=100)
    duhamel_tol: float = Field(1e-12, gt=0)
    max_storage_mb: float = Field(2048.0, gt=0)


class InitialCondition(_Frozen):
    amplitude: float = Field(1e-3, ge=0, description="Perturbation amplitude epsilon")
    mode: int = Field(1, ge=1, description="Spatial Fourier mode number")
    shape: Literal["sin", "cos"] = "sin"
    profile: Literal["moments", "random"] = "moments"
    coefficients: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator("amplitude")
    @classmethod
    def validate_amplitude(cls, v: float) -> float:
        if v > SMALL_DATA_LIMIT:
            raise ValueError(f"amplitude must not exceed the small-data limit {SMALL_DATA_LIMIT}")
        return v


class MonitorSettings(_Frozen):
    positivity_floor: float = Field(-1e-14, le=0)
    totals_tol: float = Field(1e-9, gt=0)
    drift_tol: float = Field(1e-8, gt=0)
    defect_tol: float = Field(1e-9, gt=0)
    energy_slack: float = Field(1e-10, ge=0)
    blowup_factor: float = Field(10.0, gt=1)
    fit_skip_fraction: float = Field(0.3, ge=0, lt=1)
    fit_min_samples: int = Field(10, ge=2)


class _Versioned(_Frozen):
    schema_version: int = SCHEMA_VERSION
    seed: int = Field(0, ge=0, lt=2**64)

    @field_validator("schema_version")
    @classmethod
    def validate_schema_version(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; expected {SCHEMA_VERSION}")
        return v


class RunConfig(_Versioned):
    """Time-dependent run on the periodic slab (decay1d, convergence)."""

    grid: GridSpec = GridSpec()
    t_end: float = Field(20.0, gt=0)
    dt: float = Field(0.05, gt=0)
    scheme: SchemeSettings = SchemeSettings()
    collision: CollisionSettings = CollisionSettings()
    energy_order: int = Field(3, ge=0, le=12, description="Highest spatial derivative N in the energy functional")
    output_every: int = Field(1, ge=1)
    macro_every: int = Field(20, ge=1)
    initial: InitialCondition = InitialCondition()
    monitors: MonitorSettings = MonitorSettings()
    report_spectral_gap: bool = True
    convergence_levels: int = Field(3, ge=3, le=6)

    @model_validator(mode="after")
    def validate_time_grid(self) -> "RunConfig":
        if self.dt > self.t_end:
            raise ValueError("dt must not exceed t_end")
        steps = self.t_end / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("t_end must be an integer multiple of dt")
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


class AnalysisConfig(_Versioned):
    """Operator analysis on the (p, I) grid (analyze-operator)."""

    grid: GridSpec = GridSpec()
    n_pairs: int = Field(100, ge=1)
    n_coercivity: int = Field(200, ge=1)
    gap_method: Literal["auto", "dense", "lanczos"] = "auto"
    dense_limit: int = Field(2000, ge=10)
    eig_tol: float = Field(1e-12, ge=0)
    eig_maxiter: Optional[int] = Field(None, ge=1)
    theta_order: int = Field(8, ge=2, le=64)


class GammaTableConfig(_Versioned):
    """Tabulation of the Juttner functions (gamma-table)."""

    grid: GridSpec = GridSpec()
    gammas: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0, 8.0])

    @field_validator("gammas")
    @classmethod
    def validate_gammas(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("gammas must not be empty")
        if any(g <= 0 for g in v):
            raise ValueError("gammas must be positive")
        return v


class Relax0DConfig(_Versioned):
    """Space-homogeneous relaxation experiment (relax0d)."""

    grid: GridSpec = GridSpec()
    dt: float = Field(0.1, gt=0)
    steps: int = Field(50, ge=1)
    amplitude: float = Field(0.05, ge=0, le=0.5)
    n_samples: int = Field(20, ge=1)
    collision: CollisionSettings = CollisionSettings(conservative_projection=True)
    entropy_slack: float = Field(1e-12, ge=0)
    defect_tol: float = Field(1e-9, gt=0)
    positivity_floor: float = Field(-1e-14, le=0)


# Run outcomes
class MonitorResult(_Frozen):
    """Outcome of one pass/fail check reported in report.json."""

    name: str
    passed: bool
    value: float
    threshold: float
