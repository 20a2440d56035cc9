"""
Marle BGK - Experiment Presets

Desk-scale default configurations for every command. Each preset is a
validated schema instance, so it can be dumped with ``model_dump(mode="json")``
and read back unchanged.
"""
from typing import Callable, Dict, Union

from .exceptions import ConfigurationError
from .schemas import (
    AnalysisConfig,
    CollisionSettings,
    GammaTableConfig,
    GridSpec,
    InitialCondition,
    Relax0DConfig,
    RunConfig,
    SchemeSettings,
)

AnyConfig = Union[RunConfig, AnalysisConfig, GammaTableConfig, Relax0DConfig]

DESK_GRID = GridSpec(D=2.0, p_max=24.0, n_p=12, I_max=24.0, n_I=8, n_x=32, gamma0=1.0)


def _decay1d() -> RunConfig:
    return RunConfig(
        grid=DESK_GRID,
        t_end=20.0,
        dt=0.05,
        scheme=SchemeSettings(name="strang"),
        collision=CollisionSettings(mode="frozen", conservative_projection=True),
        energy_order=3,
        output_every=4,
        macro_every=40,
        initial=InitialCondition(amplitude=1e-3, mode=1, shape="sin", profile="moments"),
    )


def _analysis() -> AnalysisConfig:
    return AnalysisConfig(grid=DESK_GRID.model_copy(update={"n_p": 16, "n_I": 16}))


def _relax0d() -> Relax0DConfig:
    return Relax0DConfig(grid=DESK_GRID, dt=0.1, steps=50, amplitude=0.05, n_samples=20)


def _convergence() -> RunConfig:
    return RunConfig(
        grid=DESK_GRID.model_copy(update={"n_x": 16}),
        t_end=1.0,
        dt=0.1,
        scheme=SchemeSettings(name="strang"),
        collision=CollisionSettings(mode="picard", picard_iterations=2, conservative_projection=True),
        report_spectral_gap=False,
        initial=InitialCondition(amplitude=1e-3),
        convergence_levels=3,
    )


def _gamma_table() -> GammaTableConfig:
    return GammaTableConfig(grid=DESK_GRID)


PRESETS: Dict[str, Callable[[], AnyConfig]] = {
    "decay1d": _decay1d,
    "analysis": _analysis,
    "relax0d": _relax0d,
    "convergence": _convergence,
    "gamma-table": _gamma_table,
}

# Config model each command validates against
COMMAND_MODELS = {
    "gamma-table": GammaTableConfig,
    "analyze-operator": AnalysisConfig,
    "relax0d": Relax0DConfig,
    "decay1d": RunConfig,
    "convergence": RunConfig,
}

COMMAND_PRESETS = {
    "gamma-table": "gamma-table",
    "analyze-operator": "analysis",
    "relax0d": "relax0d",
    "decay1d": "decay1d",
    "convergence": "convergence",
}


def preset(name: str) -> AnyConfig:
    """Documented default configuration by name."""
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset '{name}'; choose one of {sorted(PRESETS)}", field="preset")
    return factory()
