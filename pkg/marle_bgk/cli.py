"""
Marle BGK - Command Line Entry Point

    python -m marle_bgk <command> [--config PATH | --preset NAME] [--out DIR] [--seed U64] [--quiet]

Commands: gamma-table, analyze-operator, relax0d, decay1d, convergence.
Exit codes: 0 success with all monitors passing, 1 monitor failure or aborted
run, 2 configuration error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from .config import get_settings, init_error_monitoring
from .exceptions import ConfigurationError, MarleError
from .logging_config import configure_logging
from .presets import COMMAND_MODELS, COMMAND_PRESETS, AnyConfig, preset
from .services import io_service
from .services.distributions import build_background
from .services.juttner_functions import compact_bounds, equilibrium_constants, gamma_table
from .services.linear_analysis import LinearizedOperator, analyze_operator
from .services.phase_grid import build_grid
from .services.solver import convergence_study, run_relaxation_0d, run_simulation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_MONITOR = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m marle_bgk",
        description="Relativistic BGK (Marle) solver and linearised-operator analysis for polyatomic gases",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in [
        ("gamma-table", "tabulate M, M', Mtilde, eta and kappa over gamma"),
        ("analyze-operator", "kernel, symmetry, coercivity and spectral-gap checks of the linearised operator"),
        ("relax0d", "space-homogeneous relaxation with entropy and conservation monitors"),
        ("decay1d", "perturbation decay on the periodic slab"),
        ("convergence", "self-convergence order of the time integrator"),
    ]:
        cmd = sub.add_parser(name, help=help_text)
        source = cmd.add_mutually_exclusive_group()
        source.add_argument("--config", type=Path, help="Path to a JSON run configuration")
        source.add_argument("--preset", help="Named preset used instead of a config file")
        cmd.add_argument("--out", type=Path, default=Path("out"), help="Output directory")
        cmd.add_argument("--seed", type=int, default=None, help="Override the configuration seed (u64)")
        cmd.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    return parser


def _first_error(exc: ValidationError) -> ConfigurationError:
    err = exc.errors()[0]
    location = ".".join(str(part) for part in err["loc"]) or "config"
    return ConfigurationError(f"invalid configuration: {location}: {err['msg']}", field=location)


def load_config(command: str, path: Optional[Path], preset_name: Optional[str], seed: Optional[int]) -> AnyConfig:
    """Validate the config file (or preset) for a command before any computation."""
    model = COMMAND_MODELS[command]
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}", field="config")
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file is not valid JSON: {e}", field="config")
    else:
        data = preset(preset_name or COMMAND_PRESETS[command]).model_dump(mode="json")
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object", field="config")
    if seed is not None:
        data["seed"] = seed
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise _first_error(e) from e


def _finish(passed: bool, failed: List[str], out: Path) -> int:
    if passed:
        logger.info(f"All monitors passed; results in {out}")
        return EXIT_OK
    logger.error(f"Monitor failure: {', '.join(failed)}", extra={"failed": failed})
    return EXIT_MONITOR


def cmd_gamma_table(config, out: Path) -> int:
    grid = build_grid(config.grid)
    table = gamma_table(grid, config.gammas)
    io_service.write_csv(table, out / "gamma_table.csv")
    consts = equilibrium_constants(grid)
    eta = table["eta"]
    report = {
        "config": config.model_dump(mode="json"),
        "constants": consts.as_dict(),
        "monotone_eta": bool((eta.diff().dropna() > 0).all()),
        "negative_sign_fact": bool((table["M"] ** 2 + table["Mprime"] * table["Mtilde"] < 0).all()),
        "bounds": compact_bounds(grid, float(eta.min()), float(eta.max())) if len(eta) > 1 else None,
    }
    io_service.write_json(report, out / "report.json")
    failed = [name for name in ("monotone_eta", "negative_sign_fact") if not report[name]]
    return _finish(not failed, failed, out)


def cmd_analyze_operator(config, out: Path) -> int:
    analysis = analyze_operator(config)
    io_service.write_json(analysis.report, out / "report.json")
    return _finish(analysis.passed, analysis.failed_monitors(), out)


def cmd_relax0d(config, out: Path) -> int:
    result = run_relaxation_0d(config)
    io_service.write_csv(result.frame, out / "relax0d.csv")
    io_service.write_json(
        {
            "config": config.model_dump(mode="json"),
            "monitors": [m.model_dump() for m in result.monitors],
            "passed": result.passed,
        },
        out / "report.json",
    )
    return _finish(result.passed, result.failed_monitors(), out)


def cmd_decay1d(config, out: Path) -> int:
    def gap(bg):
        return LinearizedOperator(bg).spectral_gap().lam

    grid = build_grid(config.grid)
    result = run_simulation(config, grid, build_background(grid), spectral_gap=gap if config.report_spectral_gap else None)
    io_service.write_csv(result.trace.frame, out / "trace.csv")
    io_service.write_csv(result.macro, out / "macro.csv")
    io_service.write_json(result.report(), out / "report.json")
    return _finish(result.passed, result.failed_monitors(), out)


def cmd_convergence(config, out: Path) -> int:
    result = convergence_study(config)
    io_service.write_csv(result.frame(), out / "convergence.csv")
    io_service.write_json(
        {
            "config": config.model_dump(mode="json"),
            "scheme": result.scheme,
            "dts": result.dts,
            "differences": result.differences,
            "orders": result.orders,
            "observed_order": result.observed,
            "nominal_order": result.nominal,
            "passed": result.passed,
        },
        out / "report.json",
    )
    return _finish(result.passed, [] if result.passed else ["convergence_order"], out)


COMMANDS = {
    "gamma-table": cmd_gamma_table,
    "analyze-operator": cmd_analyze_operator,
    "relax0d": cmd_relax0d,
    "decay1d": cmd_decay1d,
    "convergence": cmd_convergence,
}


def parse_and_dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG

    load_dotenv()
    settings = get_settings()
    configure_logging(settings.ENVIRONMENT, "WARNING" if args.quiet else settings.LOG_LEVEL)
    init_error_monitoring(settings)

    try:
        config = load_config(args.command, args.config, args.preset, args.seed)
        out = io_service.ensure_dir(args.out)
        logger.info(f"Running {args.command}", extra={"command": args.command, "out": str(out)})
        return COMMANDS[args.command](config, out)
    except MarleError as e:
        logger.error(f"{args.command} failed: {e}", extra={"command": args.command, "error_type": type(e).__name__})
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


def main() -> None:
    raise SystemExit(parse_and_dispatch())


if __name__ == "__main__":
    main()
