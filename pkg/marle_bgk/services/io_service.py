import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

from .phase_grid import PhaseGrid, grid_description

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Round-trips every float64 exactly, so reruns compare byte for byte
FLOAT_FORMAT = "%.17g"


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def ensure_dir(path: PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(df: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug(f"Wrote {len(df)} rows to {path.name}", extra={"path": str(path)})
    return path


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def write_json(data: Dict[str, Any], path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    return json.loads(Path(path).read_text())


def dump_field(path: PathLike, field: np.ndarray) -> Path:
    """
    Write a distribution as long-format CSV with columns cell, node, value.
    A single (p, I) field is written as cell 0.
    """
    field = np.atleast_2d(np.asarray(field, dtype=float))
    n_cells, n_nodes = field.shape
    df = pd.DataFrame({
        "cell": np.repeat(np.arange(n_cells), n_nodes),
        "node": np.tile(np.arange(n_nodes), n_cells),
        "value": field.ravel(),
    })
    return write_csv(df, path)


def load_field(path: PathLike) -> np.ndarray:
    df = read_csv(path)
    n_cells = int(df["cell"].max()) + 1
    n_nodes = int(df["node"].max()) + 1
    out = np.empty((n_cells, n_nodes))
    out[df["cell"].to_numpy(), df["node"].to_numpy()] = df["value"].to_numpy()
    return out


def dump_grid(path: PathLike, grid: PhaseGrid) -> Path:
    """Grid spec, 1D rules and node layout as JSON."""
    return write_json(grid_description(grid), path)
