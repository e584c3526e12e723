"""Run artifacts: sample CSVs, KDE grids, metrics JSON lines, reports and manifests."""
from __future__ import annotations

import json
import logging
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import scipy
import torch
from scipy import stats

from errors import ConfigurationError, UnsupportedDimensionError
from numerics import DTYPE

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FLOAT_FORMAT = "%.17g"


def samples_frame(samples: torch.Tensor) -> pd.DataFrame:
    array = samples.detach().to(DTYPE).numpy()
    return pd.DataFrame(array, columns=[f"x{i}" for i in range(array.shape[1])])


def write_samples_csv(samples: torch.Tensor, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples_frame(samples).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("Wrote %d samples to %s", samples.shape[0], path)
    return path


def read_samples_csv(path: Path | str) -> torch.Tensor:
    frame = pd.read_csv(path, dtype=np.float64)
    if not all(column.startswith("x") for column in frame.columns):
        raise ConfigurationError(f"{path} does not look like a sample file (columns {list(frame.columns)})")
    return torch.as_tensor(frame.to_numpy(), dtype=DTYPE)


def kde_grid(samples: torch.Tensor, bounds: Sequence[float], resolution: int) -> pd.DataFrame:
    """Gaussian KDE (Scott bandwidth) on a resolution x resolution grid over (xmin, xmax, ymin, ymax)."""
    if samples.dim() != 2 or samples.shape[1] != 2:
        raise UnsupportedDimensionError(f"KDE export needs 2-D samples, got shape {tuple(samples.shape)}")
    if samples.shape[0] == 0:
        raise ConfigurationError("KDE export needs at least one sample")
    if len(bounds) != 4 or resolution < 2:
        raise ConfigurationError(f"Need bounds (xmin, xmax, ymin, ymax) and resolution >= 2, got {bounds}, {resolution}")
    xmin, xmax, ymin, ymax = (float(b) for b in bounds)
    xs = np.linspace(xmin, xmax, resolution)
    ys = np.linspace(ymin, ymax, resolution)
    grid_x, grid_y = np.meshgrid(xs, ys, indexing="ij")
    points = np.vstack([grid_x.ravel(), grid_y.ravel()])
    data = samples.detach().to(DTYPE).numpy().T

    density = None
    if data.shape[1] > 2:
        try:
            density = stats.gaussian_kde(data, bw_method="scott")(points)
        except np.linalg.LinAlgError:
            logger.warning("Sample covariance is singular; using an isotropic kernel")
    if density is None:
        density = _isotropic_kde(data, points)

    return pd.DataFrame({"x": grid_x.ravel(), "y": grid_y.ravel(), "density": np.atleast_1d(density)})


def _isotropic_kde(data: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Unit-covariance kernels scaled by Scott's factor n^(-1/6)."""
    factor = data.shape[1] ** (-1.0 / 6.0)
    kernel = stats.multivariate_normal(mean=np.zeros(2), cov=factor * factor * np.eye(2))
    return np.mean([kernel.pdf(points.T - center) for center in data.T], axis=0)


def export_kde_grid(samples: torch.Tensor, bounds: Sequence[float], resolution: int, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kde_grid(samples, bounds, resolution).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("Wrote %dx%d KDE grid to %s", resolution, resolution, path)
    return path


class MetricsWriter:
    """Append-only JSON lines; every record carries ``format_version``."""

    def __init__(self, path: Path | str) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")

    def __call__(self, record: Mapping[str, Any]) -> None:
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps({"format_version": FORMAT_VERSION, **record}, default=_jsonable) + "\n")


def read_metrics(path: Path | str) -> list[Dict[str, Any]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def _jsonable(value: Any) -> Any:
    if isinstance(value, torch.Tensor):
        return value.tolist()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "to_dict"):
        return value.to_dict()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json_report(path: Path | str, payload: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps({"format_version": FORMAT_VERSION, **payload}, indent=2, default=_jsonable) + "\n",
        encoding="utf-8",
    )
    logger.info("Wrote report %s", path)
    return path


def library_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def write_manifest(
    out_dir: Path | str,
    command: str,
    config: Mapping[str, Any],
    checkpoint_sha256: Optional[str] = None,
    outputs: Optional[Mapping[str, Any]] = None,
) -> Path:
    """manifest.json: config echo, checkpoint hash and library versions."""
    payload = {
        "command": command,
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": dict(config),
        "checkpoint_sha256": checkpoint_sha256,
        "outputs": dict(outputs or {}),
        "versions": library_versions(),
    }
    return write_json_report(Path(out_dir) / "manifest.json", payload)
