"""Run configuration loader and lightweight logging helpers.

Settings are stored in JSON (see sampler_settings.example.json) so runs can be
reconfigured without touching code. A user file is deep-merged over the
documented defaults and validated by pydantic; unknown keys are rejected.
"""
from __future__ import annotations

import json
import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import ConfigurationError

_DEFAULT_SETTINGS_FILE = Path(__file__).with_name("sampler_settings.example.json")
SETTINGS_ENV = "SAMPLER_SETTINGS_PATH"
USER_SETTINGS_FILE = "sampler_settings.json"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TargetSettings(_Section):
    id: str = "gmm"
    params: Dict[str, Any] = Field(default_factory=dict)


class ScheduleSettings(_Section):
    preset_id: str = "trig_full"
    T: float = Field(default=1.0, gt=0)
    T_split: Optional[float] = 0.5
    beta: Literal["r_over_g", "one"] = "r_over_g"
    alpha: Literal["one", "g"] = "one"
    pipeline: Optional[Literal["half", "full"]] = Field(default=None, description="Pipeline the preset drives; the preset's own kind when null")


class TrainSettings(_Section):
    n_path: int = Field(default=60, ge=1)
    batch: int = Field(default=128, ge=1)
    steps: int = Field(default=10000, ge=0)
    delta: float = Field(default=5e-6, gt=0)
    lam: Optional[float] = Field(default=None, ge=0, description="FBSDE weight; 2000 / delta when null")
    lr: float = Field(default=5e-3, gt=0)
    max_grad_norm: float = Field(default=1.0, gt=0)
    ema_decay: float = Field(default=0.999, ge=0, lt=1)
    monitor_every: int = Field(default=250, ge=0)
    monitor_paths: int = Field(default=512, ge=2)
    monitor_steps: int = Field(default=200, ge=2)
    log_every: int = Field(default=100, ge=0)
    checkpoint_out: str = "checkpoint.bin"
    resume_from: Optional[str] = None
    metrics_file: str = "metrics.jsonl"


class SampleSettings(_Section):
    n_samples: int = Field(default=10000, ge=1)
    n_steps: int = Field(default=1000, ge=1)
    eps: float = Field(default=1.0, ge=0)
    mode: Literal["sde", "ode"] = "sde"
    use_ema: bool = True
    output: str = "samples.csv"


class EstimateSettings(_Section):
    n_paths: int = Field(default=1000, ge=2)
    n_steps: int = Field(default=1000, ge=2)
    use_ema: bool = True
    samples_in: Optional[str] = Field(default=None, description="Sample CSV for moments; sampled afresh when null")
    output: str = "log_z.json"
    moments_output: str = "moments.json"


class LangevinSettings(_Section):
    step_size: float = Field(default=0.1, gt=0)
    n_steps: int = Field(default=1000, ge=0)
    n_samples: int = Field(default=10000, ge=1)
    output: str = "langevin_samples.csv"
    report: str = "langevin_moments.json"


class KdeSettings(_Section):
    bounds: Tuple[float, float, float, float] = (-8.0, 8.0, -8.0, 8.0)
    resolution: int = Field(default=200, ge=2)
    samples_in: Optional[str] = None
    output: str = "kde_grid.csv"


class BenchmarkSettings(_Section):
    scenario: str = "gmm_table2"
    train_steps: int = Field(default=10000, ge=0)
    n_samples: int = Field(default=10000, ge=2)
    sample_steps: int = Field(default=1000, ge=1)
    log_z_paths: int = Field(default=1000, ge=2)
    log_z_steps: int = Field(default=1000, ge=2)
    spin_glass_d: int = Field(default=100, ge=2)
    spin_glass_betas: List[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0])
    langevin_steps: List[int] = Field(default_factory=lambda: [10, 100, 1000, 10000])
    monitor_every: int = Field(default=250, ge=0)
    report: str = "benchmark_report.json"


class RunConfig(_Section):
    seed: int = 0
    threads: Optional[int] = Field(default=None, ge=1)
    log_level: str = "INFO"
    log_file: Optional[str] = None
    out_dir: str = "runs/default"
    checkpoint: Optional[str] = Field(default=None, description="Checkpoint read by sample / estimate commands")
    target: TargetSettings = Field(default_factory=TargetSettings)
    schedule: ScheduleSettings = Field(default_factory=ScheduleSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    sample: SampleSettings = Field(default_factory=SampleSettings)
    estimate: EstimateSettings = Field(default_factory=EstimateSettings)
    langevin: LangevinSettings = Field(default_factory=LangevinSettings)
    kde: KdeSettings = Field(default_factory=KdeSettings)
    benchmark: BenchmarkSettings = Field(default_factory=BenchmarkSettings)

    def out_path(self, name: str) -> Path:
        """Resolve ``name`` against ``out_dir`` unless it is absolute."""
        path = Path(name)
        return path if path.is_absolute() else Path(self.out_dir) / path


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigurationError(f"{path} must hold a JSON object, got {type(payload).__name__}")
    return payload


def _default_payload() -> Dict[str, Any]:
    if _DEFAULT_SETTINGS_FILE.exists():
        return _read_json(_DEFAULT_SETTINGS_FILE)
    # The model defaults mirror the example file.
    return {}


def _merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    result: Dict[str, Any] = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = _merge(result[key], value)
        else:
            result[key] = value
    return result


def load_settings(path: str | Path | None = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the user file, then ``overrides`` (e.g. CLI flags).

    An explicit ``path`` must exist; the environment/default user file may be absent.
    """
    if path is not None and not Path(path).exists():
        raise FileNotFoundError(f"Config file {path} does not exist")
    candidate = Path(path or os.getenv(SETTINGS_ENV, USER_SETTINGS_FILE))
    payload = _default_payload()
    if candidate.exists():
        payload = _merge(payload, _read_json(candidate))
    else:
        logging.getLogger(__name__).info("Settings file %s not found, falling back to defaults", candidate)
    if overrides:
        payload = _merge(payload, overrides)

    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigurationError(f"Invalid settings: {exc}") from exc


@lru_cache(maxsize=1)
def get_settings() -> RunConfig:
    return load_settings()


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configure root logging once using the desired log level.

    Args:
        level: Log level (DEBUG, INFO, WARNING, ERROR). Defaults to settings value.
        log_file: Optional file path for log output. If provided, logs to both console and file.
    """
    log_level = (level or get_settings().log_level or "INFO").upper()

    handlers: List[logging.Handler] = []

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(
        logging.Formatter(
            "%(asctime)s %(levelname)-8s [%(name)s] %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
    )
    handlers.append(console_handler)

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(
            logging.Formatter(
                "%(asctime)s %(levelname)-8s [%(name)s:%(funcName)s:%(lineno)d] %(message)s",
                datefmt="%Y-%m-%d %H:%M:%S",
            )
        )
        handlers.append(file_handler)

    logging.basicConfig(level=log_level, handlers=handlers, force=True)

    logger = logging.getLogger(__name__)
    logger.info("Logging configured: level=%s, file=%s", log_level, log_file or "console-only")
