"""Service helpers backing the command-line surface.

Each ``*_run`` function takes a validated RunConfig, does the work, writes its
artifacts under ``out_dir`` together with a manifest and returns a summary.
"""
from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import torch

from benchmarks import BenchmarkBudget, run_scenario
from checkpoints import file_sha256, read_checkpoint, write_checkpoint
from estimators import empirical_moments
from exports import (
    MetricsWriter,
    export_kde_grid,
    read_samples_csv,
    write_json_report,
    write_manifest,
    write_samples_csv,
)
from fbsde_train import FieldPair, Problem, TrainConfig, draw_samples, estimate_log_z, fields_from_checkpoint, train
from numerics import derive_generator
from sampler import SamplerConfig, langevin_baseline
from settings import RunConfig
from targets import TargetDensity, make_target

logger = logging.getLogger(__name__)


def train_config_from(settings: RunConfig) -> TrainConfig:
    train_section = settings.train.model_dump(exclude={"checkpoint_out", "resume_from", "metrics_file"})
    return TrainConfig(
        target_id=settings.target.id,
        target_params=dict(settings.target.params),
        preset_id=settings.schedule.preset_id,
        T=settings.schedule.T,
        T_split=settings.schedule.T_split,
        beta=settings.schedule.beta,
        alpha=settings.schedule.alpha,
        pipeline=settings.schedule.pipeline,
        seed=settings.seed,
        **train_section,
    )


def sampler_config_from(settings: RunConfig) -> SamplerConfig:
    return SamplerConfig(**settings.sample.model_dump(exclude={"output"}))


def benchmark_budget_from(settings: RunConfig) -> BenchmarkBudget:
    section = settings.benchmark
    return BenchmarkBudget(
        train_steps=section.train_steps,
        n_samples=section.n_samples,
        sample_steps=section.sample_steps,
        log_z_paths=section.log_z_paths,
        log_z_steps=section.log_z_steps,
        spin_glass_d=section.spin_glass_d,
        spin_glass_betas=tuple(section.spin_glass_betas),
        langevin_steps=tuple(section.langevin_steps),
        monitor_every=section.monitor_every,
        seed=settings.seed,
    )


def _echo(settings: RunConfig) -> Dict[str, Any]:
    return settings.model_dump(mode="json")


def _target(settings: RunConfig) -> TargetDensity:
    return make_target(settings.target.id, **dict(settings.target.params))


def _checkpoint_path(settings: RunConfig) -> Path:
    return Path(settings.checkpoint) if settings.checkpoint else settings.out_path(settings.train.checkpoint_out)


def load_fields(settings: RunConfig, use_ema: bool) -> tuple[Problem, FieldPair, str]:
    """Fields from the run's checkpoint; its header must match the configured target and schedule."""
    path = _checkpoint_path(settings)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint {path} does not exist")
    problem, fields = fields_from_checkpoint(read_checkpoint(path), train_config_from(settings), use_ema)
    return problem, fields, file_sha256(path)


def _moments_report(samples: torch.Tensor, target: TargetDensity, meta: Dict[str, Any]) -> Dict[str, Any]:
    records = empirical_moments(samples, meta)
    return {
        "target_id": target.target_id,
        "estimates": {name: record.to_dict() for name, record in records.items()},
        "truth": target.true_moments,
    }


def train_run(settings: RunConfig) -> Dict[str, Any]:
    config = train_config_from(settings)
    resume = read_checkpoint(settings.train.resume_from) if settings.train.resume_from else None
    metrics_path = settings.out_path(settings.train.metrics_file)
    result = train(config, metrics=MetricsWriter(metrics_path), resume=resume)

    checkpoint_path = settings.out_path(settings.train.checkpoint_out)
    digest = write_checkpoint(checkpoint_path, result.checkpoint)
    summary = {
        "checkpoint": str(checkpoint_path),
        "metrics": str(metrics_path),
        "steps": config.steps,
        "aborted_steps": result.aborted_steps,
        "final_log_z": result.final_log_z,
    }
    write_manifest(settings.out_dir, "train", _echo(settings), digest, summary)
    return summary


def sample_run(settings: RunConfig) -> Dict[str, Any]:
    problem, fields, digest = load_fields(settings, settings.sample.use_ema)
    batch = draw_samples(problem, fields, sampler_config_from(settings), derive_generator(settings.seed, "sample"))
    path = write_samples_csv(batch.finite, settings.out_path(settings.sample.output))
    summary = {"samples": str(path), "n": int(batch.finite.shape[0]), "failed": int(batch.failed.sum())}
    write_manifest(settings.out_dir, "sample", _echo(settings), digest, summary)
    return summary


def estimate_logz_run(settings: RunConfig) -> Dict[str, Any]:
    section = settings.estimate
    problem, fields, digest = load_fields(settings, section.use_ema)
    record = estimate_log_z(
        problem,
        fields,
        section.n_paths,
        section.n_steps,
        derive_generator(settings.seed, "estimate"),
        {"preset_id": problem.schedule.preset_id, "n_steps": section.n_steps},
    )
    path = write_json_report(
        settings.out_path(section.output),
        {"estimate": record.to_dict(), "true_log_z": problem.target.true_log_z},
    )
    summary = {"report": str(path), "log_z": record.value, "ci95": record.ci95}
    write_manifest(settings.out_dir, "estimate-logz", _echo(settings), digest, summary)
    return summary


def moments_run(settings: RunConfig) -> Dict[str, Any]:
    """Moments of a sample CSV, or of fresh samples from the checkpoint when none is given."""
    section = settings.estimate
    digest: Optional[str] = None
    if section.samples_in:
        samples = read_samples_csv(section.samples_in)
        target = _target(settings)
        meta: Dict[str, Any] = {"source": section.samples_in}
    else:
        problem, fields, digest = load_fields(settings, settings.sample.use_ema)
        batch = draw_samples(problem, fields, sampler_config_from(settings), derive_generator(settings.seed, "sample"))
        samples, target = batch.finite, problem.target
        meta = {"source": "checkpoint", "n_steps": settings.sample.n_steps}
    path = write_json_report(settings.out_path(section.moments_output), _moments_report(samples, target, meta))
    summary = {"report": str(path), "n": int(samples.shape[0])}
    write_manifest(settings.out_dir, "moments", _echo(settings), digest, summary)
    return summary


def langevin_run(settings: RunConfig) -> Dict[str, Any]:
    section = settings.langevin
    target = _target(settings)
    batch = langevin_baseline(
        target, section.step_size, section.n_steps, section.n_samples, derive_generator(settings.seed, "langevin")
    )
    samples_path = write_samples_csv(batch.finite, settings.out_path(section.output))
    meta = {"sampler": "langevin", "step_size": section.step_size, "n_steps": section.n_steps}
    report_path = write_json_report(settings.out_path(section.report), _moments_report(batch.finite, target, meta))
    summary = {"samples": str(samples_path), "report": str(report_path), "failed": int(batch.failed.sum())}
    write_manifest(settings.out_dir, "langevin", _echo(settings), None, summary)
    return summary


def _metrics_factory(out_dir: Path) -> Callable[[str], MetricsWriter]:
    def factory(label: str) -> MetricsWriter:
        return MetricsWriter(out_dir / "metrics" / f"{re.sub(r'[^A-Za-z0-9_.-]+', '_', label)}.jsonl")

    return factory


def benchmark_run(settings: RunConfig) -> Dict[str, Any]:
    section = settings.benchmark
    report = run_scenario(section.scenario, benchmark_budget_from(settings), _metrics_factory(Path(settings.out_dir)))
    path = write_json_report(settings.out_path(section.report), report)
    failed = [case["label"] for case in report["cases"] if "error" in case]
    summary = {"report": str(path), "cases": len(report["cases"]), "failed_cases": failed}
    write_manifest(settings.out_dir, "benchmark", _echo(settings), None, summary)
    return summary


def kde_run(settings: RunConfig) -> Dict[str, Any]:
    section = settings.kde
    source = Path(section.samples_in) if section.samples_in else settings.out_path(settings.sample.output)
    samples = read_samples_csv(source)
    path = export_kde_grid(samples, section.bounds, section.resolution, settings.out_path(section.output))
    summary = {"grid": str(path), "source": str(source), "resolution": section.resolution}
    write_manifest(settings.out_dir, "kde", _echo(settings), None, summary)
    return summary
