"""Benchmark scenarios: train, sample and estimate, then compare with published numbers.

Each scenario is a list of cases. A case trains one sampler (or reuses the
previous case's training when only sampling settings change), draws samples,
estimates functionals and places them next to the embedded reference values.
Seeds are pinned per case so repeated runs are deterministic.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

from errors import ConfigurationError, NumericalFailureError
from estimators import EstimateRecord, empirical_moments, mode_coverage, predict_free_energy
from fbsde_train import (
    FieldPair,
    Problem,
    TrainConfig,
    TrainResult,
    draw_samples,
    estimate_log_z,
    evaluation_fields,
    train,
)
from numerics import derive_generator
from sampler import SamplerConfig, langevin_baseline

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
LANGEVIN_STEP = 0.1
MIN_MODE_SHARE = 0.02

MetricsFactory = Callable[[str], Optional[Callable[[Dict[str, Any]], None]]]


@dataclass(frozen=True)
class Reference:
    """A published estimate, optionally with its +/- half-width and the ground truth it was compared to."""

    value: float
    ci95: Optional[float] = None
    truth: Optional[float] = None


@dataclass(frozen=True)
class BenchmarkBudget:
    """Scale knobs; the defaults are the full-scale hyperparameters."""

    train_steps: int = 10000
    n_samples: int = 10000
    sample_steps: int = 1000
    log_z_paths: int = 1000
    log_z_steps: int = 1000
    spin_glass_d: int = 100
    spin_glass_betas: Sequence[float] = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0)
    langevin_steps: Sequence[int] = (10, 100, 1000, 10000)
    monitor_every: int = 250
    seed: int = 0

    def __post_init__(self) -> None:
        if self.train_steps < 0 or self.n_samples < 2 or self.sample_steps < 1 or self.monitor_every < 0:
            raise ConfigurationError(
                f"Invalid budget: train_steps={self.train_steps}, n_samples={self.n_samples}, "
                f"sample_steps={self.sample_steps}, monitor_every={self.monitor_every}"
            )


@dataclass(frozen=True)
class BenchmarkCase:
    label: str
    train: TrainConfig
    sampler: SamplerConfig
    references: Mapping[str, Reference] = field(default_factory=dict)
    langevin_steps: Optional[int] = None
    reuse_training: bool = False


# reference tables ------------------------------------------------------------

GMM_REFERENCES = {
    "log_z": Reference(-0.25, 0.02, truth=0.0),
    "mean_abs": Reference(6.04, 0.18, truth=7.19),
    "mean_sq": Reference(28.36, 1.05, truth=35.26),
}
DW10_REFERENCES = {
    "mean_abs": Reference(9.75, 0.04, truth=9.54),
    "mean_sq": Reference(13.32, 0.08, truth=12.51),
}
DW20_REFERENCES = {
    "mean_abs": Reference(22.59, 0.87, truth=20.42),
    "mean_sq": Reference(36.11, 2.88, truth=29.54),
}

# steps -> (LMC mean_abs, FIS mean_abs, LMC mean_sq, FIS mean_sq)
LANGEVIN_TABLE: Dict[str, Dict[int, tuple[float, float, float, float]]] = {
    "gmm": {
        10: (1.1, 5.5, 1.5, 25.2),
        100: (1.1, 5.9, 1.7, 28.0),
        1000: (1.6, 6.0, 4.4, 28.0),
        10000: (4.7, 6.0, 21.3, 28.4),
    },
    "dw10": {
        10: (8.1, 9.7, 9.9, 13.3),
        100: (9.0, 9.72, 11.42, 13.2),
        1000: (9.7, 9.5, 12.5, 13.3),
        10000: (9.7, 9.5, 12.5, 13.3),
    },
    "dw20": {
        10: (16.4, 22.0, 20.6, 22.15),
        100: (19.5, 22.2, 27.3, 34.6),
        1000: (20.5, 22.2, 29.6, 34.6),
        10000: (20.4, 22.1, 29.4, 34.5),
    },
}

ABLATION_DELTA = 5e-6
ABLATION_LAMBDA = 4e8
# (hyperparameter, multiplier or value) -> (log Z, mean_abs, mean_sq), each (value, ci95)
ABLATION_TABLE: Dict[tuple[str, float], tuple[tuple[float, float], ...]] = {
    ("delta", 0.1): ((-0.66, 0.10), (4.69, 0.39), (20.44, 2.26)),
    ("delta", 1.0): ((-0.25, 0.02), (6.05, 0.24), (28.42, 1.37)),
    ("delta", 10.0): ((-0.67, 0.19), (4.27, 0.71), (18.41, 3.93)),
    ("lambda", 0.1): ((-0.30, 0.02), (5.85, 0.17), (27.25, 0.97)),
    ("lambda", 1.0): ((-0.26, 0.01), (6.02, 0.21), (28.28, 1.18)),
    ("lambda", 10.0): ((-0.74, 0.16), (4.1, 0.55), (17.4, 3.05)),
    ("n_path", 30): ((-0.31, 0.04), (5.86, 0.31), (27.45, 1.77)),
    ("n_path", 60): ((-0.27, 0.02), (6.05, 0.22), (28.47, 1.22)),
    ("n_path", 100): ((-0.27, 0.03), (6.07, 0.20), (28.55, 1.17)),
}

DW10_PARAMS = {"d": 10, "w": 3, "delta": 2.0}
DW20_PARAMS = {"d": 20, "w": 5, "delta": 3.0}
FUNNEL_PARAMS = {"d": 10, "scale": 3.0}
CURVE_PRESETS = ("trig_full", "linear_full", "linear_half", "sine_half", "follmer_half")


# scenario builders -----------------------------------------------------------


def _train_config(budget: BenchmarkBudget, target_id: str, target_params: Mapping[str, Any], **overrides: Any) -> TrainConfig:
    settings: Dict[str, Any] = {"preset_id": "trig_full", "monitor_every": budget.monitor_every, **overrides}
    return TrainConfig(
        target_id=target_id,
        target_params=dict(target_params),
        steps=budget.train_steps,
        seed=budget.seed,
        **settings,
    )


def _sampler_config(budget: BenchmarkBudget, n_steps: Optional[int] = None) -> SamplerConfig:
    return SamplerConfig(n_samples=budget.n_samples, n_steps=n_steps or budget.sample_steps)


def _table2_case(budget: BenchmarkBudget, label: str, target_id: str, params: Mapping[str, Any], refs: Mapping[str, Reference]) -> List[BenchmarkCase]:
    return [BenchmarkCase(label, _train_config(budget, target_id, params), _sampler_config(budget), refs)]


def _langevin_cases(budget: BenchmarkBudget) -> List[BenchmarkCase]:
    problems = {"gmm": ("gmm", {}), "dw10": ("double_well", DW10_PARAMS), "dw20": ("double_well", DW20_PARAMS)}
    cases: List[BenchmarkCase] = []
    for name, (target_id, params) in problems.items():
        config = _train_config(budget, target_id, params)
        for index, steps in enumerate(budget.langevin_steps):
            row = LANGEVIN_TABLE[name].get(steps)
            refs = {}
            if row is not None:
                lmc_abs, fis_abs, lmc_sq, fis_sq = row
                refs = {
                    "mean_abs": Reference(fis_abs),
                    "mean_sq": Reference(fis_sq),
                    "langevin_mean_abs": Reference(lmc_abs),
                    "langevin_mean_sq": Reference(lmc_sq),
                }
            cases.append(
                BenchmarkCase(
                    f"{name}/steps={steps}",
                    config,
                    _sampler_config(budget, steps),
                    refs,
                    langevin_steps=steps,
                    reuse_training=index > 0,
                )
            )
    return cases


def _ablation_cases(budget: BenchmarkBudget) -> List[BenchmarkCase]:
    cases: List[BenchmarkCase] = []
    for (knob, setting), (log_z, mean_abs, mean_sq) in ABLATION_TABLE.items():
        if knob == "delta":
            overrides = {"delta": setting * ABLATION_DELTA, "lam": ABLATION_LAMBDA}
        elif knob == "lambda":
            overrides = {"lam": setting * ABLATION_LAMBDA}
        else:
            overrides = {"n_path": int(setting)}
        refs = {
            "log_z": Reference(*log_z, truth=0.0),
            "mean_abs": Reference(*mean_abs),
            "mean_sq": Reference(*mean_sq),
        }
        cases.append(BenchmarkCase(f"{knob}={setting:g}", _train_config(budget, "gmm", {}, **overrides), _sampler_config(budget), refs))
    return cases


def _spin_glass_cases(budget: BenchmarkBudget) -> List[BenchmarkCase]:
    d = budget.spin_glass_d
    cases = []
    for beta in budget.spin_glass_betas:
        refs = {
            "free_energy": Reference(predict_free_energy(beta, d, "printed")),
            "free_energy_quarter": Reference(predict_free_energy(beta, d, "quarter")),
        }
        config = _train_config(budget, "spin_glass", {"d": d, "beta": float(beta), "seed": budget.seed})
        cases.append(BenchmarkCase(f"beta={beta:g}", config, _sampler_config(budget), refs))
    return cases


def _funnel_curve_cases(budget: BenchmarkBudget) -> List[BenchmarkCase]:
    """log Z against training steps; the curve is the monitor trace of the single run."""
    return [BenchmarkCase("funnel", _train_config(budget, "funnel", FUNNEL_PARAMS), _sampler_config(budget))]


def _interpolant_cases(budget: BenchmarkBudget) -> List[BenchmarkCase]:
    """GMM moments against training steps for every preset driving the full pipeline."""
    return [
        BenchmarkCase(
            f"preset={preset_id}",
            _train_config(budget, "gmm", {}, preset_id=preset_id, pipeline="full"),
            _sampler_config(budget),
            {name: GMM_REFERENCES[name] for name in ("mean_abs", "mean_sq")},
        )
        for preset_id in CURVE_PRESETS
    ]


SCENARIOS: Dict[str, Callable[[BenchmarkBudget], List[BenchmarkCase]]] = {
    "gmm_table2": lambda b: _table2_case(b, "gmm", "gmm", {}, GMM_REFERENCES),
    "dw10_table2": lambda b: _table2_case(b, "dw10", "double_well", DW10_PARAMS, DW10_REFERENCES),
    "dw20_table2": lambda b: _table2_case(b, "dw20", "double_well", DW20_PARAMS, DW20_REFERENCES),
    "langevin_table5": _langevin_cases,
    "ablation_table6": _ablation_cases,
    "spinglass_curve": _spin_glass_cases,
    "funnel_logz_curve": _funnel_curve_cases,
    "interpolant_curves": _interpolant_cases,
}
SCENARIO_IDS = tuple(SCENARIOS)


def scenario_cases(name: str, budget: BenchmarkBudget) -> List[BenchmarkCase]:
    if name not in SCENARIOS:
        raise ConfigurationError(f"Unknown benchmark scenario '{name}' (expected one of {', '.join(SCENARIO_IDS)})")
    return SCENARIOS[name](budget)


# running ---------------------------------------------------------------------


def _compare(estimate: EstimateRecord, reference: Optional[Reference]) -> Dict[str, Any]:
    row: Dict[str, Any] = {"value": estimate.value, "ci95": estimate.ci95, "n": estimate.n}
    if reference is not None:
        row["reference"] = dataclasses.asdict(reference)
        row["deviation"] = estimate.value - reference.value
    return row


def _ema_fields(result: TrainResult) -> FieldPair:
    nets = {name: state.net for name, state in result.states.items()}
    return evaluation_fields(result.problem, nets, {name: state.ema_theta for name, state in result.states.items()})


def _truth(problem: Problem) -> Dict[str, float]:
    truth = dict(problem.target.true_moments or {})
    if problem.target.true_log_z is not None:
        truth["log_z"] = problem.target.true_log_z
    return truth


def _evaluate(
    case: BenchmarkCase, index: int, result: TrainResult, budget: BenchmarkBudget
) -> Dict[str, Any]:
    problem = result.problem
    fields = _ema_fields(result)
    meta = {"case": case.label}
    row: Dict[str, Any] = {"label": case.label, "truth": _truth(problem), "estimates": {}}

    batch = draw_samples(problem, fields, case.sampler, derive_generator(budget.seed, "sample", index))
    for name, record in empirical_moments(batch.finite, meta).items():
        row["estimates"][name] = _compare(record, case.references.get(name))
    row["failed_trajectories"] = int(batch.failed.sum())

    means = problem.target.component_means
    if means is not None and means.shape[1] == problem.target.d:
        shares = mode_coverage(batch.finite, means)
        row["mode_coverage"] = {
            "shares": shares.tolist(),
            "covered": int((shares >= MIN_MODE_SHARE).sum()),
            "components": int(means.shape[0]),
        }

    if case.langevin_steps is None:
        log_z = estimate_log_z(
            problem,
            fields,
            budget.log_z_paths,
            budget.log_z_steps,
            derive_generator(budget.seed, "estimate", index),
            meta,
        )
        row["estimates"]["log_z"] = _compare(log_z, case.references.get("log_z"))
        if problem.target.target_id == "spin_glass":
            # free energy per dimension relative to the standard Gaussian normalization
            d = problem.target.d
            scaled = dataclasses.replace(log_z, value=(log_z.value - 0.5 * d * LOG_2PI) / d, ci95=log_z.ci95 / d)
            row["estimates"]["free_energy"] = _compare(scaled, case.references.get("free_energy"))
            row["estimates"]["free_energy_quarter"] = _compare(scaled, case.references.get("free_energy_quarter"))
    else:
        lmc = langevin_baseline(
            problem.target,
            LANGEVIN_STEP,
            case.langevin_steps,
            budget.n_samples,
            derive_generator(budget.seed, "langevin", index),
        )
        for name, record in empirical_moments(lmc.finite, {**meta, "sampler": "langevin"}).items():
            row["estimates"][f"langevin_{name}"] = _compare(record, case.references.get(f"langevin_{name}"))
    return row


def run_scenario(
    name: str,
    budget: BenchmarkBudget = BenchmarkBudget(),
    metrics_factory: Optional[MetricsFactory] = None,
) -> Dict[str, Any]:
    """Run every case of ``name`` and return the comparison report.

    A case that fails numerically is reported with its error and the scenario
    carries on with the next case.
    """
    cases = scenario_cases(name, budget)
    logger.info("Benchmark %s: %d cases, %d training steps each", name, len(cases), budget.train_steps)
    rows: List[Dict[str, Any]] = []
    result: Optional[TrainResult] = None
    for index, case in enumerate(cases):
        logger.info("Case %d/%d: %s", index + 1, len(cases), case.label)
        try:
            if result is None or not case.reuse_training:
                result = None
                metrics = metrics_factory(case.label) if metrics_factory else None
                result = train(case.train, metrics=metrics)
            row = _evaluate(case, index, result, budget)
            row["train"] = {
                "aborted_steps": result.aborted_steps,
                "final_loss": result.loss_trace[-1] if result.loss_trace else None,
                "final_monitored_log_z": result.final_log_z,
                "monitor_trace": list(result.monitor_trace),
            }
        except NumericalFailureError as exc:
            logger.warning("Case %s failed: %s", case.label, exc)
            row = {"label": case.label, "error": f"{type(exc).__name__}: {exc}"}
        rows.append(row)
    return {
        "scenario": name,
        "budget": dataclasses.asdict(budget),
        "cases": rows,
    }
