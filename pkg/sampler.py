"""Euler-Maruyama sampling with the learned drift/score and the Langevin baseline.

Trajectories that go non-finite are flagged and dropped from later steps
instead of aborting the whole run.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch

from errors import ConfigurationError, SamplingFailureError
from numerics import DTYPE, ScalarField, as_time, standard_normal
from schedules import (
    InterpolantSchedule,
    ScalingFunctions,
    ScheduleKind,
    drift_b_from_grad_u,
    drift_b_from_grad_v,
    require_kind,
    score_s_from_grad_u,
    score_s_from_grad_v,
)
from targets import TargetDensity

logger = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.01

DriftAndScore = Callable[[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class SamplerConfig:
    n_samples: int = 10000
    n_steps: int = 1000
    eps: float = 1.0
    mode: str = "sde"
    use_ema: bool = True
    max_failure_fraction: float = MAX_FAILURE_FRACTION

    def __post_init__(self) -> None:
        if self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.n_samples < 1:
            raise ConfigurationError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.eps < 0:
            raise ConfigurationError(f"eps must be >= 0, got {self.eps}")
        if self.mode not in {"sde", "ode"}:
            raise ConfigurationError(f"Unknown sampling mode '{self.mode}' (expected 'sde' or 'ode')")


@dataclass
class SampleBatch:
    samples: torch.Tensor
    failed: torch.Tensor

    @property
    def finite(self) -> torch.Tensor:
        return self.samples[~self.failed]

    @property
    def failure_fraction(self) -> float:
        return float(self.failed.to(DTYPE).mean()) if self.failed.numel() else 0.0


def _check_failures(batch: SampleBatch, limit: float, label: str) -> SampleBatch:
    failures = int(batch.failed.sum())
    if failures:
        logger.warning("%s: %d of %d trajectories went non-finite", label, failures, batch.failed.numel())
    if failures > limit * batch.failed.numel():
        raise SamplingFailureError(f"{label}: {failures} of {batch.failed.numel()} trajectories went non-finite")
    return batch


def _integrate(
    S: torch.Tensor,
    T: float,
    cfg: SamplerConfig,
    drift_and_score: DriftAndScore,
    generator: torch.Generator,
    label: str,
) -> SampleBatch:
    """S <- S + (b + eps^2 s / 2) dt + eps sqrt(dt) w on a uniform grid; ode mode drops s and w."""
    n = S.shape[0]
    dt = T / cfg.n_steps
    root_dt = math.sqrt(dt)
    stochastic = cfg.mode == "sde" and cfg.eps > 0
    failed = torch.zeros(n, dtype=torch.bool)
    for i in range(cfg.n_steps):
        # noise is drawn for every trajectory so draws do not depend on failures
        w = standard_normal(S.shape, generator) if stochastic else None
        alive = ~failed
        S_alive = S[alive]
        drift, score = drift_and_score(as_time(i * dt, S_alive.shape[0]), S_alive)
        if cfg.mode == "sde":
            drift = drift + 0.5 * cfg.eps * cfg.eps * score
        S_next = S_alive + drift * dt
        if stochastic:
            S_next = S_next + cfg.eps * root_dt * w[alive]
        S = S.clone()
        S[alive] = S_next
        failed = failed | ~torch.isfinite(S).all(dim=1)
    return _check_failures(SampleBatch(samples=S, failed=failed), cfg.max_failure_fraction, label)


def _u_branch(u_field: ScalarField, s: InterpolantSchedule, sc: ScalingFunctions) -> DriftAndScore:
    def drift_and_score(t: torch.Tensor, S: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        grad = u_field.grad_x(t, S * sc.inv_beta(s, t).unsqueeze(1), check_finite=False)
        return drift_b_from_grad_u(s, sc, t, S, grad), score_s_from_grad_u(s, sc, t, S, grad)

    return drift_and_score


def _v_branch(v_field: ScalarField, s: InterpolantSchedule, sc: ScalingFunctions) -> DriftAndScore:
    def drift_and_score(t: torch.Tensor, S: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        grad = v_field.grad_x(t, S / sc.alpha(s, t).unsqueeze(1), check_finite=False)
        return drift_b_from_grad_v(s, sc, t, S, grad), score_s_from_grad_v(s, sc, t, S, grad)

    return drift_and_score


def _initial_states(s: InterpolantSchedule, n: int, d: int, generator: torch.Generator) -> torch.Tensor:
    r0 = float(s.r(torch.as_tensor(0.0, dtype=DTYPE)))
    return r0 * standard_normal((n, d), generator)


def sample_half(
    u_field: ScalarField,
    s: InterpolantSchedule,
    sc: ScalingFunctions,
    cfg: SamplerConfig,
    generator: torch.Generator,
) -> SampleBatch:
    require_kind(s, ScheduleKind.HALF)
    S0 = _initial_states(s, cfg.n_samples, u_field.d, generator)
    return _integrate(S0, s.T, cfg, _u_branch(u_field, s, sc), generator, "sample_half")


def sample_full(
    u_field: ScalarField,
    v_field: ScalarField,
    s: InterpolantSchedule,
    sc: ScalingFunctions,
    cfg: SamplerConfig,
    generator: torch.Generator,
) -> SampleBatch:
    """grad u drives t <= T', grad v the rest; coefficients are clamped at T - eta."""
    require_kind(s, ScheduleKind.FULL)
    split = float(s.T_split)
    u_branch = _u_branch(u_field, s, sc)
    v_branch = _v_branch(v_field, s, sc)

    def drift_and_score(t: torch.Tensor, S: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # the grid is uniform, so every trajectory shares t
        if t.numel() == 0 or float(t[0]) <= split:
            return u_branch(t, S)
        return v_branch(t, S)

    S0 = _initial_states(s, cfg.n_samples, u_field.d, generator)
    return _integrate(S0, s.T, cfg, drift_and_score, generator, "sample_full")


def sample_ode(
    u_field: ScalarField,
    v_field: Optional[ScalarField],
    s: InterpolantSchedule,
    sc: ScalingFunctions,
    cfg: SamplerConfig,
    generator: torch.Generator,
) -> SampleBatch:
    """Probability-flow ODE dS = b dt from a random start."""
    ode_cfg = SamplerConfig(
        n_samples=cfg.n_samples,
        n_steps=cfg.n_steps,
        eps=0.0,
        mode="ode",
        use_ema=cfg.use_ema,
        max_failure_fraction=cfg.max_failure_fraction,
    )
    if s.kind is ScheduleKind.HALF:
        return sample_half(u_field, s, sc, ode_cfg, generator)
    if v_field is None:
        raise ConfigurationError("Full-interpolant ODE sampling needs a v field")
    return sample_full(u_field, v_field, s, sc, ode_cfg, generator)


def langevin_baseline(
    target: TargetDensity,
    step_size: float,
    n_steps: int,
    n_samples: int,
    generator: torch.Generator,
    max_failure_fraction: float = MAX_FAILURE_FRACTION,
) -> SampleBatch:
    """Unadjusted Langevin chain S <- S + step grad log pi(S) + sqrt(2 step) w from N(0, I)."""
    if step_size <= 0:
        raise ConfigurationError(f"Langevin step size must be positive, got {step_size}")
    if n_steps < 0 or n_samples < 1:
        raise ConfigurationError(f"Need n_steps >= 0 and n_samples >= 1, got {n_steps}, {n_samples}")
    S = standard_normal((n_samples, target.d), generator)
    failed = torch.zeros(n_samples, dtype=torch.bool)
    noise_scale = math.sqrt(2.0 * step_size)
    with torch.no_grad():
        for _ in range(n_steps):
            w = standard_normal(S.shape, generator)
            alive = ~failed
            S_alive = S[alive]
            S = S.clone()
            S[alive] = S_alive + step_size * target.grad_log_pi_hat(S_alive) + noise_scale * w[alive]
            failed = failed | ~torch.isfinite(S).all(dim=1)
    batch = SampleBatch(samples=S, failed=failed)
    return _check_failures(batch, max_failure_fraction, "langevin")
