"""log Z estimators, sample functionals and the spin-glass free-energy prediction."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

import torch

from errors import ConfigurationError, EstimatorError
from numerics import DTYPE, ScalarField, as_time, standard_normal
from schedules import (
    InterpolantSchedule,
    ScalingFunctions,
    ScheduleKind,
    log_psi,
    mu_u,
    mu_v,
    require_kind,
    sigma_sq_u,
    sigma_sq_v,
)
from targets import TargetDensity

logger = logging.getLogger(__name__)

Z_95 = 1.96
MAX_EXCLUDED_FRACTION = 0.01


@dataclass(frozen=True)
class EstimateRecord:
    name: str
    value: float
    ci95: float
    n: int
    meta: Dict[str, Any] = field(default_factory=dict)
    excluded: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def summarize(name: str, values: torch.Tensor, meta: Optional[Dict[str, Any]] = None, excluded: int = 0) -> EstimateRecord:
    """Mean with a 1.96 sd / sqrt(n) half-width."""
    values = values.to(DTYPE).reshape(-1)
    n = values.numel()
    if n == 0:
        raise EstimatorError(f"No finite values left to estimate {name}")
    sd = float(values.std(unbiased=True)) if n > 1 else float("nan")
    return EstimateRecord(
        name=name,
        value=float(values.mean()),
        ci95=Z_95 * sd / math.sqrt(n),
        n=n,
        meta=dict(meta or {}),
        excluded=excluded,
    )


def _require_collapsing_scaling(sc: ScalingFunctions) -> None:
    # paths start at X0 = 0, where u(0, .) vanishes only if beta(0) = 0
    if sc.beta_id != "r_over_g":
        raise ConfigurationError(f"log Z estimation needs the r_over_g scaling, got beta='{sc.beta_id}'")


def _finite_paths(values: torch.Tensor, name: str, max_excluded: float) -> tuple[torch.Tensor, int]:
    keep = torch.isfinite(values)
    excluded = int((~keep).sum())
    if excluded:
        logger.warning("%s: excluded %d of %d non-finite paths", name, excluded, values.numel())
    if excluded > max_excluded * values.numel():
        raise EstimatorError(f"{name}: {excluded} of {values.numel()} paths were non-finite")
    return values[keep], excluded


def _controlled_segment(
    field_: ScalarField,
    sigma_sq,
    drift,
    start: float,
    end: float,
    n_steps: int,
    X: torch.Tensor,
    generator: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Euler-Maruyama for dX = (sigma^2 grad m + mu) dt + sigma dW.

    Returns the final state and A = sum 1/2 sigma^2 |grad m|^2 dt + sigma grad m . dW,
    with the integrands evaluated at the left point.
    """
    n = X.shape[0]
    dt = (end - start) / n_steps
    sqrt_dt = math.sqrt(dt)
    accumulated = torch.zeros(n, dtype=DTYPE)
    for i in range(n_steps):
        t = as_time(start + i * dt, n)
        grad = field_.grad_x(t, X, check_finite=False)
        sig_sq = sigma_sq(t)
        sig = torch.sqrt(sig_sq)
        w = standard_normal(X.shape, generator)
        accumulated = accumulated + 0.5 * sig_sq * (grad * grad).sum(dim=1) * dt + sig * (grad * w).sum(dim=1) * sqrt_dt
        X = X + (sig_sq.unsqueeze(1) * grad + drift(t, X)) * dt + sig.unsqueeze(1) * sqrt_dt * w
    return X, accumulated


def estimate_log_z_half(
    u_field: ScalarField,
    s: InterpolantSchedule,
    sc: ScalingFunctions,
    target: TargetDensity,
    n_paths: int,
    n_steps: int,
    generator: torch.Generator,
    meta: Optional[Dict[str, Any]] = None,
    max_excluded: float = MAX_EXCLUDED_FRACTION,
) -> EstimateRecord:
    require_kind(s, ScheduleKind.HALF)
    _require_collapsing_scaling(sc)
    if n_paths < 2 or n_steps < 1:
        raise ConfigurationError(f"Need n_paths >= 2 and n_steps >= 1, got {n_paths}, {n_steps}")
    X0 = torch.zeros((n_paths, target.d), dtype=DTYPE)
    X, accumulated = _controlled_segment(
        u_field,
        lambda t: sigma_sq_u(s, sc, t),
        lambda t, x: mu_u(s, sc, t, x),
        0.0,
        s.T,
        n_steps,
        X0,
        generator,
    )
    y = float(sc.beta(s, s.T)) * X
    with torch.no_grad():
        values = -accumulated + target.log_pi_hat(y) - log_psi(s, s.T, y)
    kept, excluded = _finite_paths(values, "log Z (half)", max_excluded)
    return summarize("log_z", kept, {"target_id": target.target_id, **(meta or {})}, excluded)


def estimate_log_z_full(
    u_field: ScalarField,
    v_field: ScalarField,
    s: InterpolantSchedule,
    sc: ScalingFunctions,
    target: TargetDensity,
    n_paths: int,
    n_steps: int,
    generator: torch.Generator,
    meta: Optional[Dict[str, Any]] = None,
    max_excluded: float = MAX_EXCLUDED_FRACTION,
) -> EstimateRecord:
    """Two controlled segments bridged at T' by the interface identity for u and v.

    log Z = E[-A1 - A2 + log pi_hat(alpha(T) X'_T) + d log g(T)
              - log psi(T', beta(T') X_T') - d log g(T')]
    with X' = beta(T') X_T' / alpha(T') starting the second segment.
    """
    require_kind(s, ScheduleKind.FULL)
    _require_collapsing_scaling(sc)
    if n_paths < 2 or n_steps < 2:
        raise ConfigurationError(f"Need n_paths >= 2 and n_steps >= 2, got {n_paths}, {n_steps}")
    split = float(s.T_split)
    n_first = min(math.ceil(n_steps * split / s.T), n_steps - 1)
    d = target.d

    X0 = torch.zeros((n_paths, d), dtype=DTYPE)
    X_split, first = _controlled_segment(
        u_field,
        lambda t: sigma_sq_u(s, sc, t),
        lambda t, x: mu_u(s, sc, t, x),
        0.0,
        split,
        n_first,
        X0,
        generator,
    )
    b_split = float(sc.beta(s, split))
    a_split = float(sc.alpha(s, split))
    X_end, second = _controlled_segment(
        v_field,
        lambda t: sigma_sq_v(s, sc, t),
        lambda t, x: mu_v(s, sc, t, x),
        split,
        s.T,
        n_steps - n_first,
        b_split * X_split / a_split,
        generator,
    )
    T_t = torch.as_tensor(s.T, dtype=DTYPE)
    split_t = torch.as_tensor(split, dtype=DTYPE)
    a_end = float(sc.alpha(s, s.T))
    with torch.no_grad():
        values = (
            -first
            - second
            + target.log_pi_hat(a_end * X_end)
            + d * torch.log(s.g(T_t))
            - log_psi(s, split, b_split * X_split)
            - d * torch.log(s.g(split_t))
        )
    kept, excluded = _finite_paths(values, "log Z (full)", max_excluded)
    return summarize("log_z", kept, {"target_id": target.target_id, **(meta or {})}, excluded)


def empirical_moments(samples: torch.Tensor, meta: Optional[Dict[str, Any]] = None) -> Dict[str, EstimateRecord]:
    if samples.dim() != 2 or samples.shape[0] < 2:
        raise ConfigurationError(f"Need a [n >= 2, d] sample matrix, got shape {tuple(samples.shape)}")
    samples = samples.to(DTYPE)
    return {
        "mean_abs": summarize("mean_abs", samples.abs().sum(dim=1), meta),
        "mean_sq": summarize("mean_sq", (samples * samples).sum(dim=1), meta),
    }


def mode_coverage(samples: torch.Tensor, means: torch.Tensor) -> torch.Tensor:
    """Fraction of samples whose nearest mixture mean is each component."""
    nearest = torch.cdist(samples.to(DTYPE), means.to(DTYPE)).argmin(dim=1)
    counts = torch.bincount(nearest, minlength=means.shape[0]).to(DTYPE)
    return counts / max(samples.shape[0], 1)


def predict_free_energy(beta: float, d: int, variant: str = "printed") -> float:
    """Large-d prediction of E log Z / d for the soft spherical spin glass.

    ``variant="quarter"`` replaces the trailing /d by /4.
    """
    if beta < 0:
        raise ConfigurationError(f"beta must be non-negative, got {beta}")
    if variant not in {"printed", "quarter"}:
        raise ConfigurationError(f"Unknown free-energy variant '{variant}'")
    if beta < 1.0:
        return 0.0
    q = (beta - 1.0) / (beta * beta)
    last = beta * beta * q * q / (d if variant == "printed" else 4.0)
    return -0.5 * math.log(beta) + 0.5 * beta * q + last
