"""Interpolant schedules and the PDE/SDE coefficients derived from them.

An interpolant ``x_t = g(t) x* + r(t) z`` is described by the scalar functions
g, r and their derivatives. The u-PDE (segment [0, T'] or [0, T]) is rescaled
by beta, the v-PDE (segment [T', T]) by alpha. Coefficients are written in
closed form per scaling so that nothing evaluates 0/0 at t = 0.

All functions take time as a float or a float64 tensor of shape [B] and
states as tensors of shape [B, d].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Optional

import torch

from errors import (
    ConfigurationError,
    DomainError,
    KindMismatchError,
    ScheduleViolationError,
    SingularReferenceError,
)
from numerics import DTYPE, TimeLike

FOLLMER_OFFSET = 0.05
NEGATIVE_TOLERANCE = 1e-12
CLAMP_FRACTION = 1e-4

ScalarFn = Callable[[torch.Tensor], torch.Tensor]


class ScheduleKind(str, Enum):
    HALF = "half"
    FULL = "full"


@dataclass(frozen=True)
class InterpolantSchedule:
    preset_id: str
    kind: ScheduleKind
    T: float
    T_split: Optional[float]
    g: ScalarFn
    g_dot: ScalarFn
    r: ScalarFn
    r_dot: ScalarFn
    family: Optional[ScheduleKind] = None

    @property
    def function_kind(self) -> ScheduleKind:
        """Kind of the g, r pair itself; ``kind`` is the pipeline it drives."""
        return self.family or self.kind

    @property
    def eta(self) -> float:
        return self.T * CLAMP_FRACTION

    @property
    def u_end(self) -> float:
        """End of the segment solved by u."""
        return self.T if self.kind is ScheduleKind.HALF else float(self.T_split)


@dataclass(frozen=True)
class ScalingFunctions:
    """Rescaling of the two HJB PDEs.

    beta_id: ``r_over_g`` (default, beta = r/g) or ``one``.
    alpha_id: ``one`` (default) or ``g``.
    """

    beta_id: str = "r_over_g"
    alpha_id: str = "one"

    def __post_init__(self) -> None:
        if self.beta_id not in {"r_over_g", "one"}:
            raise ConfigurationError(f"Unknown beta scaling '{self.beta_id}'")
        if self.alpha_id not in {"one", "g"}:
            raise ConfigurationError(f"Unknown alpha scaling '{self.alpha_id}'")

    def beta(self, s: InterpolantSchedule, t: TimeLike) -> torch.Tensor:
        t = _time(t)
        if self.beta_id == "r_over_g":
            return s.r(t) / s.g(t)
        return torch.ones_like(t)

    def inv_beta(self, s: InterpolantSchedule, t: TimeLike) -> torch.Tensor:
        """1/beta, finite at t = 0 for the default scaling."""
        t = _time(t)
        if self.beta_id == "r_over_g":
            return s.g(t) / s.r(t)
        return torch.ones_like(t)

    def alpha(self, s: InterpolantSchedule, t: TimeLike) -> torch.Tensor:
        t = _time(t)
        if self.alpha_id == "g":
            return s.g(t)
        return torch.ones_like(t)


def _time(t: TimeLike) -> torch.Tensor:
    return torch.as_tensor(t, dtype=DTYPE)


def _col(values: torch.Tensor) -> torch.Tensor:
    return values.unsqueeze(-1) if values.dim() > 0 else values


def _trig_full(T: float) -> Dict[str, ScalarFn]:
    w = math.pi / (2.0 * T)
    return {
        "g": lambda t: torch.sin(w * t),
        "g_dot": lambda t: w * torch.cos(w * t),
        "r": lambda t: torch.cos(w * t),
        "r_dot": lambda t: -w * torch.sin(w * t),
    }


def _linear_full(T: float) -> Dict[str, ScalarFn]:
    return {
        "g": lambda t: t / T,
        "g_dot": lambda t: torch.full_like(t, 1.0 / T),
        "r": lambda t: 1.0 - t / T,
        "r_dot": lambda t: torch.full_like(t, -1.0 / T),
    }


def _linear_half(T: float) -> Dict[str, ScalarFn]:
    return {
        "g": lambda t: t / T,
        "g_dot": lambda t: torch.full_like(t, 1.0 / T),
        "r": lambda t: torch.ones_like(t),
        "r_dot": lambda t: torch.zeros_like(t),
    }


def _sine_half(T: float) -> Dict[str, ScalarFn]:
    w = math.pi / (2.0 * T)
    return {
        "g": lambda t: torch.sin(w * t),
        "g_dot": lambda t: w * torch.cos(w * t),
        "r": lambda t: torch.ones_like(t),
        "r_dot": lambda t: torch.zeros_like(t),
    }


def _follmer_half(T: float) -> Dict[str, ScalarFn]:
    c0 = FOLLMER_OFFSET
    return {
        "g": lambda t: t / T,
        "g_dot": lambda t: torch.full_like(t, 1.0 / T),
        "r": lambda t: torch.sqrt(t / T + c0),
        "r_dot": lambda t: 0.5 / (T * torch.sqrt(t / T + c0)),
    }


PRESETS: Dict[str, tuple[ScheduleKind, Callable[[float], Dict[str, ScalarFn]]]] = {
    "trig_full": (ScheduleKind.FULL, _trig_full),
    "linear_full": (ScheduleKind.FULL, _linear_full),
    "linear_half": (ScheduleKind.HALF, _linear_half),
    "sine_half": (ScheduleKind.HALF, _sine_half),
    "follmer_half": (ScheduleKind.HALF, _follmer_half),
}


def make_schedule(
    preset_id: str, T: float = 1.0, T_split: Optional[float] = 0.5, pipeline: Optional[str] = None
) -> InterpolantSchedule:
    """Build a preset.

    ``pipeline`` overrides the preset's own kind. Half functions may drive the
    two-segment (full) pipeline; full functions cannot drive the half one since r(T) = 0.
    """
    if preset_id not in PRESETS:
        raise ConfigurationError(
            f"Unknown schedule preset '{preset_id}' (expected one of {', '.join(sorted(PRESETS))})"
        )
    if not T > 0:
        raise ConfigurationError(f"Time horizon must be positive, got T={T}")
    family, builder = PRESETS[preset_id]
    kind = family if pipeline is None else _pipeline_kind(pipeline)
    if kind is ScheduleKind.HALF and family is ScheduleKind.FULL:
        raise KindMismatchError(f"Preset '{preset_id}' has r(T) = 0 and cannot drive the half pipeline")
    split: Optional[float] = None
    if kind is ScheduleKind.FULL:
        if T_split is None or not 0.0 < T_split < T:
            raise ConfigurationError(
                f"The full pipeline with preset '{preset_id}' needs 0 < T_split < T, got {T_split}"
            )
        split = float(T_split)
    return InterpolantSchedule(
        preset_id=preset_id, kind=kind, T=float(T), T_split=split, family=family, **builder(float(T))
    )


def _pipeline_kind(pipeline: str) -> ScheduleKind:
    try:
        return ScheduleKind(pipeline)
    except ValueError:
        raise ConfigurationError(f"Unknown pipeline '{pipeline}' (expected 'half' or 'full')") from None


def require_kind(s: InterpolantSchedule, kind: ScheduleKind) -> None:
    if s.kind is not kind:
        raise KindMismatchError(
            f"Schedule '{s.preset_id}' is a {s.kind.value} interpolant, a {kind.value} one is required"
        )


def log_ratio_rate(s: InterpolantSchedule, t: TimeLike) -> torch.Tensor:
    """d/dt log(g/r) = g_dot/g - r_dot/r (infinite at t = 0)."""
    t = _time(t)
    return s.g_dot(t) / s.g(t) - s.r_dot(t) / s.r(t)


def _check_non_negative(values: torch.Tensor, name: str, s: InterpolantSchedule) -> torch.Tensor:
    if bool((values < -NEGATIVE_TOLERANCE).any()):
        raise ScheduleViolationError(
            f"{name} went negative for schedule '{s.preset_id}' (min {float(values.min()):.3e}); g/r must be non-decreasing"
        )
    return values.clamp_min(0.0)


def clamp_v_time(s: InterpolantSchedule, t: TimeLike) -> torch.Tensor:
    t = _time(t)
    if bool((t > s.T * (1.0 + 1e-12)).any()):
        raise DomainError(f"Time {float(t.max())} exceeds the horizon T={s.T}")
    if s.function_kind is ScheduleKind.HALF:
        # r(T) > 0, nothing to guard at the horizon
        return t
    return t.clamp(max=s.T - s.eta)


# u segment -----------------------------------------------------------------


def sigma_sq_u(s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike) -> torch.Tensor:
    """Diffusion coefficient 2 (r/beta)^2 (g_dot/g - r_dot/r) of the u-PDE."""
    t = _time(t)
    g, g_dot, r, r_dot = s.g(t), s.g_dot(t), s.r(t), s.r_dot(t)
    if sc.beta_id == "r_over_g":
        value = 2.0 * (g * g_dot - g * g * r_dot / r)
    else:
        value = 2.0 * (r * r * g_dot / g - r * r_dot)
    return _check_non_negative(value, "sigma^2", s)


def mu_u_rate(s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike) -> torch.Tensor:
    """Scalar c(t) with mu(t, x) = c(t) x, c = -d/dt log(beta g / r^2)."""
    t = _time(t)
    ratio = s.r_dot(t) / s.r(t)
    if sc.beta_id == "r_over_g":
        return ratio
    return 2.0 * ratio - s.g_dot(t) / s.g(t)


def mu_u(s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike, x: torch.Tensor) -> torch.Tensor:
    return _col(mu_u_rate(s, sc, t)) * x


def u_drift_gain(s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike) -> torch.Tensor:
    """(r^2/beta)(g_dot/g - r_dot/r), the weight of grad u in the drift b."""
    t = _time(t)
    g, g_dot, r, r_dot = s.g(t), s.g_dot(t), s.r(t), s.r_dot(t)
    if sc.beta_id == "r_over_g":
        return r * g_dot - g * r_dot
    return r * r * g_dot / g - r * r_dot


def drift_b_from_grad_u(
    s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike, x: torch.Tensor, grad_u_at: torch.Tensor
) -> torch.Tensor:
    """Drift b(t, x) given grad u evaluated at (t, x/beta(t))."""
    t = _time(t)
    return _col(s.r_dot(t) / s.r(t)) * x + _col(u_drift_gain(s, sc, t)) * grad_u_at


def score_s_from_grad_u(
    s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike, x: torch.Tensor, grad_u_at: torch.Tensor
) -> torch.Tensor:
    t = _time(t)
    r = s.r(t)
    return _col(sc.inv_beta(s, t)) * grad_u_at - x / _col(r * r)


# v segment -----------------------------------------------------------------


def sigma_sq_v(s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike) -> torch.Tensor:
    """Diffusion coefficient 2 (r/alpha)^2 (g_dot/g - r_dot/r) of the v-PDE."""
    t = clamp_v_time(s, t)
    g, g_dot, r, r_dot = s.g(t), s.g_dot(t), s.r(t), s.r_dot(t)
    value = 2.0 * (r * r * g_dot / g - r * r_dot)
    if sc.alpha_id == "g":
        value = value / (g * g)
    return _check_non_negative(value, "sigma_bar^2", s)


def mu_v_rate(s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike) -> torch.Tensor:
    """Scalar c(t) with mu_bar(t, x) = c(t) x, c = d/dt log(g/alpha)."""
    t = clamp_v_time(s, t)
    if sc.alpha_id == "g":
        return torch.zeros_like(t)
    return s.g_dot(t) / s.g(t)


def mu_v(s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike, x: torch.Tensor) -> torch.Tensor:
    return _col(mu_v_rate(s, sc, t)) * x


def v_drift_gain(s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike) -> torch.Tensor:
    """(r/alpha)((g_dot/g) r - r_dot), the weight of grad v in the drift b."""
    t = clamp_v_time(s, t)
    g, g_dot, r, r_dot = s.g(t), s.g_dot(t), s.r(t), s.r_dot(t)
    return r / sc.alpha(s, t) * (g_dot / g * r - r_dot)


def drift_b_from_grad_v(
    s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike, x: torch.Tensor, grad_v_at: torch.Tensor
) -> torch.Tensor:
    """Drift b(t, x) given grad v evaluated at (t, x/alpha(t))."""
    t = clamp_v_time(s, t)
    return _col(s.g_dot(t) / s.g(t)) * x + _col(v_drift_gain(s, sc, t)) * grad_v_at


def score_s_from_grad_v(
    s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike, x: torch.Tensor, grad_v_at: torch.Tensor
) -> torch.Tensor:
    t = clamp_v_time(s, t)
    return grad_v_at / _col(sc.alpha(s, t))


# reference density ---------------------------------------------------------


def log_psi(s: InterpolantSchedule, t: TimeLike, x: torch.Tensor) -> torch.Tensor:
    """Log-density of N(0, r(t)^2 I) at x; returns shape [B]."""
    r = s.r(_time(t))
    if bool((r <= 0).any()):
        raise SingularReferenceError(f"r(t)=0 for schedule '{s.preset_id}'; the Gaussian reference is degenerate")
    d = x.shape[-1]
    r_sq = r * r
    return -0.5 * d * torch.log(2.0 * math.pi * r_sq) - 0.5 * (x * x).sum(dim=-1) / r_sq
