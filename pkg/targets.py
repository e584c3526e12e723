"""Target densities, their ground-truth functionals and the PDE terminal conditions.

Densities act on batches: ``log_pi_hat`` maps [B, d] to [B] and
``grad_log_pi_hat`` maps [B, d] to [B, d].
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Any, Callable, Dict, Optional

import numpy as np
import torch
from scipy import integrate, stats

from errors import ConfigurationError
from numerics import DTYPE, ScalarField, as_time
from schedules import InterpolantSchedule, ScalingFunctions, ScheduleKind, log_psi, require_kind

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

Density = Callable[[torch.Tensor], torch.Tensor]
ExactSampler = Callable[[int, torch.Generator], torch.Tensor]


@dataclass(frozen=True)
class TargetDensity:
    target_id: str
    d: int
    log_pi_hat: Density
    grad_log_pi_hat: Density
    true_log_z: Optional[float] = None
    exact_sampler: Optional[ExactSampler] = None
    true_moments: Optional[Dict[str, float]] = None
    params: Dict[str, Any] = field(default_factory=dict)
    component_means: Optional[torch.Tensor] = None


class TerminalSegment(str, Enum):
    U_HALF = "u_half"
    U_FULL_AT_SPLIT = "u_full_at_Tsplit"
    V_FULL_AT_T = "v_full_at_T"


@dataclass(frozen=True)
class TerminalCondition:
    """phi and its exact gradient.

    ``grad_phi(x, create_graph=False)`` only uses the flag when phi itself
    depends on trainable parameters (the u terminal condition at T').
    """

    phi: Density
    grad_phi: Callable[..., torch.Tensor]
    segment: TerminalSegment


# mixtures ------------------------------------------------------------------


def _folded_normal_mean(mean: np.ndarray, scale: float) -> np.ndarray:
    """E|m + scale * z| for z ~ N(0, 1)."""
    return scale * math.sqrt(2.0 / math.pi) * np.exp(-(mean**2) / (2.0 * scale**2)) + mean * (
        1.0 - 2.0 * stats.norm.cdf(-mean / scale)
    )


def _isotropic_mixture(target_id: str, means: torch.Tensor, var: float, params: Dict[str, Any]) -> TargetDensity:
    K, d = means.shape
    log_norm = -math.log(K) - 0.5 * d * math.log(2.0 * math.pi * var)

    def component_logits(x: torch.Tensor) -> torch.Tensor:
        sq = ((x.unsqueeze(1) - means.unsqueeze(0)) ** 2).sum(dim=-1)
        return log_norm - sq / (2.0 * var)

    def log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        return torch.logsumexp(component_logits(x), dim=1)

    def grad_log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        weights = torch.softmax(component_logits(x), dim=1)
        return (weights @ means - x) / var

    def exact_sampler(n: int, generator: torch.Generator) -> torch.Tensor:
        picks = torch.randint(K, (n,), generator=generator)
        return means[picks] + math.sqrt(var) * torch.randn((n, d), generator=generator, dtype=DTYPE)

    mu = means.numpy()
    moments = {
        "mean_abs": float(_folded_normal_mean(mu, math.sqrt(var)).sum(axis=1).mean()),
        "mean_sq": float((mu**2).sum(axis=1).mean() + d * var),
    }
    return TargetDensity(
        target_id=target_id,
        d=d,
        log_pi_hat=log_pi_hat,
        grad_log_pi_hat=grad_log_pi_hat,
        true_log_z=0.0,
        exact_sampler=exact_sampler,
        true_moments=moments,
        params=params,
        component_means=means,
    )


def gmm_target() -> TargetDensity:
    """Nine-component planar mixture on the grid {-5, 0, 5}^2 with covariance 0.3 I."""
    grid = torch.tensor([-5.0, 0.0, 5.0], dtype=DTYPE)
    return _isotropic_mixture("gmm", torch.cartesian_prod(grid, grid), 0.3, params={})


def _mixture_means(d: int, seed: int, n_components: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.as_tensor(rng.uniform(-10.0, 10.0, size=(n_components, d)), dtype=DTYPE)


def mixture_targets(kind: str, d: int, seed: int, n_components: int = 10) -> TargetDensity:
    """Mixtures of unit Gaussians (``gauss``) or product Student-t2 laws (``student``).

    Component means are uniform on [-10, 10]^d, drawn from ``seed``.
    """
    if d < 1 or n_components < 1:
        raise ConfigurationError(f"Mixture needs d >= 1 and at least one component, got d={d}, K={n_components}")
    means = _mixture_means(d, seed, n_components)
    params = {"d": d, "seed": seed, "n_components": n_components}
    if kind == "gauss":
        return _isotropic_mixture("mog", means, 1.0, params=params)
    if kind != "student":
        raise ConfigurationError(f"Unknown mixture kind '{kind}' (expected 'gauss' or 'student')")

    K = n_components
    # t with two degrees of freedom: density 2^-1.5 (1 + y^2/2)^-1.5
    log_unit = -1.5 * math.log(2.0)

    def component_logits(x: torch.Tensor) -> torch.Tensor:
        y = x.unsqueeze(1) - means.unsqueeze(0)
        return -math.log(K) + (log_unit - 1.5 * torch.log1p(0.5 * y * y)).sum(dim=-1)

    def log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        return torch.logsumexp(component_logits(x), dim=1)

    def grad_log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        weights = torch.softmax(component_logits(x), dim=1)
        y = x.unsqueeze(1) - means.unsqueeze(0)
        per_component = -3.0 * y / (2.0 + y * y)
        return (weights.unsqueeze(-1) * per_component).sum(dim=1)

    def exact_sampler(n: int, generator: torch.Generator) -> torch.Tensor:
        picks = torch.randint(K, (n,), generator=generator)
        z = torch.randn((n, d), generator=generator, dtype=DTYPE)
        u = 1.0 - torch.rand((n, d), generator=generator, dtype=DTYPE)
        return means[picks] + z / torch.sqrt(-torch.log(u))

    # Second moments are infinite for two degrees of freedom; mean_abs has no closed form.
    return TargetDensity(
        target_id="mos",
        d=d,
        log_pi_hat=log_pi_hat,
        grad_log_pi_hat=grad_log_pi_hat,
        true_log_z=0.0,
        exact_sampler=exact_sampler,
        params=params,
        component_means=means,
    )


# funnel --------------------------------------------------------------------


def funnel_target(d: int = 10, scale: float = 3.0) -> TargetDensity:
    if d < 2 or scale <= 0:
        raise ConfigurationError(f"Funnel needs d >= 2 and scale > 0, got d={d}, scale={scale}")
    s_sq = scale * scale

    def log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        x1, rest = x[:, 0], x[:, 1:]
        head = -0.5 * math.log(2.0 * math.pi * s_sq) - x1 * x1 / (2.0 * s_sq)
        tail = -0.5 * (d - 1) * (LOG_2PI + x1) - 0.5 * torch.exp(-x1) * (rest * rest).sum(dim=1)
        return head + tail

    def grad_log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        x1, rest = x[:, 0], x[:, 1:]
        inv_var = torch.exp(-x1)
        g1 = -x1 / s_sq - 0.5 * (d - 1) + 0.5 * inv_var * (rest * rest).sum(dim=1)
        return torch.cat([g1.unsqueeze(1), -inv_var.unsqueeze(1) * rest], dim=1)

    def exact_sampler(n: int, generator: torch.Generator) -> torch.Tensor:
        x1 = scale * torch.randn((n, 1), generator=generator, dtype=DTYPE)
        rest = torch.exp(0.5 * x1) * torch.randn((n, d - 1), generator=generator, dtype=DTYPE)
        return torch.cat([x1, rest], dim=1)

    moments = {
        "mean_abs": math.sqrt(2.0 / math.pi) * (scale + (d - 1) * math.exp(s_sq / 8.0)),
        "mean_sq": s_sq + (d - 1) * math.exp(s_sq / 2.0),
    }
    return TargetDensity(
        target_id="funnel",
        d=d,
        log_pi_hat=log_pi_hat,
        grad_log_pi_hat=grad_log_pi_hat,
        true_log_z=0.0,
        exact_sampler=exact_sampler,
        true_moments=moments,
        params={"d": d, "scale": scale},
    )


# double well ---------------------------------------------------------------


def _well_density(delta: float) -> Callable[[float], float]:
    return lambda x: math.exp(-((x * x - delta) ** 2))


@lru_cache(maxsize=None)
def double_well_quadrature(delta: float) -> Dict[str, float]:
    """z1(delta), E|x| and E x^2 of the 1-D law proportional to exp(-(x^2 - delta)^2)."""
    density = _well_density(delta)
    # symmetric in x; integrate the positive half and double
    half_mass, _ = integrate.quad(density, 0.0, np.inf, limit=200)
    half_abs, _ = integrate.quad(lambda x: x * density(x), 0.0, np.inf, limit=200)
    half_sq, _ = integrate.quad(lambda x: x * x * density(x), 0.0, np.inf, limit=200)
    return {"z1": 2.0 * half_mass, "mean_abs": half_abs / half_mass, "mean_sq": half_sq / half_mass}


@lru_cache(maxsize=None)
def _well_inverse_cdf(delta: float, points: int = 40001) -> tuple[np.ndarray, np.ndarray]:
    edge = math.sqrt(delta) + 4.0
    grid = np.linspace(-edge, edge, points)
    pdf = np.exp(-((grid * grid - delta) ** 2))
    cdf = integrate.cumulative_trapezoid(pdf, grid, initial=0.0)
    return cdf / cdf[-1], grid


def double_well_target(d: int, w: int, delta: float) -> TargetDensity:
    if not 1 <= w <= d:
        raise ConfigurationError(f"Double well needs 1 <= w <= d, got d={d}, w={w}")
    if delta <= 0:
        raise ConfigurationError(f"Double well needs delta > 0, got {delta}")

    def log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        wells, free = x[:, :w], x[:, w:]
        return -((wells * wells - delta) ** 2).sum(dim=1) - 0.5 * (free * free).sum(dim=1)

    def grad_log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        wells, free = x[:, :w], x[:, w:]
        return torch.cat([-4.0 * wells * (wells * wells - delta), -free], dim=1)

    def exact_sampler(n: int, generator: torch.Generator) -> torch.Tensor:
        cdf, grid = _well_inverse_cdf(float(delta))
        u = torch.rand((n, w), generator=generator, dtype=DTYPE).numpy()
        wells = torch.as_tensor(np.interp(u, cdf, grid), dtype=DTYPE)
        free = torch.randn((n, d - w), generator=generator, dtype=DTYPE)
        return torch.cat([wells, free], dim=1)

    quad = double_well_quadrature(float(delta))
    moments = {
        "mean_abs": w * quad["mean_abs"] + (d - w) * math.sqrt(2.0 / math.pi),
        "mean_sq": w * quad["mean_sq"] + (d - w),
    }
    return TargetDensity(
        target_id="double_well",
        d=d,
        log_pi_hat=log_pi_hat,
        grad_log_pi_hat=grad_log_pi_hat,
        true_log_z=w * math.log(quad["z1"]) + 0.5 * (d - w) * LOG_2PI,
        exact_sampler=exact_sampler,
        true_moments=moments,
        params={"d": d, "w": w, "delta": delta},
    )


# spin glass ----------------------------------------------------------------


def spin_glass_coupling(d: int, seed: int) -> torch.Tensor:
    """Symmetrized Gaussian coupling matrix (A + A^T) / 2, regenerated from ``seed``."""
    a = np.random.default_rng(seed).standard_normal((d, d))
    return torch.as_tensor(0.5 * (a + a.T), dtype=DTYPE)


def spin_glass_target(d: int, beta: float, seed: int) -> TargetDensity:
    if d < 2 or beta < 0:
        raise ConfigurationError(f"Spin glass needs d >= 2 and beta >= 0, got d={d}, beta={beta}")
    coupling = spin_glass_coupling(d, seed)
    quad_scale = beta / math.sqrt(2.0 * d)
    quartic_scale = beta * beta / (4.0 * d)

    def log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        sq = (x * x).sum(dim=1)
        return quad_scale * ((x @ coupling) * x).sum(dim=1) - quartic_scale * sq * sq - 0.5 * sq

    def grad_log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        sq = (x * x).sum(dim=1, keepdim=True)
        return 2.0 * quad_scale * (x @ coupling) - 4.0 * quartic_scale * sq * x - x

    return TargetDensity(
        target_id="spin_glass",
        d=d,
        log_pi_hat=log_pi_hat,
        grad_log_pi_hat=grad_log_pi_hat,
        true_log_z=0.5 * d * LOG_2PI if beta == 0 else None,
        params={"d": d, "beta": beta, "seed": seed},
    )


# simple targets ------------------------------------------------------------


def gaussian_target(d: int = 2, scale: float = 1.0) -> TargetDensity:
    """Normalized N(0, scale^2 I)."""
    if d < 1 or scale <= 0:
        raise ConfigurationError(f"Gaussian target needs d >= 1 and scale > 0, got d={d}, scale={scale}")
    var = scale * scale

    def log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        return -0.5 * d * math.log(2.0 * math.pi * var) - 0.5 * (x * x).sum(dim=1) / var

    def grad_log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        return -x / var

    def exact_sampler(n: int, generator: torch.Generator) -> torch.Tensor:
        return scale * torch.randn((n, d), generator=generator, dtype=DTYPE)

    return TargetDensity(
        target_id="gaussian",
        d=d,
        log_pi_hat=log_pi_hat,
        grad_log_pi_hat=grad_log_pi_hat,
        true_log_z=0.0,
        exact_sampler=exact_sampler,
        true_moments={"mean_abs": d * scale * math.sqrt(2.0 / math.pi), "mean_sq": d * var},
        params={"d": d, "scale": scale},
    )


def rings_target(n_rings: int = 3, spacing: float = 2.0, width: float = 0.2) -> TargetDensity:
    """Planar annuli at radii spacing, 2*spacing, ... (unnormalized, demo only)."""
    radii = spacing * torch.arange(1, n_rings + 1, dtype=DTYPE)
    w_sq = width * width

    def _radius(x: torch.Tensor) -> torch.Tensor:
        return torch.sqrt((x * x).sum(dim=1)).clamp_min(1e-12)

    def log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        gap = _radius(x).unsqueeze(1) - radii.unsqueeze(0)
        return torch.logsumexp(-gap * gap / (2.0 * w_sq), dim=1)

    def grad_log_pi_hat(x: torch.Tensor) -> torch.Tensor:
        radius = _radius(x)
        gap = radius.unsqueeze(1) - radii.unsqueeze(0)
        weights = torch.softmax(-gap * gap / (2.0 * w_sq), dim=1)
        radial = -(weights * gap).sum(dim=1) / w_sq
        return (radial / radius).unsqueeze(1) * x

    return TargetDensity(
        target_id="rings",
        d=2,
        log_pi_hat=log_pi_hat,
        grad_log_pi_hat=grad_log_pi_hat,
        params={"n_rings": n_rings, "spacing": spacing, "width": width},
    )


def shift_target(target: TargetDensity, c: float) -> TargetDensity:
    """Multiply pi_hat by e^c; log Z moves by exactly c."""
    base = target.log_pi_hat
    return dataclasses.replace(
        target,
        log_pi_hat=lambda x: base(x) + c,
        true_log_z=None if target.true_log_z is None else target.true_log_z + c,
        params={**target.params, "shift": c},
    )


_REGISTRY: Dict[str, Callable[..., TargetDensity]] = {
    "gmm": gmm_target,
    "funnel": funnel_target,
    "double_well": double_well_target,
    "spin_glass": spin_glass_target,
    "mog": lambda d=10, seed=0, n_components=10: mixture_targets("gauss", d, seed, n_components),
    "mos": lambda d=10, seed=0, n_components=10: mixture_targets("student", d, seed, n_components),
    "gaussian": gaussian_target,
    "rings": rings_target,
}

TARGET_IDS = tuple(sorted(_REGISTRY))


def make_target(target_id: str, **params: Any) -> TargetDensity:
    if target_id not in _REGISTRY:
        raise ConfigurationError(f"Unknown target '{target_id}' (expected one of {', '.join(TARGET_IDS)})")
    try:
        target = _REGISTRY[target_id](**params)
    except TypeError as exc:
        raise ConfigurationError(f"Invalid parameters for target '{target_id}': {exc}") from exc
    logger.debug("Built target %s (d=%s, params=%s)", target_id, target.d, params)
    return target


# terminal conditions -------------------------------------------------------


def terminal_u_half(target: TargetDensity, s: InterpolantSchedule, sc: ScalingFunctions) -> TerminalCondition:
    """phi(x) = log pi_hat(beta(T) x) - log psi(T, beta(T) x)."""
    require_kind(s, ScheduleKind.HALF)
    b = float(sc.beta(s, s.T))
    r_sq = float(s.r(torch.as_tensor(s.T, dtype=DTYPE))) ** 2

    def phi(x: torch.Tensor) -> torch.Tensor:
        y = b * x
        return target.log_pi_hat(y) - log_psi(s, s.T, y)

    def grad_phi(x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
        y = b * x
        return b * (target.grad_log_pi_hat(y) + y / r_sq)

    return TerminalCondition(phi=phi, grad_phi=grad_phi, segment=TerminalSegment.U_HALF)


def terminal_v_full(target: TargetDensity, s: InterpolantSchedule, sc: ScalingFunctions) -> TerminalCondition:
    """phi(x) = log pi_hat(alpha(T) x) + d log g(T)."""
    require_kind(s, ScheduleKind.FULL)
    a = float(sc.alpha(s, s.T))
    d_log_g = target.d * math.log(float(s.g(torch.as_tensor(s.T, dtype=DTYPE))))

    def phi(x: torch.Tensor) -> torch.Tensor:
        return target.log_pi_hat(a * x) + d_log_g

    def grad_phi(x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
        return a * target.grad_log_pi_hat(a * x)

    return TerminalCondition(phi=phi, grad_phi=grad_phi, segment=TerminalSegment.V_FULL_AT_T)


def terminal_u_full_at_split(v_field: ScalarField, s: InterpolantSchedule, sc: ScalingFunctions) -> TerminalCondition:
    """phi'(x) = v(T', beta x / alpha) - log psi(T', beta x) - d log g(T'), all at T'.

    Evaluated against the live ``v_field``, so phi' moves while v trains.
    """
    require_kind(s, ScheduleKind.FULL)
    split = float(s.T_split)
    split_t = torch.as_tensor(split, dtype=DTYPE)
    b = float(sc.beta(s, split))
    a = float(sc.alpha(s, split))
    r_sq = float(s.r(split_t)) ** 2
    log_g = math.log(float(s.g(split_t)))

    def phi(x: torch.Tensor) -> torch.Tensor:
        t = as_time(split, x.shape[0])
        return v_field.value(t, (b / a) * x) - log_psi(s, split, b * x) - x.shape[1] * log_g

    def grad_phi(x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
        t = as_time(split, x.shape[0])
        grad_v = v_field.grad_x(t, (b / a) * x, create_graph=create_graph)
        return (b / a) * grad_v + (b * b / r_sq) * x

    return TerminalCondition(phi=phi, grad_phi=grad_phi, segment=TerminalSegment.U_FULL_AT_SPLIT)
