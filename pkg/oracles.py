"""Exact u and v for targets whose interpolant density is tractable.

With a Gaussian target N(0, scale^2 I) the interpolant density stays Gaussian,
rho(t) = N(0, c(t) I) with c(t) = g(t)^2 prior_var + r(t)^2, so both PDE
solutions are quadratics in x. For Neal's funnel the tail coordinates integrate
in closed form given x1 and the remaining x1 integral is done by Gauss-Hermite
quadrature. The fields share the networks' value/grad_x interface and are used
to check losses, samplers and estimators.
"""
from __future__ import annotations

import math

import numpy as np
import torch

from errors import ConfigurationError
from numerics import DTYPE, TimeLike, as_time, ensure_finite
from schedules import InterpolantSchedule, ScalingFunctions, ScheduleKind, log_psi, require_kind

FUNNEL_NODES = 80


def implied_prior_variance(s: InterpolantSchedule, scale: float) -> float:
    """Per-coordinate variance of the prior nu that the schedule implies for the target."""
    T = torch.as_tensor(s.T, dtype=DTYPE)
    if s.function_kind is ScheduleKind.FULL:
        return scale * scale
    g_T, r_T = float(s.g(T)), float(s.r(T))
    prior_var = (scale * scale - r_T * r_T) / (g_T * g_T)
    if prior_var < 0:
        raise ConfigurationError(
            f"Target scale {scale} is narrower than the reference r(T)={r_T} of schedule '{s.preset_id}'"
        )
    return prior_var


class _GaussianField:
    def __init__(self, s: InterpolantSchedule, sc: ScalingFunctions, d: int, scale: float) -> None:
        self.s = s
        self.sc = sc
        self.d = d
        self.scale = scale
        self.prior_var = implied_prior_variance(s, scale)

    def _variance(self, t: torch.Tensor) -> torch.Tensor:
        g, r = self.s.g(t), self.s.r(t)
        return g * g * self.prior_var + r * r

    def _parts(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def value(self, t: TimeLike, x: torch.Tensor) -> torch.Tensor:
        t = as_time(t, x.shape[0])
        const, curvature = self._parts(t)
        return const + 0.5 * curvature * (x * x).sum(dim=1)

    def grad_x(
        self, t: TimeLike, x: torch.Tensor, create_graph: bool = False, check_finite: bool = True
    ) -> torch.Tensor:
        t = as_time(t, x.shape[0])
        _, curvature = self._parts(t)
        grad = curvature.unsqueeze(1) * x
        if check_finite:
            ensure_finite(grad, "Non-finite oracle gradient", t, x)
        return grad

    def value_and_grad(
        self, t: TimeLike, x: torch.Tensor, create_graph: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.value(t, x), self.grad_x(t, x, create_graph=create_graph)


class GaussianUField(_GaussianField):
    """u(t, x) = log rho(t, beta x) - log psi(t, beta x) on [0, T] (half) or [0, T'] (full)."""

    def _parts(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        g, r = self.s.g(t), self.s.r(t)
        c = self._variance(t)
        if self.sc.beta_id == "r_over_g":
            # beta^2 (1/r^2 - 1/c) = prior_var / c
            curvature = self.prior_var / c
        else:
            curvature = g * g * self.prior_var / (r * r * c)
        return 0.5 * self.d * torch.log(r * r / c), curvature


class GaussianVField(_GaussianField):
    """v(t, x) = log rho(t, alpha x) + d log g(t) on [T', T]."""

    def __init__(self, s: InterpolantSchedule, sc: ScalingFunctions, d: int, scale: float) -> None:
        require_kind(s, ScheduleKind.FULL)
        super().__init__(s, sc, d, scale)

    def _parts(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        c = self._variance(t)
        a = self.sc.alpha(self.s, t)
        const = -0.5 * self.d * torch.log(2.0 * math.pi * c) + self.d * torch.log(self.s.g(t))
        return const, -a * a / c


class _FunnelField:
    """Shared quadrature for the funnel pi(x) = N(x1; 0, scale^2) N(x_2:d; 0, e^x1 I).

    Needs r(T) = 0 so that the interpolant ends exactly at the funnel.
    """

    def __init__(
        self, s: InterpolantSchedule, sc: ScalingFunctions, d: int, scale: float, n_nodes: int = FUNNEL_NODES
    ) -> None:
        if s.function_kind is not ScheduleKind.FULL:
            raise ConfigurationError(f"Funnel fields need r(T) = 0, schedule '{s.preset_id}' has r(T) > 0")
        if sc.beta_id != "r_over_g":
            raise ConfigurationError(f"Funnel fields need beta = r/g, got '{sc.beta_id}'")
        self.s = s
        self.sc = sc
        self.d = d
        self.scale = scale
        nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
        self.nodes = torch.as_tensor(nodes, dtype=DTYPE)
        self.log_weights = torch.as_tensor(np.log(weights / math.sqrt(2.0 * math.pi)), dtype=DTYPE)

    def _log_tilted_mean(self, z: torch.Tensor, g: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        """log E_pi exp(z . x / r - g^2 |x|^2 / (2 r^2)), which equals log rho(t, r z / g) - log psi(t, r z / g)."""
        two_b = g * g / (r * r)
        a1 = z[:, 0] / r
        a_rest_sq = (z[:, 1:] * z[:, 1:]).sum(dim=1) / (r * r)
        precision = 1.0 / (self.scale * self.scale) + two_b
        x1 = (a1 / precision).unsqueeze(1) + precision.rsqrt().unsqueeze(1) * self.nodes
        two_b = two_b.unsqueeze(1)
        # Gaussian integral over x_2:d given x1
        log_h = -0.5 * (self.d - 1) * torch.log1p(two_b * torch.exp(x1)) + 0.5 * a_rest_sq.unsqueeze(1) / (
            torch.exp(-x1) + two_b
        )
        head = -0.5 * torch.log(self.scale * self.scale * precision) + 0.5 * a1 * a1 / precision
        return head + torch.logsumexp(self.log_weights + log_h, dim=1)

    def value(self, t: TimeLike, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def grad_x(
        self, t: TimeLike, x: torch.Tensor, create_graph: bool = False, check_finite: bool = True
    ) -> torch.Tensor:
        with torch.enable_grad():
            x_in = x if x.requires_grad else x.detach().requires_grad_(True)
            (grad,) = torch.autograd.grad(self.value(t, x_in).sum(), x_in, create_graph=create_graph)
        if check_finite:
            ensure_finite(grad, "Non-finite oracle gradient", as_time(t, x.shape[0]), x)
        return grad

    def value_and_grad(
        self, t: TimeLike, x: torch.Tensor, create_graph: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.value(t, x), self.grad_x(t, x, create_graph=create_graph)


class FunnelUField(_FunnelField):
    """u(t, x) = log rho(t, beta x) - log psi(t, beta x), finite down to t = 0 at x = 0."""

    def value(self, t: TimeLike, x: torch.Tensor) -> torch.Tensor:
        t = as_time(t, x.shape[0])
        return self._log_tilted_mean(x, self.s.g(t), self.s.r(t))


class FunnelVField(_FunnelField):
    """v(t, x) = log rho(t, alpha x) + d log g(t) on [T', T)."""

    def __init__(
        self, s: InterpolantSchedule, sc: ScalingFunctions, d: int, scale: float, n_nodes: int = FUNNEL_NODES
    ) -> None:
        require_kind(s, ScheduleKind.FULL)
        super().__init__(s, sc, d, scale, n_nodes)

    def value(self, t: TimeLike, x: torch.Tensor) -> torch.Tensor:
        t = as_time(t, x.shape[0])
        g, r = self.s.g(t), self.s.r(t)
        y = self.sc.alpha(self.s, t).unsqueeze(1) * x
        z = (g / r).unsqueeze(1) * y
        return log_psi(self.s, t, y) + self._log_tilted_mean(z, g, r) + self.d * torch.log(g)
