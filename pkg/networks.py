"""Scalar-field networks Phi1(t, x) + Phi2(t) phi(x) and their optimizer state.

Spatial gradients come from autograd with ``create_graph=True`` during
training, so losses built from grad_x are differentiable in the parameters.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import nn
from torch.nn.utils import clip_grad_norm_, parameters_to_vector, vector_to_parameters
from torch.optim.lr_scheduler import LambdaLR

from numerics import DTYPE, TimeLike, as_time, ensure_finite
from targets import TerminalCondition

logger = logging.getLogger(__name__)

WIDTH = 64
N_FREQUENCIES = 64
INITIAL_LR = 5e-3
LR_DECAY = 5.0
LR_DECAY_EVERY = 2000
EMA_DECAY = 0.999
MAX_GRAD_NORM = 1.0


class FourierEmbedding(nn.Module):
    """Fixed sin/cos features of t; frequencies ~ N(0, (2 pi)^2), never trained."""

    def __init__(self, n_frequencies: int, generator: torch.Generator) -> None:
        super().__init__()
        freqs = 2.0 * math.pi * torch.randn(n_frequencies, generator=generator, dtype=DTYPE)
        self.register_buffer("frequencies", freqs)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        angles = t.unsqueeze(-1) * self.frequencies
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _dense(fan_in: int, fan_out: int, generator: torch.Generator) -> nn.Linear:
    layer = nn.Linear(fan_in, fan_out, dtype=DTYPE)
    with torch.no_grad():
        layer.weight.copy_(torch.randn((fan_out, fan_in), generator=generator, dtype=DTYPE) / math.sqrt(fan_in))
        layer.bias.zero_()
    return layer


class ScalarFieldNet(nn.Module):
    """u or v approximation with the terminal condition built in as a skip term.

    Phi1 = L1 . gelu . L . gelu . L . gelu (L(x) + L . gelu . L (F(t)))
    Phi2 = L1 . gelu . L . gelu . L . gelu . L (F(t))
    """

    def __init__(
        self,
        d: int,
        terminal: TerminalCondition,
        seed: int,
        width: int = WIDTH,
        n_frequencies: int = N_FREQUENCIES,
    ) -> None:
        super().__init__()
        self.d = d
        self.seed = seed
        self.terminal = terminal
        generator = torch.Generator().manual_seed(seed)
        self.fourier = FourierEmbedding(n_frequencies, generator)
        embed = 2 * n_frequencies

        self.x_in = _dense(d, width, generator)
        self.t_in = nn.ModuleList([_dense(embed, width, generator), _dense(width, width, generator)])
        self.phi1_hidden = nn.ModuleList([_dense(width, width, generator), _dense(width, width, generator)])
        self.phi1_out = _dense(width, 1, generator)

        self.phi2_hidden = nn.ModuleList(
            [_dense(embed, width, generator), _dense(width, width, generator), _dense(width, width, generator)]
        )
        self.phi2_out = _dense(width, 1, generator)

        with torch.no_grad():
            self.phi1_out.weight.zero_()
            self.phi2_out.weight.zero_()
            self.phi2_out.bias.fill_(1.0)

    def phi1(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        time_features = self.t_in[1](nn.functional.gelu(self.t_in[0](self.fourier(t))))
        h = nn.functional.gelu(self.x_in(x) + time_features)
        for layer in self.phi1_hidden:
            h = nn.functional.gelu(layer(h))
        return self.phi1_out(h).squeeze(-1)

    def phi2(self, t: torch.Tensor) -> torch.Tensor:
        h = self.fourier(t)
        for layer in self.phi2_hidden:
            h = nn.functional.gelu(layer(h))
        return self.phi2_out(h).squeeze(-1)

    def value(self, t: TimeLike, x: torch.Tensor) -> torch.Tensor:
        t = as_time(t, x.shape[0])
        out = self.phi1(t, x) + self.phi2(t) * self.terminal.phi(x)
        ensure_finite(out, "Non-finite network value", t, x)
        return out

    def value_and_grad(
        self, t: TimeLike, x: torch.Tensor, create_graph: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor]:
        t = as_time(t, x.shape[0])
        with torch.enable_grad():
            x_in = x if x.requires_grad else x.detach().requires_grad_(True)
            skip = self.phi1(t, x_in)
            (grad_skip,) = torch.autograd.grad(skip.sum(), x_in, create_graph=create_graph)
        scale = self.phi2(t)
        value = skip + scale * self.terminal.phi(x_in)
        grad = grad_skip + scale.unsqueeze(-1) * self.terminal.grad_phi(x_in, create_graph=create_graph)
        ensure_finite(value, "Non-finite network value", t, x)
        ensure_finite(grad, "Non-finite network gradient", t, x)
        return value, grad

    def grad_x(
        self, t: TimeLike, x: torch.Tensor, create_graph: bool = False, check_finite: bool = True
    ) -> torch.Tensor:
        t = as_time(t, x.shape[0])
        with torch.enable_grad():
            x_in = x if x.requires_grad else x.detach().requires_grad_(True)
            (grad_skip,) = torch.autograd.grad(self.phi1(t, x_in).sum(), x_in, create_graph=create_graph)
        if create_graph:
            grad = grad_skip + self.phi2(t).unsqueeze(-1) * self.terminal.grad_phi(x_in, create_graph=True)
        else:
            with torch.no_grad():
                grad = grad_skip + self.phi2(t).unsqueeze(-1) * self.terminal.grad_phi(x.detach())
        if check_finite:
            ensure_finite(grad, "Non-finite network gradient", t, x)
        return grad


def init_net(d: int, terminal: TerminalCondition, seed: int) -> ScalarFieldNet:
    return ScalarFieldNet(d, terminal, seed)


def lr_at(step: int, initial: float = INITIAL_LR) -> float:
    """Linear interpolation between initial * 5^-k anchored at step 2000 k."""
    k, offset = divmod(max(int(step), 0), LR_DECAY_EVERY)
    start = initial * LR_DECAY ** (-k)
    end = start / LR_DECAY
    return start + (end - start) * offset / LR_DECAY_EVERY


@dataclass
class TrainState:
    net: ScalarFieldNet
    optimizer: torch.optim.Adam
    scheduler: LambdaLR
    ema_theta: torch.Tensor
    step: int = 0
    aborted_steps: int = 0

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    @property
    def parameters(self) -> List[nn.Parameter]:
        return list(self.net.parameters())

    def theta(self) -> torch.Tensor:
        return net_theta(self.net)

    def adam_updates(self) -> int:
        """Updates Adam has applied; lags ``step`` by the aborted steps."""
        for p in self.net.parameters():
            count = self.optimizer.state.get(p, {}).get("step")
            return 0 if count is None else int(count)
        return 0

    def adam_moments(self) -> tuple[torch.Tensor, torch.Tensor]:
        first, second = [], []
        for p in self.net.parameters():
            state = self.optimizer.state.get(p, {})
            first.append(state.get("exp_avg", torch.zeros_like(p)).detach().reshape(-1))
            second.append(state.get("exp_avg_sq", torch.zeros_like(p)).detach().reshape(-1))
        return torch.cat(first), torch.cat(second)


def make_train_state(net: ScalarFieldNet, initial_lr: float = INITIAL_LR) -> TrainState:
    optimizer = torch.optim.Adam(net.parameters(), lr=initial_lr, betas=(0.9, 0.999), eps=1e-8)
    scheduler = LambdaLR(optimizer, lr_lambda=lambda step: lr_at(step, initial_lr) / initial_lr)
    return TrainState(net=net, optimizer=optimizer, scheduler=scheduler, ema_theta=net_theta(net))


def net_theta(net: nn.Module) -> torch.Tensor:
    return parameters_to_vector(net.parameters()).detach().clone()


def restore_train_state(
    state: TrainState,
    theta: torch.Tensor,
    ema_theta: torch.Tensor,
    adam_m: torch.Tensor,
    adam_v: torch.Tensor,
    step: int,
    adam_updates: Optional[int] = None,
) -> TrainState:
    """Load parameters, moments and the LR position from checkpoint tensors.

    ``adam_updates`` is Adam's bias-correction count, ``step`` when omitted.
    """
    updates = step if adam_updates is None else int(adam_updates)
    with torch.no_grad():
        vector_to_parameters(theta.to(DTYPE), state.net.parameters())
    offset = 0
    for p in state.net.parameters():
        n = p.numel()
        if updates > 0:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(updates)),
                "exp_avg": adam_m[offset : offset + n].view_as(p).clone(),
                "exp_avg_sq": adam_v[offset : offset + n].view_as(p).clone(),
            }
        offset += n
    state.ema_theta = ema_theta.clone()
    state.step = step
    state.scheduler.last_epoch = step
    for group, factor in zip(state.optimizer.param_groups, state.scheduler.lr_lambdas):
        group["lr"] = group["initial_lr"] * factor(step)
    return state


def clip_global_norm(
    parameters: Sequence[nn.Parameter], grads: Sequence[torch.Tensor], max_norm: float = MAX_GRAD_NORM
) -> torch.Tensor:
    """Attach ``grads`` to ``parameters`` and rescale them to global L2 norm <= max_norm.

    Returns the norm before clipping.
    """
    for p, g in zip(parameters, grads):
        p.grad = g.detach().clone()
    return clip_grad_norm_(parameters, max_norm)


def ema_update(state: TrainState, decay: float = EMA_DECAY) -> None:
    state.ema_theta.lerp_(state.theta(), 1.0 - decay)


def adam_step(
    state: TrainState,
    grads: Sequence[torch.Tensor],
    max_norm: float = MAX_GRAD_NORM,
    ema_decay: float = EMA_DECAY,
) -> Optional[float]:
    """Clip, apply one Adam update, advance the LR schedule and the EMA.

    A non-finite gradient aborts the update; the step counter still advances
    and the abort is counted. Returns the pre-clip gradient norm, or None if
    the step was aborted.
    """
    norms = joint_adam_step([state], [grads], max_norm, ema_decay)
    return None if norms is None else norms[0]


def joint_adam_step(
    states: Sequence[TrainState],
    grads: Sequence[Sequence[torch.Tensor]],
    max_norm: float = MAX_GRAD_NORM,
    ema_decay: float = EMA_DECAY,
) -> Optional[List[float]]:
    """One update of several nets that share a loss: all of them move or none does.

    Every gradient is clipped first; a single non-finite norm skips the step
    for every state.
    """
    norms = [clip_global_norm(state.parameters, g, max_norm) for state, g in zip(states, grads)]
    if not all(bool(torch.isfinite(norm)) for norm in norms):
        logger.warning("Aborted update at step %d: non-finite gradient norm", states[0].step)
        for state in states:
            skip_step(state)
        return None
    for state in states:
        state.optimizer.step()
        state.optimizer.zero_grad(set_to_none=True)
        state.scheduler.step()
        state.step += 1
        ema_update(state, ema_decay)
    return [float(norm) for norm in norms]


def skip_step(state: TrainState) -> None:
    """Count an aborted step: parameters, moments and EMA stay, the LR schedule advances."""
    state.aborted_steps += 1
    state.optimizer.zero_grad(set_to_none=True)
    state.scheduler.step()
    state.step += 1


def ema_copy(net: ScalarFieldNet, ema_theta: torch.Tensor, terminal: Optional[TerminalCondition] = None) -> ScalarFieldNet:
    """A frozen twin of ``net`` carrying the EMA parameters."""
    twin = ScalarFieldNet(net.d, terminal or net.terminal, net.seed)
    with torch.no_grad():
        vector_to_parameters(ema_theta.to(DTYPE), twin.parameters())
        twin.fourier.frequencies.copy_(net.fourier.frequencies)
    twin.requires_grad_(False)
    return twin
