"""Localized FBSDE residual losses and the training loop for u (and v).

The auxiliary path X follows the sampling ODE with the current network and is
detached; the FBSDE residual and the terminal penalty are evaluated at the
path points and are the only terms that carry parameter gradients.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional

import numpy as np
import torch

from checkpoints import Checkpoint, validate_header
from errors import ConfigurationError, EstimatorError, NumericalFailureError, TrainingDivergedError
from estimators import EstimateRecord, empirical_moments, estimate_log_z_full, estimate_log_z_half
from networks import (
    ScalarFieldNet,
    TrainState,
    ema_copy,
    init_net,
    joint_adam_step,
    make_train_state,
    restore_train_state,
    skip_step,
)
from numerics import DTYPE, ScalarField, TimeLike, as_time, derive_generator, ensure_finite, standard_normal
from sampler import SampleBatch, SamplerConfig, sample_full, sample_half, sample_ode
from schedules import (
    InterpolantSchedule,
    ScalingFunctions,
    ScheduleKind,
    drift_b_from_grad_u,
    drift_b_from_grad_v,
    make_schedule,
    mu_u,
    mu_v,
    require_kind,
    sigma_sq_u,
    sigma_sq_v,
)
from targets import (
    TargetDensity,
    TerminalCondition,
    make_target,
    terminal_u_full_at_split,
    terminal_u_half,
    terminal_v_full,
)

logger = logging.getLogger(__name__)

MAX_ABORTED_FRACTION = 0.01
COMPAT_FIELDS = ("target_id", "target_params", "preset_id", "kind", "d", "T", "T_split", "beta", "alpha")

DriftFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
DiffusionFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class TrainConfig:
    target_id: str = "gmm"
    target_params: Mapping[str, Any] = field(default_factory=dict)
    preset_id: str = "trig_full"
    T: float = 1.0
    T_split: Optional[float] = 0.5
    beta: str = "r_over_g"
    alpha: str = "one"
    pipeline: Optional[str] = None
    n_path: int = 60
    batch: int = 128
    steps: int = 10000
    delta: float = 5e-6
    lam: Optional[float] = None
    lr: float = 5e-3
    max_grad_norm: float = 1.0
    ema_decay: float = 0.999
    seed: int = 0
    monitor_every: int = 250
    monitor_paths: int = 512
    monitor_steps: int = 200
    log_every: int = 100

    @property
    def lambda_(self) -> float:
        """FBSDE residual weight; 2000 / delta unless set."""
        return self.lam if self.lam is not None else 2000.0 / self.delta


@dataclass(frozen=True)
class Problem:
    target: TargetDensity
    schedule: InterpolantSchedule
    scaling: ScalingFunctions

    @property
    def kind(self) -> ScheduleKind:
        return self.schedule.kind


def build_problem(config: TrainConfig) -> Problem:
    return Problem(
        target=make_target(config.target_id, **dict(config.target_params)),
        schedule=make_schedule(config.preset_id, config.T, config.T_split, config.pipeline),
        scaling=ScalingFunctions(config.beta, config.alpha),
    )


def build_nets(problem: Problem, seed: int) -> Dict[str, ScalarFieldNet]:
    target, s, sc = problem.target, problem.schedule, problem.scaling
    if problem.kind is ScheduleKind.HALF:
        return {"u": init_net(target.d, terminal_u_half(target, s, sc), seed)}
    v_net = init_net(target.d, terminal_v_full(target, s, sc), seed + 1)
    u_net = init_net(target.d, terminal_u_full_at_split(v_net, s, sc), seed)
    return {"u": u_net, "v": v_net}


# one FBSDE micro-step -------------------------------------------------------


@dataclass(frozen=True)
class FbsdeStepInputs:
    t: torch.Tensor
    X: torch.Tensor
    m: ScalarField
    delta: float
    f: DriftFn
    h: DiffusionFn
    w: torch.Tensor

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise ConfigurationError(f"FBSDE step delta must be positive, got {self.delta}")


def loss_fbsde(inputs: FbsdeStepInputs) -> torch.Tensor:
    """Squared residual (Y_hat - m(t + delta, X_hat))^2 per batch element."""
    t, X, m, delta, w = inputs.t, inputs.X, inputs.m, inputs.delta, inputs.w
    value, grad = m.value_and_grad(t, X, create_graph=True)
    h = inputs.h(t).unsqueeze(1)
    Z = h * grad
    root_delta = math.sqrt(delta)
    y_hat = value + 0.5 * (Z * Z).sum(dim=1) * delta + root_delta * (Z * w).sum(dim=1)
    x_hat = X + (inputs.f(t, X) + h * Z) * delta + h * root_delta * w
    residual = y_hat - m.value(t + delta, x_hat)
    ensure_finite(residual, "Non-finite FBSDE residual", t, X)
    return residual * residual


# auxiliary path ------------------------------------------------------------


def path_ode_step_half(
    net_u: ScalarField, s: InterpolantSchedule, sc: ScalingFunctions, t: TimeLike, X: torch.Tensor, dt: TimeLike
) -> torch.Tensor:
    """Explicit Euler step of the sampling ODE driven by grad u; never carries parameter gradients."""
    n = X.shape[0]
    t = as_time(t, n)
    dt = as_time(dt, n)
    grad = net_u.grad_x(t, X * sc.inv_beta(s, t).unsqueeze(1))
    drift = drift_b_from_grad_u(s, sc, t, X, grad)
    X_next = (X + dt.unsqueeze(1) * drift).detach()
    ensure_finite(X_next, "Non-finite auxiliary path", t, X)
    return X_next


def _path_step_v(
    net_v: ScalarField, s: InterpolantSchedule, sc: ScalingFunctions, t: torch.Tensor, X: torch.Tensor, dt: torch.Tensor
) -> torch.Tensor:
    grad = net_v.grad_x(t, X / sc.alpha(s, t).unsqueeze(1))
    drift = drift_b_from_grad_v(s, sc, t, X, grad)
    X_next = (X + dt.unsqueeze(1) * drift).detach()
    ensure_finite(X_next, "Non-finite auxiliary path", t, X)
    return X_next


def path_ode_step_full(
    net_u: ScalarField,
    net_v: ScalarField,
    s: InterpolantSchedule,
    sc: ScalingFunctions,
    t: TimeLike,
    X: torch.Tensor,
    dt: TimeLike,
) -> torch.Tensor:
    """As path_ode_step_half for t <= T', the grad v branch beyond."""
    require_kind(s, ScheduleKind.FULL)
    n = X.shape[0]
    t = as_time(t, n)
    dt = as_time(dt, n)
    upper = t > s.T_split
    if not bool(upper.any()):
        return path_ode_step_half(net_u, s, sc, t, X, dt)
    if bool(upper.all()):
        return _path_step_v(net_v, s, sc, t, X, dt)
    X_next = torch.empty_like(X)
    lower = ~upper
    X_next[lower] = path_ode_step_half(net_u, s, sc, t[lower], X[lower], dt[lower])
    X_next[upper] = _path_step_v(net_v, s, sc, t[upper], X[upper], dt[upper])
    return X_next


# losses --------------------------------------------------------------------


def sorted_time_grid(start: float, end: float, n_steps: int, batch: int, generator: torch.Generator) -> torch.Tensor:
    """[batch, n_steps + 1] grids start = t_0 <= t_1 <= ... <= t_n = end with sorted uniform interior times."""
    interior = start + (end - start) * torch.rand((batch, max(n_steps - 1, 0)), generator=generator, dtype=DTYPE)
    interior, _ = torch.sort(interior, dim=1)
    first = torch.full((batch, 1), start, dtype=DTYPE)
    last = torch.full((batch, 1), end, dtype=DTYPE)
    return torch.cat([first, interior, last], dim=1)


def _run_segment(
    m: ScalarField,
    grid: torch.Tensor,
    X: torch.Tensor,
    config: TrainConfig,
    f: DriftFn,
    h: DiffusionFn,
    step_path: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor],
    earliest: float,
    generator: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    lam = config.lambda_
    total = torch.zeros(X.shape[0], dtype=DTYPE)
    end = float(grid[0, -1])
    for i in range(grid.shape[1] - 1):
        t = grid[:, i]
        if lam != 0.0:
            t_eval = t.clamp(min=earliest, max=end - config.delta)
            w = standard_normal(X.shape, generator)
            total = total + lam * loss_fbsde(FbsdeStepInputs(t_eval, X, m, config.delta, f, h, w))
        X = step_path(t, X, grid[:, i + 1] - t)
    return total, X


def _terminal_penalty(m: ScalarField, terminal: TerminalCondition, t_end: float, X: torch.Tensor) -> torch.Tensor:
    gap = m.grad_x(t_end, X, create_graph=True) - terminal.grad_phi(X, create_graph=True)
    return (gap * gap).sum(dim=1)


def _parameter_grads(loss: torch.Tensor, params: List[torch.nn.Parameter]) -> List[torch.Tensor]:
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def _earliest_time(sc: ScalingFunctions, s: InterpolantSchedule) -> float:
    # mu and sigma of the u-PDE blow up at t = 0 unless beta = r/g
    return 0.0 if sc.beta_id == "r_over_g" else s.eta


def _u_segment(problem: Problem, net_u: ScalarFieldNet, end: float, n_steps: int, config: TrainConfig, generator: torch.Generator):
    s, sc = problem.schedule, problem.scaling
    X0 = float(s.r(torch.as_tensor(0.0, dtype=DTYPE))) * standard_normal((config.batch, problem.target.d), generator)
    grid = sorted_time_grid(0.0, end, n_steps, config.batch, generator)
    return _run_segment(
        net_u,
        grid,
        X0,
        config,
        lambda t, x: mu_u(s, sc, t, x),
        lambda t: torch.sqrt(sigma_sq_u(s, sc, t)),
        lambda t, x, dt: path_ode_step_half(net_u, s, sc, t, x, dt),
        _earliest_time(sc, s),
        generator,
    )


def loss_half(
    state: TrainState, problem: Problem, config: TrainConfig, generator: torch.Generator
) -> tuple[torch.Tensor, List[torch.Tensor]]:
    """Batch-mean loss of the half-interpolant sampler and its parameter gradient."""
    require_kind(problem.schedule, ScheduleKind.HALF)
    net_u = state.net
    fbsde, X_end = _u_segment(problem, net_u, problem.schedule.T, config.n_path, config, generator)
    loss = (fbsde + _terminal_penalty(net_u, net_u.terminal, problem.schedule.T, X_end)).mean()
    return loss.detach(), _parameter_grads(loss, state.parameters)


def split_steps(n_path: int, s: InterpolantSchedule) -> int:
    """Number of path steps on [0, T'], ceil(N T' / T)."""
    return math.ceil(n_path * float(s.T_split) / s.T)


def loss_full(
    state_u: TrainState, state_v: TrainState, problem: Problem, config: TrainConfig, generator: torch.Generator
) -> tuple[torch.Tensor, List[torch.Tensor], List[torch.Tensor]]:
    """Joint loss of u on [0, T'] and v on [T', T]; phi' keeps v trainable through the interface."""
    s, sc = problem.schedule, problem.scaling
    require_kind(s, ScheduleKind.FULL)
    net_u, net_v = state_u.net, state_v.net
    split = float(s.T_split)
    n_first = split_steps(config.n_path, s)

    first, X_split = _u_segment(problem, net_u, split, n_first, config, generator)
    first = first + _terminal_penalty(net_u, net_u.terminal, split, X_split)

    n_second = config.n_path - n_first
    second = torch.zeros_like(first)
    X_end = X_split
    if n_second > 0:
        grid = sorted_time_grid(split, s.T, n_second, config.batch, generator)
        second, X_end = _run_segment(
            net_v,
            grid,
            X_split,
            config,
            lambda t, x: mu_v(s, sc, t, x),
            lambda t: torch.sqrt(sigma_sq_v(s, sc, t)),
            lambda t, x, dt: _path_step_v(net_v, s, sc, t, x, dt),
            split,
            generator,
        )
    second = second + _terminal_penalty(net_v, net_v.terminal, s.T, X_end)

    loss = (first + second).mean()
    grads = _parameter_grads(loss, state_u.parameters + state_v.parameters)
    n_u = len(state_u.parameters)
    return loss.detach(), grads[:n_u], grads[n_u:]


# evaluation fields and checkpoints ------------------------------------------


@dataclass(frozen=True)
class FieldPair:
    u: ScalarField
    v: Optional[ScalarField] = None


def evaluation_fields(problem: Problem, nets: Mapping[str, ScalarFieldNet], ema: Optional[Mapping[str, torch.Tensor]] = None) -> FieldPair:
    """Raw nets, or frozen EMA twins when ``ema`` holds shadow parameters."""
    if ema is None:
        return FieldPair(u=nets["u"], v=nets.get("v"))
    if problem.kind is ScheduleKind.HALF:
        return FieldPair(u=ema_copy(nets["u"], ema["u"]))
    v_twin = ema_copy(nets["v"], ema["v"])
    terminal = terminal_u_full_at_split(v_twin, problem.schedule, problem.scaling)
    return FieldPair(u=ema_copy(nets["u"], ema["u"], terminal=terminal), v=v_twin)


def estimate_log_z(
    problem: Problem, fields: FieldPair, n_paths: int, n_steps: int, generator: torch.Generator, meta: Optional[Dict[str, Any]] = None
) -> EstimateRecord:
    s, sc, target = problem.schedule, problem.scaling, problem.target
    if problem.kind is ScheduleKind.HALF:
        return estimate_log_z_half(fields.u, s, sc, target, n_paths, n_steps, generator, meta)
    return estimate_log_z_full(fields.u, fields.v, s, sc, target, n_paths, n_steps, generator, meta)


def draw_samples(problem: Problem, fields: FieldPair, cfg: SamplerConfig, generator: torch.Generator) -> SampleBatch:
    s, sc = problem.schedule, problem.scaling
    if cfg.mode == "ode":
        return sample_ode(fields.u, fields.v, s, sc, cfg, generator)
    if problem.kind is ScheduleKind.HALF:
        return sample_half(fields.u, s, sc, cfg, generator)
    return sample_full(fields.u, fields.v, s, sc, cfg, generator)


def checkpoint_header(config: TrainConfig, problem: Problem, step: int) -> Dict[str, Any]:
    s = problem.schedule
    return {
        "target_id": config.target_id,
        "target_params": dict(config.target_params),
        "preset_id": config.preset_id,
        "kind": s.kind.value,
        "d": problem.target.d,
        "T": s.T,
        "T_split": s.T_split,
        "beta": config.beta,
        "alpha": config.alpha,
        "pipeline": config.pipeline,
        "seed": config.seed,
        "step": step,
        "nets": ["u"] if problem.kind is ScheduleKind.HALF else ["u", "v"],
    }


def to_checkpoint(config: TrainConfig, problem: Problem, states: Mapping[str, TrainState]) -> Checkpoint:
    tensors: Dict[str, np.ndarray] = {}
    adam_updates = {name: state.adam_updates() for name, state in states.items()}
    for name, state in states.items():
        adam_m, adam_v = state.adam_moments()
        tensors[f"{name}.theta"] = state.theta().numpy()
        tensors[f"{name}.adam_m"] = adam_m.numpy()
        tensors[f"{name}.adam_v"] = adam_v.numpy()
        tensors[f"{name}.ema_theta"] = state.ema_theta.detach().numpy().copy()
        tensors[f"{name}.fourier"] = state.net.fourier.frequencies.detach().numpy().copy()
    step = next(iter(states.values())).step
    header = {**checkpoint_header(config, problem, step), "adam_updates": adam_updates}
    return Checkpoint(header=header, tensors=tensors)


def config_from_header(header: Mapping[str, Any], **overrides: Any) -> TrainConfig:
    base = {key: header[key] for key in ("target_id", "target_params", "preset_id", "T", "T_split", "beta", "alpha", "seed")}
    base["pipeline"] = header.get("pipeline")
    return TrainConfig(**{**base, **overrides})


def restore_states(
    checkpoint: Checkpoint, config: TrainConfig, problem: Optional[Problem] = None
) -> tuple[Problem, Dict[str, TrainState]]:
    """Rebuild networks and optimizer states; the header must match ``config``."""
    problem = problem or build_problem(config)
    expected = checkpoint_header(config, problem, 0)
    validate_header(checkpoint, expected, COMPAT_FIELDS)
    seed = int(checkpoint.header["seed"])
    nets = build_nets(problem, seed)
    states = {name: make_train_state(net, config.lr) for name, net in nets.items()}
    step = int(checkpoint.header["step"])
    adam_updates = checkpoint.header.get("adam_updates", {})
    for name, state in states.items():
        with torch.no_grad():
            state.net.fourier.frequencies.copy_(torch.as_tensor(checkpoint.tensor(f"{name}.fourier"), dtype=DTYPE))
        restore_train_state(
            state,
            theta=torch.as_tensor(checkpoint.tensor(f"{name}.theta"), dtype=DTYPE),
            ema_theta=torch.as_tensor(checkpoint.tensor(f"{name}.ema_theta"), dtype=DTYPE),
            adam_m=torch.as_tensor(checkpoint.tensor(f"{name}.adam_m"), dtype=DTYPE),
            adam_v=torch.as_tensor(checkpoint.tensor(f"{name}.adam_v"), dtype=DTYPE),
            step=step,
            adam_updates=adam_updates.get(name),
        )
    return problem, states


def fields_from_checkpoint(checkpoint: Checkpoint, config: TrainConfig, use_ema: bool = True) -> tuple[Problem, FieldPair]:
    problem, states = restore_states(checkpoint, config)
    nets = {name: state.net for name, state in states.items()}
    ema = {name: state.ema_theta for name, state in states.items()} if use_ema else None
    return problem, evaluation_fields(problem, nets, ema)


# training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    problem: Problem
    states: Dict[str, TrainState]
    loss_trace: List[float] = field(default_factory=list)
    monitor_trace: List[Dict[str, Any]] = field(default_factory=list)
    aborted_steps: int = 0

    @property
    def final_log_z(self) -> Optional[float]:
        for record in reversed(self.monitor_trace):
            if record.get("value") is not None:
                return record["value"]
        return None


def _monitor(problem: Problem, states: Mapping[str, TrainState], config: TrainConfig, step: int) -> Dict[str, Any]:
    """log Z with its CI plus sample moments, all from the EMA fields."""
    nets = {name: state.net for name, state in states.items()}
    fields = evaluation_fields(problem, nets, {name: state.ema_theta for name, state in states.items()})
    monitored: Dict[str, Any] = {"step": step, "value": None, "ci95": None, "mean_abs": None, "mean_sq": None}
    try:
        record = estimate_log_z(
            problem, fields, config.monitor_paths, config.monitor_steps, derive_generator(config.seed, "monitor", step), {"step": step}
        )
        monitored.update(value=record.value, ci95=record.ci95)
    except (EstimatorError, NumericalFailureError) as exc:
        logger.warning("log Z monitor failed at step %d: %s", step, exc)
    try:
        cfg = SamplerConfig(n_samples=config.monitor_paths, n_steps=config.monitor_steps)
        batch = draw_samples(problem, fields, cfg, derive_generator(config.seed, "monitor", step, 1))
        moments = empirical_moments(batch.finite)
        monitored.update(mean_abs=moments["mean_abs"].value, mean_sq=moments["mean_sq"].value)
    except (ConfigurationError, NumericalFailureError) as exc:
        logger.warning("Moment monitor failed at step %d: %s", step, exc)
    return monitored


def train(
    config: TrainConfig,
    metrics: Optional[Callable[[Dict[str, Any]], None]] = None,
    resume: Optional[Checkpoint] = None,
) -> TrainResult:
    """Run loss -> clip -> Adam -> EMA for ``config.steps`` steps.

    ``metrics`` receives one record per step. More than 1% aborted steps
    raises TrainingDivergedError.
    """
    if resume is not None:
        problem, states = restore_states(resume, config)
    else:
        problem = build_problem(config)
        states = {name: make_train_state(net, config.lr) for name, net in build_nets(problem, config.seed).items()}
    result = TrainResult(checkpoint=to_checkpoint(config, problem, states), problem=problem, states=states)
    start = next(iter(states.values())).step
    logger.info(
        "Training %s on %s (d=%d) with %s for steps %d..%d",
        "/".join(states),
        config.target_id,
        problem.target.d,
        config.preset_id,
        start,
        config.steps,
    )

    for step in range(start, config.steps):
        generator = derive_generator(config.seed, "train", step)
        lr = states["u"].lr
        grad_norm: Optional[float] = None
        loss_value = float("nan")
        try:
            if problem.kind is ScheduleKind.HALF:
                loss, grads = loss_half(states["u"], problem, config, generator)
                norms = joint_adam_step([states["u"]], [grads], config.max_grad_norm, config.ema_decay)
            else:
                loss, grads_u, grads_v = loss_full(states["u"], states["v"], problem, config, generator)
                norms = joint_adam_step(
                    [states["u"], states["v"]], [grads_u, grads_v], config.max_grad_norm, config.ema_decay
                )
            loss_value = float(loss)
            aborted = norms is None
            if not aborted:
                grad_norm = math.sqrt(sum(norm * norm for norm in norms))
        except NumericalFailureError as exc:
            logger.warning("Aborted step %d: %s", step, exc)
            for state in states.values():
                skip_step(state)
            aborted = True

        if aborted:
            result.aborted_steps += 1
            if result.aborted_steps > MAX_ABORTED_FRACTION * config.steps:
                raise TrainingDivergedError(
                    f"{result.aborted_steps} aborted steps exceed {MAX_ABORTED_FRACTION:.0%} of {config.steps}",
                    step=step,
                )
        result.loss_trace.append(loss_value)

        record: Dict[str, Any] = {
            "step": step,
            "loss": loss_value,
            "lr": lr,
            "grad_norm": grad_norm,
            "log_z": None,
        }
        is_last = step == config.steps - 1
        if config.monitor_every > 0 and ((step + 1) % config.monitor_every == 0 or is_last):
            monitored = _monitor(problem, states, config, step + 1)
            result.monitor_trace.append(monitored)
            record["log_z"] = monitored["value"]
            record["log_z_ci95"] = monitored["ci95"]
            record["mean_abs"] = monitored["mean_abs"]
            record["mean_sq"] = monitored["mean_sq"]
        if config.log_every > 0 and (step % config.log_every == 0 or is_last):
            logger.info(
                "step %d loss %.6e lr %.3e grad_norm %s log_z %s",
                step,
                loss_value,
                record["lr"],
                "n/a" if grad_norm is None else f"{grad_norm:.3e}",
                "n/a" if record["log_z"] is None else f"{record['log_z']:.4f}",
            )
        if metrics is not None:
            metrics(record)

    result.checkpoint = to_checkpoint(config, problem, states)
    return result
