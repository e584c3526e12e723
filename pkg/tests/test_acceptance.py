"""Full-scale reproduction checks. Opt-in: ``python run_tests.py acceptance``."""
import dataclasses

import pytest
import torch

from estimators import empirical_moments, mode_coverage
from fbsde_train import TrainConfig, draw_samples, estimate_log_z, evaluation_fields, path_ode_step_half, train
from numerics import DTYPE, as_time, derive_generator, standard_normal
from oracles import GaussianUField
from sampler import SamplerConfig, langevin_baseline

pytestmark = pytest.mark.acceptance

GMM_FULL = TrainConfig(target_id="gmm", preset_id="trig_full", steps=10000, monitor_every=1000)


def _ema_fields(result):
    nets = {name: state.net for name, state in result.states.items()}
    return evaluation_fields(result.problem, nets, {name: state.ema_theta for name, state in result.states.items()})


def _moments(samples):
    return {name: record.value for name, record in empirical_moments(samples).items()}


@pytest.fixture(scope="module")
def gmm_run():
    return train(GMM_FULL)


def test_gaussian_gradient_and_log_z():
    config = TrainConfig(
        target_id="gaussian",
        target_params={"d": 2, "scale": 1.5},
        preset_id="linear_half",
        T_split=None,
        steps=2000,
        monitor_every=0,
    )
    result = train(config)
    problem = result.problem
    s, sc = problem.schedule, problem.scaling
    fields = _ema_fields(result)
    oracle = GaussianUField(s, sc, d=2, scale=1.5)

    n_steps = 100
    X = float(s.r(torch.as_tensor(0.0, dtype=DTYPE))) * standard_normal((512, 2), derive_generator(0, "sample"))
    errors, norms = [], []
    for i in range(n_steps):
        t = i * s.T / n_steps
        if t >= 0.05:
            x = X * sc.inv_beta(s, as_time(t, X.shape[0])).unsqueeze(1)
            learned, exact = fields.u.grad_x(t, x), oracle.grad_x(t, x)
            errors.append((learned - exact).norm(dim=1))
            norms.append(exact.norm(dim=1))
        X = path_ode_step_half(fields.u, s, sc, t, X, s.T / n_steps)

    relative = float(torch.cat(errors).mean() / torch.cat(norms).mean())
    log_z = estimate_log_z(problem, fields, 1000, 1000, derive_generator(0, "estimate"))

    assert relative <= 0.05
    assert abs(log_z.value) <= 0.1


def test_gmm_smoke_run_covers_all_modes():
    result = train(dataclasses.replace(GMM_FULL, steps=2000))
    batch = draw_samples(result.problem, _ema_fields(result), SamplerConfig(), derive_generator(0, "sample"))

    shares = mode_coverage(batch.finite, result.problem.target.component_means)

    assert int((shares >= 0.02).sum()) == 9


def test_gmm_full_run(gmm_run):
    fields = _ema_fields(gmm_run)
    batch = draw_samples(gmm_run.problem, fields, SamplerConfig(), derive_generator(0, "sample"))
    moments = _moments(batch.finite)
    log_z = estimate_log_z(gmm_run.problem, fields, 1000, 1000, derive_generator(0, "estimate"))
    shares = mode_coverage(batch.finite, gmm_run.problem.target.component_means)

    assert -0.50 <= log_z.value <= -0.05
    assert 5.0 <= moments["mean_abs"] <= 7.5
    assert 24.0 <= moments["mean_sq"] <= 36.0
    assert int((shares >= 0.02).sum()) == 9
    assert batch.failure_fraction <= 0.01


def test_ten_step_sampler_beats_ten_step_langevin(gmm_run):
    lmc = langevin_baseline(gmm_run.problem.target, 0.1, 10, 10000, derive_generator(0, "langevin"))
    batch = draw_samples(
        gmm_run.problem, _ema_fields(gmm_run), SamplerConfig(n_steps=10), derive_generator(0, "sample")
    )

    assert _moments(lmc.finite)["mean_abs"] <= 2.0
    assert _moments(batch.finite)["mean_abs"] >= 4.5


def test_double_well_d10():
    config = TrainConfig(target_id="double_well", target_params={"d": 10, "w": 3, "delta": 2.0}, monitor_every=0)
    result = train(config)
    batch = draw_samples(result.problem, _ema_fields(result), SamplerConfig(), derive_generator(0, "sample"))
    moments = _moments(batch.finite)
    truth = result.problem.target.true_moments

    assert abs(moments["mean_abs"] - truth["mean_abs"]) <= 0.7
    assert abs(moments["mean_sq"] - truth["mean_sq"]) <= 1.5


def test_spin_glass_transition():
    d = 32
    free_energy = {}
    for beta in (0.25, 0.5, 0.75, 1.5):
        config = TrainConfig(target_id="spin_glass", target_params={"d": d, "beta": beta, "seed": 0}, monitor_every=0)
        result = train(config)
        record = estimate_log_z(result.problem, _ema_fields(result), 1000, 1000, derive_generator(0, "estimate"))
        # relative to the standard Gaussian normalization
        free_energy[beta] = (record.value - 0.5 * d * torch.log(torch.tensor(2 * torch.pi, dtype=DTYPE)).item()) / d

    for beta in (0.25, 0.5, 0.75):
        assert abs(free_energy[beta]) <= 0.1
    assert free_energy[1.5] < free_energy[0.5] - 0.05
