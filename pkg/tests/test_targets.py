import math

import numpy as np
import pytest
import torch
from scipy import integrate, stats

from errors import ConfigurationError, KindMismatchError
from numerics import DTYPE, derive_generator
from schedules import ScalingFunctions, make_schedule
from targets import (
    TARGET_IDS,
    TerminalSegment,
    double_well_quadrature,
    double_well_target,
    funnel_target,
    gaussian_target,
    gmm_target,
    make_target,
    mixture_targets,
    shift_target,
    spin_glass_coupling,
    terminal_u_half,
    terminal_v_full,
)

pytestmark = pytest.mark.unit

SMALL_PARAMS = {
    "gmm": {},
    "funnel": {"d": 4, "scale": 1.5},
    "double_well": {"d": 5, "w": 2, "delta": 2.0},
    "spin_glass": {"d": 6, "beta": 0.8, "seed": 1},
    "mog": {"d": 3, "seed": 2, "n_components": 4},
    "mos": {"d": 3, "seed": 2, "n_components": 4},
    "gaussian": {"d": 3, "scale": 0.7},
    "rings": {},
}


def _finite_difference_grad(fn, x, h=1e-5):
    columns = []
    for i in range(x.shape[1]):
        step = torch.zeros_like(x)
        step[:, i] = h
        columns.append((fn(x + step) - fn(x - step)) / (2 * h))
    return torch.stack(columns, dim=1)


@pytest.mark.parametrize("target_id", TARGET_IDS)
def test_gradient_matches_finite_differences(target_id):
    """Every target's grad log pi_hat matches central differences."""
    target = make_target(target_id, **SMALL_PARAMS[target_id])
    gen = torch.Generator().manual_seed(7)
    x = 2.0 * torch.randn(100, target.d, generator=gen, dtype=DTYPE)
    if target_id == "funnel":
        x[:, 0] = x[:, 0].clamp(-2.0, 2.0)
    if target_id == "rings":
        x = x + 0.5 * torch.sign(x)

    exact = target.grad_log_pi_hat(x)
    fd = _finite_difference_grad(target.log_pi_hat, x)

    relative = (fd - exact).norm(dim=1) / exact.norm(dim=1).clamp_min(1.0)
    assert float(relative.max()) <= 1e-5


def test_registry_covers_all_targets():
    assert set(TARGET_IDS) == {"gmm", "funnel", "double_well", "spin_glass", "mog", "mos", "gaussian", "rings"}


def test_unknown_target_and_bad_parameters():
    with pytest.raises(ConfigurationError):
        make_target("banana")
    with pytest.raises(ConfigurationError):
        make_target("gaussian", dims=3)
    with pytest.raises(ConfigurationError):
        make_target("double_well", d=3, w=4, delta=1.0)
    with pytest.raises(ConfigurationError):
        mixture_targets("cauchy", d=2, seed=0)


def test_gaussian_log_density_is_normalized():
    target = gaussian_target(d=3, scale=0.7)
    x = torch.tensor([[0.1, -0.4, 1.2], [2.0, 0.0, -0.3]], dtype=DTYPE)
    expected = stats.multivariate_normal(mean=np.zeros(3), cov=0.49 * np.eye(3)).logpdf(x.numpy())

    np.testing.assert_allclose(target.log_pi_hat(x).numpy(), expected, rtol=1e-12)
    assert target.true_log_z == 0.0


def test_gmm_log_density_matches_scipy_mixture():
    """The GMM density agrees with a scipy mixture of the same components."""
    target = gmm_target()
    x = torch.tensor([[0.3, 4.1], [-5.2, 5.5], [2.5, -2.5]], dtype=DTYPE)
    means = target.component_means.numpy()
    component = np.stack(
        [stats.multivariate_normal(mean=m, cov=0.3 * np.eye(2)).logpdf(x.numpy()) for m in means], axis=1
    )
    expected = np.log(np.exp(component).mean(axis=1))

    np.testing.assert_allclose(target.log_pi_hat(x).numpy(), expected, rtol=1e-10)
    assert means.shape == (9, 2)


def test_gmm_moments_match_exact_samples():
    target = gmm_target()
    samples = target.exact_sampler(200000, derive_generator(0, "exact"))

    assert target.true_moments["mean_sq"] == pytest.approx(2 * 50 / 3 + 0.6)
    assert float(samples.abs().sum(dim=1).mean()) == pytest.approx(target.true_moments["mean_abs"], rel=0.01)
    assert float((samples * samples).sum(dim=1).mean()) == pytest.approx(target.true_moments["mean_sq"], rel=0.01)


def test_funnel_density_factorizes():
    target = funnel_target(d=3, scale=3.0)
    x = torch.tensor([[0.5, -0.2, 1.1]], dtype=DTYPE)
    x1 = 0.5
    expected = stats.norm(0, 3.0).logpdf(x1) + stats.norm(0, math.exp(x1 / 2)).logpdf([-0.2, 1.1]).sum()

    assert float(target.log_pi_hat(x)) == pytest.approx(expected, rel=1e-12)
    assert target.true_moments["mean_sq"] == pytest.approx(9.0 + 2 * math.exp(4.5))


def test_student_mixture_component_is_a_t2_product():
    target = mixture_targets("student", d=3, seed=4, n_components=1)
    y = torch.tensor([[0.3, -1.0, 2.5]], dtype=DTYPE)
    x = target.component_means + y

    expected = stats.t(df=2).logpdf(y.numpy()).sum()

    assert float(target.log_pi_hat(x)) == pytest.approx(expected, rel=1e-12)
    assert target.true_moments is None


def test_mixture_means_are_reproducible():
    first = mixture_targets("gauss", d=4, seed=9)
    second = make_target("mog", d=4, seed=9)

    assert torch.equal(first.component_means, second.component_means)
    assert float(first.component_means.abs().max()) <= 10.0


def test_double_well_quadrature_against_trapezoid():
    grid = np.linspace(-6, 6, 200001)
    pdf = np.exp(-((grid**2 - 2.0) ** 2))
    z1 = integrate.trapezoid(pdf, grid)

    quad = double_well_quadrature(2.0)

    assert quad["z1"] == pytest.approx(z1, rel=1e-8)
    assert quad["mean_sq"] == pytest.approx(integrate.trapezoid(grid**2 * pdf, grid) / z1, rel=1e-8)


@pytest.mark.parametrize(
    "params, mean_abs, mean_sq",
    [({"d": 10, "w": 3, "delta": 2.0}, 9.54, 12.51), ({"d": 20, "w": 5, "delta": 3.0}, 20.42, 29.54)],
)
def test_double_well_ground_truth(params, mean_abs, mean_sq):
    """Quadrature moments of the double well match the published truth."""
    target = double_well_target(**params)

    assert target.true_moments["mean_abs"] == pytest.approx(mean_abs, abs=0.02)
    assert target.true_moments["mean_sq"] == pytest.approx(mean_sq, abs=0.02)


def test_double_well_exact_sampler_matches_moments():
    target = double_well_target(d=4, w=2, delta=2.0)
    samples = target.exact_sampler(100000, derive_generator(1, "exact"))

    assert float(samples.abs().sum(dim=1).mean()) == pytest.approx(target.true_moments["mean_abs"], rel=0.01)
    assert float((samples * samples).sum(dim=1).mean()) == pytest.approx(target.true_moments["mean_sq"], rel=0.01)


def test_double_well_log_z_single_well():
    target = double_well_target(d=1, w=1, delta=1.0)

    assert target.true_log_z == pytest.approx(math.log(double_well_quadrature(1.0)["z1"]))


def test_spin_glass_coupling_is_symmetric_and_seeded():
    A = spin_glass_coupling(8, seed=3)

    assert torch.equal(A, A.T)
    assert torch.equal(A, spin_glass_coupling(8, seed=3))
    assert not torch.equal(A, spin_glass_coupling(8, seed=4))


def test_spin_glass_at_zero_beta_is_standard_gaussian():
    target = make_target("spin_glass", d=5, beta=0.0, seed=0)
    x = torch.tensor([[1.0, 0.0, -1.0, 0.5, 0.0]], dtype=DTYPE)

    assert float(target.log_pi_hat(x)) == pytest.approx(-0.5 * 2.25)
    assert target.true_log_z == pytest.approx(2.5 * math.log(2 * math.pi))
    assert make_target("spin_glass", d=5, beta=0.5, seed=0).true_log_z is None


def test_shift_target_moves_log_z_exactly():
    target = gaussian_target(d=2)
    shifted = shift_target(target, 1.7)
    x = torch.tensor([[0.2, 0.3]], dtype=DTYPE)

    assert float(shifted.log_pi_hat(x) - target.log_pi_hat(x)) == pytest.approx(1.7)
    assert shifted.true_log_z == pytest.approx(1.7)
    assert torch.equal(shifted.grad_log_pi_hat(x), target.grad_log_pi_hat(x))


def test_rings_has_no_ground_truth():
    target = make_target("rings")

    assert target.d == 2
    assert target.true_log_z is None
    assert target.exact_sampler is None


def test_terminal_condition_gradients_are_exact():
    """Terminal grad_phi agrees with finite differences of phi."""
    target = gmm_target()
    gen = torch.Generator().manual_seed(2)
    x = 3.0 * torch.randn(50, 2, generator=gen, dtype=DTYPE)
    half = terminal_u_half(target, make_schedule("follmer_half"), ScalingFunctions())
    full = terminal_v_full(target, make_schedule("trig_full"), ScalingFunctions(alpha_id="g"))

    for terminal in (half, full):
        fd = _finite_difference_grad(terminal.phi, x)
        exact = terminal.grad_phi(x)
        assert float(((fd - exact).norm(dim=1) / exact.norm(dim=1).clamp_min(1.0)).max()) <= 1e-5

    assert half.segment is TerminalSegment.U_HALF
    assert full.segment is TerminalSegment.V_FULL_AT_T


def test_terminal_conditions_check_kind():
    target = gaussian_target()

    with pytest.raises(KindMismatchError):
        terminal_u_half(target, make_schedule("trig_full"), ScalingFunctions())
    with pytest.raises(KindMismatchError):
        terminal_v_full(target, make_schedule("linear_half"), ScalingFunctions())


@pytest.mark.parametrize(
    "target_id, params, box",
    [
        ("gaussian", {"d": 2, "scale": 1.3}, 9.0),
        ("gmm", {}, 9.0),
        ("double_well", {"d": 2, "w": 1, "delta": 2.0}, 5.0),
    ],
)
def test_density_integrates_to_its_normalization(target_id, params, box):
    """Integrating exp(log pi_hat) over a box recovers log Z."""
    target = make_target(target_id, **params)
    axis = np.linspace(-box, box, 801)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    points = torch.as_tensor(np.stack([gx.ravel(), gy.ravel()], axis=1), dtype=DTYPE)
    density = np.exp(target.log_pi_hat(points).numpy()).reshape(801, 801)

    mass = integrate.trapezoid(integrate.trapezoid(density, axis, axis=1), axis)

    assert math.log(mass) == pytest.approx(target.true_log_z, abs=1e-3)
