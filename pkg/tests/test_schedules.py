import math

import pytest
import torch

from errors import ConfigurationError, DomainError, KindMismatchError, ScheduleViolationError, SingularReferenceError
from numerics import DTYPE
from schedules import (
    PRESETS,
    InterpolantSchedule,
    ScalingFunctions,
    ScheduleKind,
    drift_b_from_grad_u,
    drift_b_from_grad_v,
    log_psi,
    make_schedule,
    mu_u,
    mu_v,
    require_kind,
    score_s_from_grad_u,
    score_s_from_grad_v,
    sigma_sq_u,
    sigma_sq_v,
)

pytestmark = pytest.mark.unit

DEFAULT = ScalingFunctions()


def _grid(start, end, n=1000):
    return torch.linspace(start, end, n, dtype=DTYPE)


def test_trig_full_boundary_values():
    s = make_schedule("trig_full", T=1.0, T_split=0.5)

    assert s.kind is ScheduleKind.FULL
    assert float(s.g(torch.tensor(0.0, dtype=DTYPE))) == 0.0
    assert float(s.g(torch.tensor(1.0, dtype=DTYPE))) == pytest.approx(1.0)
    assert float(s.r(torch.tensor(1.0, dtype=DTYPE))) == pytest.approx(0.0, abs=1e-15)


def test_trig_full_midpoint_values():
    s = make_schedule("trig_full")
    t = torch.tensor(0.5, dtype=DTYPE)

    assert float(s.g(t)) == pytest.approx(math.sqrt(2) / 2)
    assert float(s.r(t)) == pytest.approx(math.sqrt(2) / 2)
    assert float(s.g_dot(t)) == pytest.approx(math.pi * math.sqrt(2) / 4)
    assert float(s.r_dot(t)) == pytest.approx(-math.pi * math.sqrt(2) / 4)


@pytest.mark.parametrize("preset_id", sorted(PRESETS))
def test_derivatives_match_finite_differences(preset_id):
    """Each preset's g_dot and r_dot agree with central differences of g and r."""
    s = make_schedule(preset_id, T=2.0, T_split=1.0)
    t = _grid(0.05, 1.95, 200)
    h = 1e-6

    for fn, dot in ((s.g, s.g_dot), (s.r, s.r_dot)):
        fd = (fn(t + h) - fn(t - h)) / (2 * h)
        exact = dot(t)
        scale = exact.abs().clamp_min(1.0)
        assert float(((fd - exact).abs() / scale).max()) <= 1e-6


@pytest.mark.parametrize("preset_id", sorted(PRESETS))
@pytest.mark.parametrize("beta_id", ["r_over_g", "one"])
def test_diffusion_coefficients_are_non_negative(preset_id, beta_id):
    """sigma^2 of both PDEs stays non-negative on the whole grid."""
    s = make_schedule(preset_id)
    sc = ScalingFunctions(beta_id=beta_id)
    start = 0.0 if beta_id == "r_over_g" else s.eta

    u_values = sigma_sq_u(s, sc, _grid(start, s.u_end))

    assert bool(torch.isfinite(u_values).all())
    assert float(u_values.min()) >= 0.0
    if s.kind is ScheduleKind.FULL:
        v_values = sigma_sq_v(s, sc, _grid(s.T_split, s.T))
        assert bool(torch.isfinite(v_values).all())
        assert float(v_values.min()) >= 0.0


def test_sigma_sq_u_examples():
    trig = make_schedule("trig_full")
    linear = make_schedule("linear_half")

    assert float(sigma_sq_u(trig, DEFAULT, 0.5)) == pytest.approx(math.pi)
    assert float(sigma_sq_u(trig, DEFAULT, 0.0)) == pytest.approx(0.0, abs=1e-15)
    assert float(sigma_sq_u(linear, DEFAULT, 0.5)) == pytest.approx(1.0)


def test_sigma_sq_u_unit_beta_matches_general_formula():
    s = make_schedule("follmer_half")
    sc = ScalingFunctions(beta_id="one")
    t = torch.tensor(0.3, dtype=DTYPE)
    expected = 2 * s.r(t) ** 2 * (s.g_dot(t) / s.g(t) - s.r_dot(t) / s.r(t))

    assert float(sigma_sq_u(s, sc, t)) == pytest.approx(float(expected))


def test_mu_u_examples():
    trig = make_schedule("trig_full")
    x = torch.tensor([[1.0, 0.0]], dtype=DTYPE)

    torch.testing.assert_close(mu_u(trig, DEFAULT, 0.5, x), torch.tensor([[-math.pi / 2, 0.0]], dtype=DTYPE))
    assert float(mu_u(make_schedule("sine_half"), DEFAULT, 0.4, x).abs().max()) == 0.0
    assert float(mu_u(trig, DEFAULT, 0.3, torch.zeros(1, 2, dtype=DTYPE)).abs().max()) == 0.0


def test_v_coefficients():
    trig = make_schedule("trig_full")
    x = torch.tensor([[0.0, 0.0]], dtype=DTYPE)

    assert float(sigma_sq_v(trig, DEFAULT, 0.5)) == pytest.approx(math.pi)
    assert float(sigma_sq_v(trig, DEFAULT, 1.0)) < 1e-3
    assert float(mu_v(trig, DEFAULT, 0.7, x).abs().max()) == 0.0


def test_v_time_beyond_horizon_raises():
    with pytest.raises(DomainError):
        sigma_sq_v(make_schedule("trig_full"), DEFAULT, 1.5)


def test_drift_and_score_from_grad_u_example():
    s = make_schedule("linear_half")
    x = torch.tensor([[1.0]], dtype=DTYPE)
    grad = torch.tensor([[0.5]], dtype=DTYPE)

    assert float(drift_b_from_grad_u(s, DEFAULT, 0.5, x, grad)) == pytest.approx(0.5)
    assert float(score_s_from_grad_u(s, DEFAULT, 0.5, x, grad)) == pytest.approx(-0.75)


def test_gaussian_case_has_zero_drift_for_constant_r():
    s = make_schedule("sine_half")
    x = torch.tensor([[0.3, -1.2]], dtype=DTYPE)
    zero = torch.zeros_like(x)

    assert float(drift_b_from_grad_u(s, DEFAULT, 0.6, x, zero).abs().max()) == 0.0
    torch.testing.assert_close(score_s_from_grad_u(s, DEFAULT, 0.6, x, zero), -x)


def test_score_identity_with_posterior_mean():
    s = make_schedule("trig_full")
    gen = torch.Generator().manual_seed(3)
    t = 0.05 + 0.4 * torch.rand(64, generator=gen, dtype=DTYPE)
    x = torch.randn(64, 3, generator=gen, dtype=DTYPE)
    grad = torch.randn(64, 3, generator=gen, dtype=DTYPE)
    g, r = s.g(t).unsqueeze(1), s.r(t).unsqueeze(1)
    beta = DEFAULT.beta(s, t).unsqueeze(1)
    posterior_mean = r * r / (beta * g) * grad

    score = score_s_from_grad_u(s, DEFAULT, t, x, grad)

    torch.testing.assert_close(g * posterior_mean - x, r * r * score)


def test_two_drift_forms_agree():
    """The r-based and g-based drift formulas agree for any posterior mean."""
    s = make_schedule("trig_full")
    gen = torch.Generator().manual_seed(11)
    t = 0.01 + 0.98 * torch.rand(256, generator=gen, dtype=DTYPE)
    x = torch.randn(256, 4, generator=gen, dtype=DTYPE)
    E = torch.randn(256, 4, generator=gen, dtype=DTYPE)
    g, g_dot, r, r_dot = (fn(t).unsqueeze(1) for fn in (s.g, s.g_dot, s.r, s.r_dot))

    score = (g * E - x) / (r * r)
    first = r_dot / r * x + (g_dot - g * r_dot / r) * E
    second = g_dot / g * x + (r * r * g_dot / g - r_dot * r) * score

    relative = (first - second).norm(dim=1) / first.norm(dim=1)
    assert float(relative.max()) <= 1e-10


def test_drift_from_grad_u_matches_posterior_mean_form():
    s = make_schedule("trig_full")
    t = torch.full((5,), 0.35, dtype=DTYPE)
    gen = torch.Generator().manual_seed(5)
    x = torch.randn(5, 2, generator=gen, dtype=DTYPE)
    grad = torch.randn(5, 2, generator=gen, dtype=DTYPE)
    g, g_dot, r, r_dot = (fn(t).unsqueeze(1) for fn in (s.g, s.g_dot, s.r, s.r_dot))
    E = r * grad

    torch.testing.assert_close(
        drift_b_from_grad_u(s, DEFAULT, t, x, grad),
        r_dot / r * x + (g_dot - g * r_dot / r) * E,
    )


def test_drift_from_grad_v_examples():
    s = make_schedule("trig_full")
    x = torch.tensor([[1.0, -2.0]], dtype=DTYPE)
    t = torch.tensor(0.75, dtype=DTYPE)
    ratio = float(s.g_dot(t) / s.g(t))

    torch.testing.assert_close(drift_b_from_grad_v(s, DEFAULT, t, x, torch.zeros_like(x)), ratio * x)
    assert float(score_s_from_grad_v(s, DEFAULT, t, x, torch.zeros_like(x)).abs().max()) == 0.0

    w = torch.tensor([[0.4, 0.1]], dtype=DTYPE)
    gain = float(s.r(t) * (s.g_dot(t) / s.g(t) * s.r(t) - s.r_dot(t)))
    torch.testing.assert_close(drift_b_from_grad_v(s, DEFAULT, t, torch.zeros_like(x), w), gain * w)


def test_drift_from_grad_v_gain_vanishes_at_horizon():
    s = make_schedule("trig_full")
    x = torch.tensor([[1.0]], dtype=DTYPE)
    b = drift_b_from_grad_v(s, DEFAULT, 1.0, x, torch.ones_like(x))
    ratio = float(s.g_dot(torch.tensor(s.T - s.eta, dtype=DTYPE)) / s.g(torch.tensor(s.T - s.eta, dtype=DTYPE)))

    assert float(b) == pytest.approx(ratio, abs=1e-3)


def test_log_psi_examples():
    half = make_schedule("linear_half")
    follmer = make_schedule("follmer_half")

    assert float(log_psi(half, 0.5, torch.zeros(1, 2, dtype=DTYPE))) == pytest.approx(-math.log(2 * math.pi))
    assert float(log_psi(half, 0.5, torch.tensor([[1.0, 0.0]], dtype=DTYPE))) == pytest.approx(
        -math.log(2 * math.pi) - 0.5
    )
    # r = sqrt(3.95 + 0.05) = 2
    x = torch.tensor([[2.0, 0.0, 0.0, 0.0]], dtype=DTYPE)
    assert float(log_psi(follmer, 3.95, x)) == pytest.approx(-2 * math.log(8 * math.pi) - 0.5)


def test_log_psi_singular_reference():
    with pytest.raises(SingularReferenceError):
        log_psi(make_schedule("linear_full"), 1.0, torch.zeros(1, 2, dtype=DTYPE))


def test_unknown_preset_and_bad_split():
    with pytest.raises(ConfigurationError):
        make_schedule("cosine_full")
    with pytest.raises(ConfigurationError):
        make_schedule("trig_full", T=1.0, T_split=1.0)
    with pytest.raises(ConfigurationError):
        make_schedule("linear_half", T=0.0)


def test_kind_mismatch():
    with pytest.raises(KindMismatchError):
        require_kind(make_schedule("trig_full"), ScheduleKind.HALF)


def test_unknown_scaling():
    with pytest.raises(ConfigurationError):
        ScalingFunctions(beta_id="sqrt")


def test_decreasing_ratio_is_a_schedule_violation():
    """A g/r ratio that decreases makes sigma^2 negative and is rejected."""
    bad = InterpolantSchedule(
        preset_id="bad",
        kind=ScheduleKind.HALF,
        T=1.0,
        T_split=None,
        g=lambda t: t,
        g_dot=lambda t: torch.ones_like(t),
        r=lambda t: torch.exp(2 * t),
        r_dot=lambda t: 2 * torch.exp(2 * t),
    )

    with pytest.raises(ScheduleViolationError):
        sigma_sq_u(bad, DEFAULT, 0.9)


def test_half_functions_can_drive_the_full_pipeline():
    """A half preset keeps its g, r pair but splits at T' like a full one."""
    s = make_schedule("sine_half", T_split=0.4, pipeline="full")

    assert s.kind is ScheduleKind.FULL
    assert s.function_kind is ScheduleKind.HALF
    assert s.T_split == 0.4
    assert s.u_end == 0.4
    torch.testing.assert_close(s.r(torch.tensor(1.0, dtype=DTYPE)), torch.tensor(1.0, dtype=DTYPE))


def test_pipeline_defaults_to_the_preset_kind():
    assert make_schedule("follmer_half").kind is ScheduleKind.HALF
    assert make_schedule("follmer_half", pipeline="half").T_split is None
    assert make_schedule("linear_full", pipeline="full").function_kind is ScheduleKind.FULL


def test_full_functions_cannot_drive_the_half_pipeline():
    with pytest.raises(KindMismatchError):
        make_schedule("trig_full", pipeline="half")


def test_pipeline_override_is_validated():
    with pytest.raises(ConfigurationError):
        make_schedule("linear_half", pipeline="both")
    with pytest.raises(ConfigurationError):
        make_schedule("linear_half", T_split=None, pipeline="full")


def test_half_functions_need_no_horizon_clamp_in_the_v_segment():
    """With r(T) > 0 the v coefficients are evaluated at T itself."""
    s = make_schedule("linear_half", pipeline="full")
    t = torch.tensor(1.0, dtype=DTYPE)

    # linear_half: g = t, r = 1, so the gain r ((g_dot/g) r - r_dot) is 1/t
    x = torch.tensor([[2.0]], dtype=DTYPE)
    b = drift_b_from_grad_v(s, DEFAULT, t, x, torch.ones_like(x))

    assert float(b) == pytest.approx(2.0 + 1.0, rel=1e-14)
    assert float(sigma_sq_v(s, DEFAULT, t)) == pytest.approx(2.0, rel=1e-14)
