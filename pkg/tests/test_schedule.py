from fractions import Fraction

import numpy as np
import pytest

from demorph._validation import ConfigurationError
from demorph.schedule import (
    NoiseDraw,
    NoiseSchedule,
    build_linear_schedule,
    forward_step,
    posterior_coefficients,
    posterior_params,
    q_sample,
    q_sample_batch,
    reverse_step,
)


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule()


def exact_alpha_bars(T=300, start=Fraction(1, 10000), end=Fraction(2, 100)):
    out, p = [], Fraction(1)
    for i in range(T):
        p *= 1 - (start + i * (end - start) / (T - 1))
        out.append(p)
    return out


def test_betas_endpoints_and_monotone(sched):
    assert sched.T == 300
    assert sched.betas[0] == 1e-4
    assert sched.betas[-1] == 0.02
    assert np.all(np.diff(sched.betas) > 0)


def test_alpha_bar_matches_exact_product(sched):
    exact = exact_alpha_bars()
    err = max(abs(float(e) - a) for e, a in zip(exact, sched.alpha_bars))
    assert err < 1e-12


def test_alpha_bar_strictly_decreasing(sched):
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.alpha_bar(0) == 1.0


def test_single_step_schedule():
    s = NoiseSchedule.from_betas([0.3])
    assert s.alpha_bars[0] == pytest.approx(0.7)
    assert s.tilde_betas[0] == 0.3


def test_zero_beta_keeps_identity():
    s = NoiseSchedule.from_betas([0.0, 0.0, 0.1])
    x = np.random.default_rng(0).random((4, 4))
    eps = NoiseDraw.from_seed(1, x.shape)
    np.testing.assert_array_equal(q_sample(x, 2, eps, s), x)


def test_tilde_beta_formula(sched):
    t = 100
    ab, ab_prev, beta = sched.alpha_bars[t - 1], sched.alpha_bars[t - 2], sched.betas[t - 1]
    assert sched.tilde_betas[t - 1] == pytest.approx((1 - ab_prev) / (1 - ab) * beta, rel=1e-14)
    assert np.all(sched.tilde_betas <= sched.betas + 1e-18)


def test_invalid_schedules():
    with pytest.raises(ConfigurationError):
        build_linear_schedule(T=1)
    with pytest.raises(ConfigurationError):
        NoiseSchedule.from_betas([0.1, 1.0])
    with pytest.raises(ConfigurationError):
        build_linear_schedule(beta_start=0.03, beta_end=0.02)


def test_step_bounds(sched):
    x = np.zeros((2, 2))
    with pytest.raises(IndexError):
        q_sample(x, 301, NoiseDraw.zeros(x.shape), sched)
    with pytest.raises(IndexError):
        forward_step(x, 0, NoiseDraw.zeros(x.shape), sched)


def test_noise_shape_mismatch(sched):
    with pytest.raises(ValueError):
        q_sample(np.zeros((3, 3)), 5, NoiseDraw.zeros((2, 2)), sched)


def test_q_sample_zero_noise_is_scaled_input(sched):
    x = np.random.default_rng(1).random((5, 5))
    out = q_sample(x, 150, NoiseDraw.zeros(x.shape), sched)
    np.testing.assert_allclose(out, np.sqrt(sched.alpha_bars[149]) * x, rtol=1e-15)


def test_q_sample_batch_agrees_with_scalar(sched):
    rng = np.random.default_rng(2)
    x = rng.random((4, 1, 3, 3))
    eps = rng.standard_normal(x.shape)
    ts = np.array([0, 1, 150, 300])
    got = q_sample_batch(x, ts, eps, sched)
    for k, t in enumerate(ts):
        want = q_sample(x[k], int(t), eps[k], sched)
        np.testing.assert_allclose(got[k], want, rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("t", [1, 50, 150, 300])
def test_chained_marginal_matches_closed_form(sched, t):
    n = 100_000
    rng = np.random.default_rng(t)
    x0 = 0.7
    x = np.full(n, x0)
    for s in range(1, t + 1):
        x = forward_step(x, s, rng.standard_normal(n), sched)
    ab = sched.alpha_bars[t - 1]
    mean, var = np.sqrt(ab) * x0, 1 - ab
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2.0 / (n - 1))
    assert abs(x.mean() - mean) < 4 * se_mean
    assert abs(x.var(ddof=1) - var) < 4 * se_var


def test_posterior_weights_sum_against_direct_formula(sched):
    t = 77
    c0, ct, var = posterior_coefficients(t, sched)
    ab, ab_prev = sched.alpha_bars[t - 1], sched.alpha_bars[t - 2]
    beta, alpha = sched.betas[t - 1], sched.alphas[t - 1]
    assert c0 == pytest.approx(np.sqrt(ab_prev) * beta / (1 - ab), rel=1e-14)
    assert ct == pytest.approx(np.sqrt(alpha) * (1 - ab_prev) / (1 - ab), rel=1e-14)
    assert var == sched.tilde_betas[t - 1]


def test_posterior_mean_is_bayes_optimal(sched):
    """Monte Carlo regression of x_{t-1} on (x0, x_t) recovers the posterior."""
    t, n = 40, 400_000
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-1, 1, n)
    ab_prev = sched.alpha_bars[t - 2]
    x_prev = np.sqrt(ab_prev) * x0 + np.sqrt(1 - ab_prev) * rng.standard_normal(n)
    x_t = forward_step(x_prev, t, rng.standard_normal(n), sched)
    A = np.stack([x0, x_t], axis=1)
    coef, *_ = np.linalg.lstsq(A, x_prev, rcond=None)
    c0, ct, var = posterior_coefficients(t, sched)
    np.testing.assert_allclose(coef, [c0, ct], atol=3e-3)
    resid = x_prev - A @ coef
    assert resid.var() == pytest.approx(var, rel=0.02)


def test_posterior_at_step_one(sched):
    x0 = np.ones((2, 2))
    mean, var = posterior_params(np.zeros((2, 2)), x0, 1, sched)
    np.testing.assert_array_equal(mean, x0)
    assert var == 0.0


def test_reverse_step_zero_noise_is_posterior_mean(sched):
    rng = np.random.default_rng(4)
    xt, x0 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    mean, _ = posterior_params(xt, x0, 120, sched)
    np.testing.assert_array_equal(reverse_step(xt, x0, 120, NoiseDraw.zeros(xt.shape), sched), mean)


def test_reverse_step_variance_switch():
    s_tilde = build_linear_schedule()
    s_beta = build_linear_schedule(reverse_variance="beta")
    xt, x0 = np.zeros((1, 1)), np.zeros((1, 1))
    eps = np.ones((1, 1))
    a = reverse_step(xt, x0, 10, eps, s_tilde)[0, 0]
    b = reverse_step(xt, x0, 10, eps, s_beta)[0, 0]
    assert a == pytest.approx(np.sqrt(s_tilde.tilde_betas[9]))
    assert b == pytest.approx(np.sqrt(s_beta.betas[9]))


def test_reverse_step_at_one_returns_estimate(sched):
    x0 = np.full((2, 2), 0.3)
    np.testing.assert_array_equal(reverse_step(np.zeros((2, 2)), x0, 1, NoiseDraw.from_seed(0, (2, 2)), sched), x0)


def test_csv_round_trip(sched):
    text = sched.to_csv()
    assert text.splitlines()[0] == "t,beta,alpha,alpha_bar,tilde_beta"
    back = NoiseSchedule.from_csv(text)
    np.testing.assert_array_equal(back.betas, sched.betas)
    np.testing.assert_array_equal(back.alpha_bars, sched.alpha_bars)


def test_noise_draw_is_seeded():
    a = NoiseDraw.from_seed(11, (3, 3)).eps
    b = NoiseDraw.from_seed(11, (3, 3)).eps
    np.testing.assert_array_equal(a, b)
    assert not a.flags.writeable
