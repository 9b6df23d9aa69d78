import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoreflow.errors import ConfigurationError, DomainError, ShapeError
from scoreflow.flow import ode_sample, velocity
from scoreflow.nn import ParamBundle
from scoreflow.sampler import (
    NO_CLIP,
    VARIANTS,
    ClipPolicy,
    ControlHeads,
    chain_entropy,
    sample_action,
    score_sde_step,
    scoreflow_step,
    trajectory_log_prob,
)
from scoreflow.score import VariancePredictor, alpha_scaled
from scoreflow.verify import small_policy


def const_bundle(out, in_dim, act="identity"):
    out = np.atleast_1d(np.asarray(out, dtype=np.float64))
    return ParamBundle([np.zeros((out.size, in_dim))], [out.copy()], (act,))


def const_heads(d, m, alpha, sigma_raw, lo=0.10, hi=0.24):
    sched = const_bundle(math.log(math.expm1(alpha)), 1, "softplus")
    var = VariancePredictor(const_bundle(sigma_raw, d + 1 + m), lo, hi)
    return ControlHeads(sched, var, None, 0.1)


def scalar_log_normal(x, mean, var):
    return -0.5 * math.log(2 * math.pi * var) - (x - mean) ** 2 / (2 * var)


def test_scoreflow_step_zero_alpha_zero_noise_is_euler():
    vel, heads, obs, _ = small_policy(0)
    a = np.array([0.4, -0.9])
    nxt, mean, _, _ = scoreflow_step(vel, None, heads.variance, a, 0.25, obs[0], np.zeros(2), 0.25, alpha=0.0)
    want = a + velocity(vel, a, 0.25, obs[0]) * 0.25
    assert np.array_equal(nxt, want) and np.array_equal(mean, want)


def test_step_log_prob_at_mean():
    # raw pre-activation chosen so sigma is exactly 0.1 with bounds [0.05, 0.15]
    vel = const_bundle([0.3], 3)
    heads = const_heads(1, 1, 0.2, 0.0, lo=0.05, hi=0.15)
    _, _, std, lp = scoreflow_step(vel, heads.scheduler, heads.variance, [0.5], 0.0, [0.0], np.zeros(1), 0.25)
    assert std == pytest.approx(0.1, abs=1e-16)
    assert lp == pytest.approx(-0.5 * math.log(2 * math.pi * 0.0025), abs=1e-12)
    # closed form evaluates to 2.076794 (the commonly quoted 2.07676 is a rounding slip)
    assert lp == pytest.approx(2.076794, abs=1e-6)


def test_hand_step_at_last_grid_point():
    c, alpha, a, eps = 0.8, 0.3, 0.6, 1.5
    vel = const_bundle([c], 3)
    heads = const_heads(1, 1, alpha, 0.0)
    t, dt = 0.75, 0.25
    score = (t * c - a) / 0.25
    mean = a + (c + (1 - t) * alpha * score) * dt
    std = 0.17
    nxt_want = mean + std * 0.5 * eps
    nxt, mu, sig, lp = scoreflow_step(vel, heads.scheduler, heads.variance, [a], t, [0.0], np.array([eps]), dt)
    assert mu[0] == pytest.approx(mean, abs=1e-15)
    assert sig == pytest.approx(std, abs=1e-15)
    assert nxt[0] == pytest.approx(nxt_want, abs=1e-15)
    assert lp == pytest.approx(scalar_log_normal(nxt_want, mean, std ** 2 * dt), abs=1e-12)


def test_single_step_noise_only_without_noise():
    vel, heads, obs, _ = small_policy(1)
    a0 = np.array([[0.3, 0.1]])
    tr = sample_action(vel, heads, obs, 1, "noise_only", a0=a0, noise=np.zeros((1, 1, 2)))
    assert np.array_equal(tr.final[0], a0[0] + velocity(vel, a0[0], 0.0, obs[0]))


def test_scoreflow_minus_noise_only_first_step():
    vel, heads, obs, _ = small_policy(2)
    K = 4
    a = sample_action(vel, heads, obs, K, "scoreflow", seed=5)
    b = sample_action(vel, heads, obs, K, "noise_only", seed=5)
    a0 = a.actions[:, 0]
    assert np.array_equal(a0, b.actions[:, 0])
    np.testing.assert_array_equal(a.stds[:, 0], b.stds[:, 0])
    diff = a.actions[:, 1] - b.actions[:, 1]
    want = alpha_scaled(heads.scheduler, 0.0) * (-a0) / K
    np.testing.assert_allclose(diff, want, rtol=0, atol=1e-15)


@pytest.mark.parametrize("variant", VARIANTS)
def test_same_seed_same_trajectory(variant):
    vel, heads, obs, _ = small_policy(3)
    obs = np.repeat(obs, 8, axis=0)
    a = sample_action(vel, heads, obs, 4, variant, ClipPolicy(), seed=11)
    b = sample_action(vel, heads, obs, 4, variant, ClipPolicy(), seed=11)
    for name in ("actions", "raw", "means", "stds", "noise", "drift_coef", "log_prob"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


@pytest.mark.parametrize("variant", VARIANTS)
def test_recomputed_log_prob(variant):
    vel, heads, obs, rng = small_policy(4)
    obs = rng.standard_normal((50, 3))
    tr = sample_action(vel, heads, obs, 4, variant, ClipPolicy(3.0, 1.0, True), seed=2)
    np.testing.assert_allclose(trajectory_log_prob(vel, heads, obs, tr), tr.log_prob, rtol=0, atol=1e-9)


def test_log_prob_drops_when_sigma_raised_at_mean():
    vel, heads, obs, _ = small_policy(5)
    tr = sample_action(vel, heads, obs, 4, "scoreflow", seed=0)
    tr.raw[:] = tr.means
    tr.actions[:, 1:] = tr.raw
    base = trajectory_log_prob(vel, heads, obs, tr)
    p = heads.variance.params
    bumped = p.copy()
    bumped.biases[-1] += 0.5
    up = ControlHeads(heads.scheduler, VariancePredictor(bumped, 0.1, 0.24), heads.coupling, heads.lambda_max)
    assert np.all(trajectory_log_prob(vel, up, obs, tr) < base)


def test_two_dim_two_step_chain_against_scalar_densities():
    c = np.array([0.5, -0.25])
    vel = const_bundle(c, 4)
    heads = const_heads(2, 1, 0.4, 0.3)
    a0 = np.array([[0.2, -0.7]])
    eps = np.array([[[0.3, -1.2], [0.8, 0.1]]])
    tr = sample_action(vel, heads, np.zeros((1, 1)), 2, "scoreflow", a0=a0, noise=eps)
    std = 0.10 + 0.07 * (math.tanh(0.3) + 1)
    dt = 0.5
    a = a0[0].copy()
    total = 0.0
    for k in range(2):
        t = k / 2
        mean = a + (c + (1 - t) * 0.4 * (t * c - a) / (1 - t)) * dt
        x = mean + std * math.sqrt(dt) * eps[0, k]
        total += sum(scalar_log_normal(x[i], mean[i], std * std * dt) for i in range(2))
        a = x
    assert tr.log_prob[0] == pytest.approx(total, abs=1e-12)
    assert trajectory_log_prob(vel, heads, np.zeros((1, 1)), tr)[0] == pytest.approx(total, abs=1e-12)


def test_score_sde_step_lambda_zero_and_half():
    vel, _, obs, _ = small_policy(6)
    a = np.array([0.1, 0.2])
    eps = np.array([0.7, -0.3])
    nxt, mean, std, lp = score_sde_step(vel, 0.0, a, 0.5, obs[0], eps, 0.25)
    assert std == 0.0 and lp == 0.0
    assert np.array_equal(nxt, a + velocity(vel, a, 0.5, obs[0]) * 0.25)
    assert score_sde_step(vel, 0.5, a, 0.5, obs[0], eps, 0.25)[2] == 1.0
    with pytest.raises(DomainError):
        score_sde_step(vel, -0.1, a, 0.5, obs[0], eps, 0.25)


@pytest.mark.parametrize("K", [1, 3, 4])
def test_noise_only_without_noise_equals_ode(K):
    vel, heads, obs, _ = small_policy(7)
    a0 = np.array([[0.6, -0.2]])
    tr = sample_action(vel, heads, obs, K, "noise_only", a0=a0, noise=np.zeros((1, K, 2)))
    assert tr.final[0].tobytes() == ode_sample(vel, obs[0], K, a0=a0[0]).tobytes()


@pytest.mark.parametrize("variant", ["score_sde_coupled", "coupled_learned"])
def test_coupled_variance_matches_drift_weight(variant):
    vel, heads, obs, rng = small_policy(8)
    obs = rng.standard_normal((40, 3))
    tr = sample_action(vel, heads, obs, 4, variant, seed=1)
    assert np.array_equal(tr.stds ** 2, 2 * tr.drift_coef)


def test_clipping_applies_after_log_prob():
    vel = const_bundle([10.0, -10.0], 4)
    heads = const_heads(2, 1, 0.2, 0.0)
    tr = sample_action(vel, heads, np.zeros((1, 1)), 2, "noise_only", ClipPolicy(3.0, 1.0, True), seed=0)
    assert np.all(np.abs(tr.final) <= 1.0)
    assert np.all(np.abs(tr.raw[:, -1]) > 1.0)
    np.testing.assert_allclose(trajectory_log_prob(vel, heads, np.zeros((1, 1)), tr), tr.log_prob, atol=1e-9)


def test_chain_entropy_values():
    assert chain_entropy(np.full(4, 0.1), 1, 0.25) == pytest.approx(4 * 0.5 * math.log(2 * math.pi * math.e * 0.0025))
    assert chain_entropy(np.full(4, 0.1), 1, 0.25) == pytest.approx(-6.307175, abs=1e-6)
    assert chain_entropy(np.zeros(0), 2, 0.25) == 0.0


@settings(max_examples=50)
@given(st.lists(st.floats(1e-3, 10.0), min_size=1, max_size=6), st.integers(1, 4))
def test_chain_entropy_doubling_adds_log2(stds, d):
    s = np.array(stds)
    gain = chain_entropy(2 * s, d, 0.25) - chain_entropy(s, d, 0.25)
    assert gain == pytest.approx(len(stds) * d * math.log(2), rel=1e-12, abs=1e-12)


def test_sampler_errors():
    vel, heads, obs, _ = small_policy(9)
    with pytest.raises(DomainError):
        sample_action(vel, heads, obs, 0)
    with pytest.raises(ConfigurationError):
        sample_action(vel, heads, obs, 2, "nonsense")
    with pytest.raises(ConfigurationError):
        sample_action(vel, ControlHeads(None, heads.variance), obs, 2, "scoreflow")
    tr = sample_action(vel, heads, np.repeat(obs, 3, axis=0), 2)
    with pytest.raises(ShapeError):
        trajectory_log_prob(vel, heads, np.zeros((2, 3)), tr)
    with pytest.raises(ConfigurationError):
        ClipPolicy(1.0, 3.0)
