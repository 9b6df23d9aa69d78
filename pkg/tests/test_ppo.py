import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoreflow.env import EnvConfig, PointMassEnv, collect_demos, env_step, scripted_action
from scoreflow.errors import ConfigurationError, ShapeError, UsageError
from scoreflow.finetune import collect_rollouts
from scoreflow.nn import ParamBundle, finite_diff_check
from scoreflow.ppo import (
    FlowPolicy,
    PPOConfig,
    RewardNormalizer,
    RolloutBatch,
    critic_loss,
    gae,
    init_critic,
    init_optimizers,
    normalize_advantages,
    ppo_surrogate,
    ppo_update,
)
from scoreflow.sampler import ClipPolicy, ControlHeads, sample_action
from scoreflow.score import VariancePredictor
from scoreflow.verify import small_policy


# -- environment -------------------------------------------------------------

def test_zero_action_keeps_position():
    env = PointMassEnv(EnvConfig(n_envs=3))
    obs = env.reset(0)
    pos, goal = env.position.copy(), env.goal.copy()
    nxt, r, done = env_step(env, np.zeros((3, 2)))
    assert np.array_equal(env.position, pos)
    np.testing.assert_allclose(r, -np.linalg.norm(pos - goal, axis=1))
    assert np.array_equal(nxt, obs)
    assert not done.any()


def test_reward_zero_at_goal():
    env = PointMassEnv(EnvConfig(n_envs=2))
    env.reset(1)
    env.position = env.goal.copy()
    _, r, _ = env.step(np.zeros((2, 2)))
    assert np.all(r == 0.0)


def test_reset_deterministic_and_seed_dependent():
    a, b = PointMassEnv(), PointMassEnv()
    assert np.array_equal(a.reset(4), b.reset(4))
    assert not np.array_equal(a.reset(4), b.reset(5))


def test_stepping_finished_episode_is_usage_error():
    env = PointMassEnv(EnvConfig(horizon=2, n_envs=1))
    with pytest.raises(UsageError):
        env.step([[0.0, 0.0]])
    env.reset(0)
    env.step([[0.0, 0.0]])
    _, _, done = env.step([[0.0, 0.0]])
    assert done.all()
    with pytest.raises(UsageError):
        env.step([[0.0, 0.0]])


def test_scripted_demos_are_suboptimal_and_bounded():
    cfg = EnvConfig()
    obs, act = collect_demos(cfg, 8, seed=0)
    assert obs.shape == (8 * cfg.horizon, 4) and act.shape == (8 * cfg.horizon, 2)
    assert np.all(np.abs(act) <= 1.0)
    clean = scripted_action(obs, cfg, gain=0.6, noise=0.0)
    assert np.max(np.abs(clean)) <= 0.6 + 1e-12


# -- GAE, surrogate, normalization ----------------------------------------------

def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal(6), rng.standard_normal(7)
    d = np.zeros(6)
    adv, ret = gae(r, v, d, 0.9, 0.0)
    np.testing.assert_allclose(adv, r + 0.9 * v[1:] - v[:-1], atol=1e-15)
    np.testing.assert_allclose(ret, adv + v[:-1])


def test_gae_hand_recursion():
    adv, _ = gae([1.0, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0], 1.0, 1.0)
    np.testing.assert_allclose(adv, [0.5, -0.5], atol=1e-15)


def test_gae_zero_rewards_zero_values():
    adv, ret = gae(np.zeros((5, 3)), np.zeros((6, 3)), np.zeros((5, 3)), 0.99, 0.95)
    assert not adv.any() and not ret.any()


def test_gae_done_cuts_bootstrap():
    adv, _ = gae([1.0, 1.0], [0.0, 0.0, 100.0], [0.0, 1.0], 0.9, 0.9)
    # step 1 is terminal: its bootstrap value (100) must be ignored
    assert adv[1] == 1.0
    assert adv[0] == pytest.approx(1.0 + 0.9 * 0.0 - 0.0 + 0.9 * 0.9 * 1.0)


def test_gae_shape_error():
    with pytest.raises(ShapeError):
        gae(np.zeros(3), np.zeros(3), np.zeros(3), 0.9, 0.9)


def test_surrogate_cases():
    assert ppo_surrogate(0.3, 0.3, 2.5, 0.01) == 2.5
    assert ppo_surrogate(math.log(1.5), 0.0, 1.0, 0.01) == pytest.approx(1.01)
    assert ppo_surrogate(math.log(0.5), 0.0, -1.0, 0.01) == pytest.approx(-0.99)


@settings(max_examples=100)
@given(st.floats(-3, 3), st.floats(-5, 5), st.floats(0.01, 0.5))
def test_surrogate_never_exceeds_unclipped(log_r, adv, eps):
    assert ppo_surrogate(log_r, 0.0, adv, eps) <= math.exp(log_r) * adv + 1e-12


@settings(max_examples=100)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200))
def test_advantage_normalization(adv):
    adv = np.array(adv)
    if adv.std() <= 1e-3:
        return
    out = normalize_advantages(adv)
    assert abs(out.mean()) < 1e-10
    assert abs(out.std() - 1.0) < 1e-10


@settings(max_examples=50)
@given(st.lists(st.lists(st.floats(-10, 10), min_size=4, max_size=4), min_size=1, max_size=10))
def test_reward_normalization_preserves_action_ranking(steps):
    norm = RewardNormalizer(4, 0.99)
    for r in steps:
        r = np.array(r)
        out = norm(r, np.zeros(4, dtype=bool))
        assert norm.scale() > 0
        np.testing.assert_allclose(out * norm.scale(), r, rtol=1e-12, atol=1e-12)
        assert np.argmax(out) == np.argmax(r)


def test_critic_loss_gradient():
    critic = init_critic(4, (8, 8), seed=0)
    rng = np.random.default_rng(0)
    obs, ret = rng.standard_normal((12, 4)), rng.standard_normal(12)
    assert finite_diff_check(lambda p: critic_loss(p, obs, ret, 0.5), critic) < 1e-4


def test_config_validation():
    with pytest.raises(ConfigurationError):
        PPOConfig(clip_eps=0.0)
    with pytest.raises(ConfigurationError):
        PPOConfig(update_epochs=0)


# -- ppo_update -----------------------------------------------------------------

@pytest.fixture
def rollout():
    vel, heads, _, _ = small_policy(0, d=2, m=4)
    policy = FlowPolicy(vel, heads, "scoreflow", 4, ClipPolicy())
    critic = init_critic(4, (8,), seed=0)
    cfg = PPOConfig(minibatch_size=16, bc_coef=0.0)
    batch, _ = collect_rollouts(policy, critic, EnvConfig(horizon=6, n_envs=8), 0, 0, cfg)
    return policy, critic, batch, cfg


def test_first_minibatch_ratio_is_one(rollout):
    policy, critic, batch, cfg = rollout
    res = ppo_update(batch, policy, critic, cfg, init_optimizers(policy, critic), 1e-3, 1e-3,
                     np.random.default_rng(0))
    assert abs(res.diagnostics["first_ratio_mean"] - 1.0) < 1e-6


def test_zero_advantages_leave_actor_untouched(rollout):
    policy, critic, batch, cfg = rollout
    batch = replace(batch, advantages=np.zeros(len(batch)))
    cfg = replace(cfg, entropy_coef=0.0, bc_coef=0.0)
    res = ppo_update(batch, policy, critic, cfg, init_optimizers(policy, critic), 1e-2, 1e-2,
                     np.random.default_rng(0))
    for k, p in policy.trainable().items():
        assert res.policy.trainable()[k].equals(p), k
    assert not res.critic.equals(critic)


@pytest.mark.parametrize("target", [1e-4, 1e-3, 1e-2])
def test_kl_early_stop_honoured(rollout, target):
    policy, critic, batch, cfg = rollout
    cfg = replace(cfg, target_kl=target, update_epochs=8)
    res = ppo_update(batch, policy, critic, cfg, init_optimizers(policy, critic), 3e-2, 1e-3,
                     np.random.default_rng(1))
    d = res.diagnostics
    kls = d["epoch_kl"]
    assert len(kls) == d["epochs_run"]
    assert all(k <= target for k in kls[:-1])
    if d["early_stopped"]:
        assert d["epochs_run"] <= cfg.update_epochs
    else:
        assert d["epochs_run"] == cfg.update_epochs


def test_kl_early_stop_triggers_with_large_steps(rollout):
    policy, critic, batch, cfg = rollout
    cfg = replace(cfg, target_kl=1e-6, update_epochs=10)
    res = ppo_update(batch, policy, critic, cfg, init_optimizers(policy, critic), 5e-2, 1e-3,
                     np.random.default_rng(1))
    assert res.diagnostics["early_stopped"]
    assert res.diagnostics["epochs_run"] < 10


def test_update_does_not_mutate_inputs(rollout):
    policy, critic, batch, cfg = rollout
    before = {k: p.copy() for k, p in policy.trainable().items()}
    crit_before = critic.copy()
    ppo_update(batch, policy, critic, cfg, init_optimizers(policy, critic), 1e-2, 1e-2, np.random.default_rng(0))
    assert all(policy.trainable()[k].equals(p) for k, p in before.items())
    assert critic.equals(crit_before)


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_single_parameter_moves_along_policy_gradient(sign):
    # one-dimensional action, velocity is a bare bias b; noise_only keeps the scheduler out
    d, m, K, n = 1, 1, 2, 64
    vel = ParamBundle([np.zeros((1, d + 1 + m))], [np.array([0.2])], ("identity",))
    var = VariancePredictor(ParamBundle([np.zeros((1, d + 1 + m))], [np.array([0.0])], ("identity",)), 0.1, 0.3)
    policy = FlowPolicy(vel, ControlHeads(None, var), "noise_only", K)
    obs = np.zeros((n, m))
    tr = sample_action(vel, policy.heads, obs, K, "noise_only", seed=3)
    # favour chains whose noise pushed the action up (sign=+1) or down
    adv = sign * np.sign(tr.noise.sum(axis=(1, 2)))
    std = tr.stds
    dlogp_db = np.sum((tr.raw - tr.means)[:, :, 0] / (std * std * (1.0 / K)) * (1.0 / K), axis=1)
    analytic = float(np.sum(adv * dlogp_db))
    assert np.sign(analytic) == sign
    batch = RolloutBatch(obs, tr, tr.final, np.zeros(n), np.zeros(n), np.zeros(n), tr.log_prob.copy(), adv,
                         np.zeros(n))
    cfg = PPOConfig(update_epochs=1, minibatch_size=n, bc_coef=0.0, entropy_coef=0.0, adv_norm=False)
    critic = init_critic(m, (4,), seed=0)
    res = ppo_update(batch, policy, critic, cfg, init_optimizers(policy, critic), 1e-3, 1e-3,
                     np.random.default_rng(0))
    moved = res.policy.velocity.biases[0][0] - 0.2
    assert np.sign(moved) == np.sign(analytic)
