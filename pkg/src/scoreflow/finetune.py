"""Online fine-tuning loop, evaluation, and the end-to-end toy pipeline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .env import EnvConfig, PointMassEnv, collect_demos
from .flow import DemoDataset, PretrainConfig, pretrain
from .nn import ParamBundle, cosine_warm_restart_lr
from .ppo import (
    FlowPolicy,
    PPOConfig,
    RewardNormalizer,
    RolloutBatch,
    critic_values,
    gae,
    init_critic,
    init_optimizers,
    ppo_update,
)
from .rng import EVAL, PPO_SHUFFLE, SAMPLER, make_rng
from .sampler import ClipPolicy, ControlHeads, FlowTrajectory, init_coupling
from .score import NoiseBoundSchedule, effective_sigma_max, init_scheduler, init_variance

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "return_mean", "return_std", "approx_kl", "clip_frac", "entropy",
                  "sigma_mean", "alpha_mean_at_t0", "actor_lr", "critic_lr")


@dataclass(frozen=True)
class FinetuneConfig:
    n_iters: int = 100
    actor_lr: float = 3e-4
    actor_min_lr: float = 1e-4
    critic_lr: float = 1e-3
    critic_min_lr: float = 3e-4
    lr_cycle: int = 100
    critic_lr_warmup: int = 10
    critic_warmup_iters: int = 0


@dataclass
class FinetuneResult:
    policy: FlowPolicy
    critic: ParamBundle
    optimizers: dict
    metrics: list = field(default_factory=list)
    reward_scale: float = 1.0
    reward_normalizer: RewardNormalizer | None = None


def _to_env(actions, action_map):
    if action_map is None:
        return actions
    offset, scale = action_map
    return actions * scale + offset


def collect_rollouts(policy: FlowPolicy, critic: ParamBundle, env_cfg: EnvConfig, seed: int, it: int,
                     ppo_cfg: PPOConfig, normalizer: RewardNormalizer | None = None, action_map=None):
    """One full episode per environment; returns ``(RolloutBatch, episode_returns)``."""
    env = PointMassEnv(env_cfg)
    obs = env.reset(seed, it)
    rng = make_rng(seed, SAMPLER, it)
    T, n = env_cfg.horizon, env_cfg.n_envs
    obs_buf, trajs, act_buf = [], [], []
    rew = np.zeros((T, n))
    rew_raw = np.zeros((T, n))
    dones = np.zeros((T, n))
    values = np.zeros((T + 1, n))
    for step in range(T):
        traj = policy.sample(obs, rng=rng)
        action = _to_env(traj.final, action_map)
        values[step] = critic_values(critic, obs)
        obs_buf.append(obs)
        trajs.append(traj)
        act_buf.append(action)
        obs, r, done = env.step(action)
        rew_raw[step] = r
        rew[step] = normalizer(r, done) if normalizer is not None else r
        dones[step] = done
    values[T] = critic_values(critic, obs) * (1.0 - dones[-1])
    adv, ret = gae(rew, values, dones, ppo_cfg.gamma, ppo_cfg.gae_lambda)
    # time-major -> env-major flattening keeps each env's episode contiguous
    order = lambda x: np.swapaxes(np.asarray(x), 0, 1).reshape(T * n, *np.shape(x)[2:])
    traj_all = FlowTrajectory.concatenate(trajs)
    perm = np.arange(T * n).reshape(T, n).T.ravel()
    traj_all = traj_all.subset(perm)
    batch = RolloutBatch(
        obs=order(obs_buf), traj=traj_all, actions=order(act_buf), rewards=order(rew),
        dones=order(dones), values=order(values[:T]), old_log_prob=traj_all.log_prob.copy(),
        advantages=order(adv), returns=order(ret),
    )
    return batch, rew_raw.sum(axis=0)


def evaluate_policy(policy: FlowPolicy, env_cfg: EnvConfig, seed: int, n_episodes: int = 64, action_map=None):
    """Per-episode undiscounted returns on held-out starts (stochastic sampler)."""
    cfg = EnvConfig(env_cfg.horizon, env_cfg.action_scale, env_cfg.arena, n_episodes)
    env = PointMassEnv(cfg)
    obs = env.reset(seed, 10_000 + EVAL)
    rng = make_rng(seed, EVAL)
    total = np.zeros(n_episodes)
    while not env.done:
        traj = policy.sample(obs, rng=rng)
        obs, r, _ = env.step(_to_env(traj.final, action_map))
        total += r
    return total


def finetune(policy: FlowPolicy, env_cfg: EnvConfig, ppo_cfg: PPOConfig, schedule: NoiseBoundSchedule,
             n_iters: int, seed: int, ft_cfg: FinetuneConfig = FinetuneConfig(), demo: DemoDataset | None = None,
             critic: ParamBundle | None = None, action_map=None, callback=None, optimizers=None,
             normalizer=None, start_iter=0, sigma_max=None) -> FinetuneResult:
    """collect -> GAE -> PPO -> noise-bound schedule, iterations ``start_iter .. n_iters - 1``.

    Resuming passes the saved optimizers, reward normalizer, and the base
    ``sigma_max`` (the policy itself carries the scheduled value).
    """
    if critic is None:
        critic = init_critic(PointMassEnv.obs_dim, seed=seed)
    opts = init_optimizers(policy, critic) if optimizers is None else dict(optimizers)
    if normalizer is None and ppo_cfg.reward_norm:
        normalizer = RewardNormalizer(env_cfg.n_envs, ppo_cfg.gamma)
    var = policy.heads.variance
    sigma_min = var.sigma_min if var is not None else None
    if sigma_max is None and var is not None:
        sigma_max = var.sigma_max
    metrics = []
    for it in range(start_iter, n_iters):
        batch, ep_returns = collect_rollouts(policy, critic, env_cfg, seed, it, ppo_cfg, normalizer, action_map)
        actor_lr = cosine_warm_restart_lr(ft_cfg.actor_lr, ft_cfg.actor_min_lr, ft_cfg.lr_cycle, 0, it)
        critic_lr = cosine_warm_restart_lr(ft_cfg.critic_lr, ft_cfg.critic_min_lr, ft_cfg.lr_cycle,
                                           ft_cfg.critic_lr_warmup, it)
        critic_lr = max(critic_lr, 1e-12)
        res = ppo_update(batch, policy, critic, ppo_cfg, opts, actor_lr, critic_lr,
                         make_rng(seed, PPO_SHUFFLE, it), demo, critic_only=it < ft_cfg.critic_warmup_iters)
        policy, critic, opts = res.policy, res.critic, res.optimizers
        if var is not None:
            policy = policy.with_sigma_max(effective_sigma_max(schedule, min(it + 1, schedule.total_iters),
                                                               sigma_min, sigma_max))
        diag = res.diagnostics
        row = {
            "iter": it,
            "return_mean": float(ep_returns.mean()),
            "return_std": float(ep_returns.std()),
            "approx_kl": diag["approx_kl"],
            "clip_frac": float(np.mean(diag["clip_frac"])) if diag["clip_frac"] else 0.0,
            "entropy": float(np.mean(diag["entropy"])) if diag["entropy"] else 0.0,
            "sigma_mean": float(batch.traj.stds.mean()),
            "alpha_mean_at_t0": float(batch.traj.drift_coef[:, 0].mean()),
            "actor_lr": actor_lr,
            "critic_lr": critic_lr,
        }
        metrics.append(row)
        log.debug("iter %d return %.3f kl %.2e", it, row["return_mean"], row["approx_kl"])
        if callback is not None:
            callback(it, policy, critic, opts, normalizer, row)
    return FinetuneResult(policy, critic, opts, metrics, normalizer.scale() if normalizer else 1.0, normalizer)


@dataclass(frozen=True)
class ToyConfig:
    """Everything needed to go from scripted demos to a fine-tuned policy."""

    env: EnvConfig = EnvConfig()
    ppo: PPOConfig = PPOConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    pretrain: PretrainConfig = PretrainConfig(steps=2000, batch_size=256, lr=3e-3, hidden=(64, 64, 64))
    K: int = 4
    sigma_min: float = 0.10
    sigma_max: float = 0.24
    hold_ratio: float = 0.35
    decay_mix: float = 0.3
    score_hidden_dim: int = 16
    variance_hidden: tuple = (64, 64)
    critic_hidden: tuple = (256, 256, 256)
    lambda_max: float = 0.1
    clip: ClipPolicy = ClipPolicy(3.0, 1.0, True)
    demo_episodes: int = 64
    demo_gain: float = 0.6
    demo_noise: float = 0.05
    eval_episodes: int = 64


def make_demo_dataset(cfg: ToyConfig, seed: int) -> DemoDataset:
    obs, act = collect_demos(cfg.env, cfg.demo_episodes, seed, cfg.demo_gain, cfg.demo_noise)
    # normalize against the env's action box so clip_final = 1 matches its limits
    return DemoDataset.from_arrays(obs, act, bounds=(-1.0, 1.0))


def build_policy(velocity: ParamBundle, cfg: ToyConfig, variant: str, seed: int) -> FlowPolicy:
    d, m = velocity.out_dim, velocity.in_dim - velocity.out_dim - 1
    heads = ControlHeads(
        scheduler=init_scheduler(cfg.score_hidden_dim, seed),
        variance=init_variance(d, m, cfg.sigma_min, cfg.sigma_max, cfg.variance_hidden, seed),
        coupling=init_coupling(d, m, cfg.variance_hidden, seed) if variant == "coupled_learned" else None,
        lambda_max=cfg.lambda_max,
    )
    return FlowPolicy(velocity, heads, variant, cfg.K, cfg.clip)


def pretrain_toy(cfg: ToyConfig, seed: int):
    demo = make_demo_dataset(cfg, seed)
    pcfg = PretrainConfig(cfg.pretrain.steps, cfg.pretrain.batch_size, cfg.pretrain.lr, cfg.pretrain.min_lr,
                          cfg.pretrain.warmup_steps, cfg.pretrain.hidden, seed)
    return demo, pretrain(demo, pcfg)


def run_toy(cfg: ToyConfig, variant: str, seed: int, velocity=None, demo=None, n_iters=None):
    """Pretrain (unless given), measure the BC return, fine-tune, measure again."""
    if velocity is None:
        demo, res = pretrain_toy(cfg, seed)
        velocity = res.params
    policy = build_policy(velocity, cfg, variant, seed)
    bc_returns = evaluate_policy(policy, cfg.env, seed, cfg.eval_episodes)
    schedule = NoiseBoundSchedule(cfg.hold_ratio, cfg.decay_mix, cfg.finetune.n_iters if n_iters is None else n_iters)
    result = finetune(policy, cfg.env, cfg.ppo, schedule, schedule.total_iters, seed, cfg.finetune, demo,
                      init_critic(PointMassEnv.obs_dim, cfg.critic_hidden, seed))
    final_returns = evaluate_policy(result.policy, cfg.env, seed, cfg.eval_episodes)
    return {"bc_return": float(bc_returns.mean()), "final_return": float(final_returns.mean()), "result": result}
