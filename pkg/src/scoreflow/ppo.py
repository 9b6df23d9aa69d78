"""PPO on the chained-denoising policy: GAE, clipped surrogate, critic, updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NonFiniteError, ShapeError
from .flow import DemoDataset, fm_loss
from .nn import (
    MLPSpec,
    OptimizerState,
    ParamBundle,
    adam_step,
    clip_by_global_norm,
    mlp_backward,
    mlp_forward_cached,
    mlp_init,
)
from .sampler import (
    NO_CLIP,
    ClipPolicy,
    ControlHeads,
    FlowTrajectory,
    chain_entropy,
    evaluate_chain,
    sample_action,
)
from .score import VariancePredictor


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    update_epochs: int = 5
    minibatch_size: int = 160
    entropy_coef: float = 0.0
    bc_coef: float = 0.01
    critic_coef: float = 0.5
    target_kl: float = 1.0
    max_grad_norm: float = 25.0
    reward_norm: bool = True
    adv_norm: bool = True

    def __post_init__(self):
        if not self.clip_eps > 0:
            raise ConfigurationError("ppo.clip_eps must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("ppo.gamma must lie in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigurationError("ppo.gae_lambda must lie in [0, 1]")
        if self.update_epochs < 1 or self.minibatch_size < 1:
            raise ConfigurationError("ppo.update_epochs and ppo.minibatch_size must be positive")


def gae(rewards, values, dones, gamma, lam):
    """Generalized advantage estimates along axis 0.

    ``values`` has one more entry than ``rewards`` (the bootstrap value).
    Returns ``(advantages, returns)`` with ``returns = advantages + values[:-1]``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or dones.shape != rewards.shape or values.shape[1:] != rewards.shape[1:]:
        raise ShapeError(f"rewards {rewards.shape}, values {values.shape}, dones {dones.shape} are inconsistent")
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values[:-1]


def ppo_surrogate(new_logp, old_logp, advantage, eps):
    """Per-sample clipped objective ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    r = np.exp(np.asarray(new_logp, dtype=np.float64) - np.asarray(old_logp, dtype=np.float64))
    return np.minimum(r * advantage, np.clip(r, 1.0 - eps, 1.0 + eps) * advantage)


def normalize_advantages(adv, eps=1e-8):
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / max(adv.std(), eps)


class RunningMeanStd:
    """Streaming mean/variance (parallel-merge form)."""

    def __init__(self, shape=()):
        self.mean = np.zeros(shape)
        self.var = np.ones(shape)
        self.count = 1e-4

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        b_mean, b_var, b_count = x.mean(axis=0), x.var(axis=0), x.shape[0]
        delta = b_mean - self.mean
        tot = self.count + b_count
        self.mean = self.mean + delta * b_count / tot
        m2 = self.var * self.count + b_var * b_count + delta * delta * self.count * b_count / tot
        self.var = m2 / tot
        self.count = tot


class RewardNormalizer:
    """Divides rewards by the running std of the discounted return."""

    def __init__(self, n_envs: int, gamma: float, eps: float = 1e-8):
        self.ret = np.zeros(n_envs)
        self.rms = RunningMeanStd()
        self.gamma = gamma
        self.eps = eps

    def __call__(self, rewards, dones):
        self.ret = self.ret * self.gamma + rewards
        self.rms.update(self.ret)
        self.ret = np.where(dones, 0.0, self.ret)
        return rewards / np.sqrt(self.rms.var + self.eps)

    def scale(self) -> float:
        return float(np.sqrt(self.rms.var + self.eps))


def critic_spec(obs_dim, hidden=(256, 256, 256)) -> MLPSpec:
    return MLPSpec((obs_dim, *hidden, 1), "silu", "identity")


def init_critic(obs_dim, hidden=(256, 256, 256), seed=0, stream=4) -> ParamBundle:
    return mlp_init(critic_spec(obs_dim, hidden), seed, stream)


def critic_loss(critic: ParamBundle, obs, returns, coef=1.0):
    """``coef * mean((V(s) - return)^2)`` and its gradient."""
    out, cache = mlp_forward_cached(critic, obs)
    diff = out[:, 0] - returns
    n = diff.size
    loss = coef * float(np.mean(diff * diff))
    grad, _ = mlp_backward(critic, cache, (2.0 * coef * diff / n)[:, None])
    return loss, grad


def critic_values(critic: ParamBundle, obs):
    return mlp_forward_cached(critic, obs)[0][:, 0]


@dataclass
class FlowPolicy:
    """Velocity field plus control heads run by one sampler variant."""

    velocity: ParamBundle
    heads: ControlHeads
    variant: str = "scoreflow"
    K: int = 4
    clip: ClipPolicy = NO_CLIP

    def sample(self, obs, rng=None, seed=0) -> FlowTrajectory:
        return sample_action(self.velocity, self.heads, obs, self.K, self.variant, self.clip, seed=seed, rng=rng)

    def evaluate(self, obs, traj):
        return evaluate_chain(self.velocity, self.heads, obs, traj, self.variant)

    def trainable(self) -> dict:
        """Parameter bundles the variant actually uses."""
        out = {"velocity": self.velocity}
        if self.variant == "scoreflow":
            out["scheduler"] = self.heads.scheduler
        if self.variant in ("scoreflow", "noise_only", "alpha_one"):
            out["variance"] = self.heads.variance.params
        if self.variant == "coupled_learned":
            out["coupling"] = self.heads.coupling
        return out

    def with_params(self, params: dict) -> "FlowPolicy":
        heads = self.heads
        var = heads.variance
        if "variance" in params:
            var = VariancePredictor(params["variance"], var.sigma_min, var.sigma_max)
        new_heads = ControlHeads(
            params.get("scheduler", heads.scheduler), var, params.get("coupling", heads.coupling), heads.lambda_max
        )
        return FlowPolicy(params.get("velocity", self.velocity), new_heads, self.variant, self.K, self.clip)

    def with_sigma_max(self, sigma_max: float) -> "FlowPolicy":
        if self.heads.variance is None:
            return self
        heads = ControlHeads(self.heads.scheduler, self.heads.variance.with_sigma_max(sigma_max),
                             self.heads.coupling, self.heads.lambda_max)
        return FlowPolicy(self.velocity, heads, self.variant, self.K, self.clip)


@dataclass
class RolloutBatch:
    """Flattened transitions, ``n_envs * n_steps`` rows."""

    obs: np.ndarray
    traj: FlowTrajectory
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    old_log_prob: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return self.obs.shape[0]


@dataclass
class PPOResult:
    policy: FlowPolicy
    critic: ParamBundle
    optimizers: dict
    diagnostics: dict = field(default_factory=dict)


def init_optimizers(policy: FlowPolicy, critic: ParamBundle) -> dict:
    opts = {k: OptimizerState.for_params(p) for k, p in policy.trainable().items()}
    opts["critic"] = OptimizerState.for_params(critic)
    return opts


def ppo_update(batch: RolloutBatch, policy: FlowPolicy, critic: ParamBundle, config: PPOConfig,
               optimizers: dict, actor_lr: float, critic_lr: float, rng: np.random.Generator,
               demo: DemoDataset | None = None, critic_only: bool = False) -> PPOResult:
    """Run clipped-PPO epochs over ``batch``; inputs are never mutated.

    Raises :class:`NonFiniteError` on a non-finite loss, leaving the caller's
    parameters as they were.
    """
    n = len(batch)
    adv_all = normalize_advantages(batch.advantages) if config.adv_norm else batch.advantages
    actor = policy.trainable()
    opts = {k: v for k, v in optimizers.items()}
    d = batch.traj.actions.shape[2]
    dt = 1.0 / batch.traj.K
    diag = {"epoch_kl": [], "clip_frac": [], "pg_loss": [], "v_loss": [], "entropy": [], "bc_loss": [],
            "first_ratio_mean": None, "early_stopped": False}
    mb = min(config.minibatch_size, n)
    stop = False
    for epoch in range(config.update_epochs):
        perm = rng.permutation(n)
        kls = []
        for start in range(0, n, mb):
            idx = perm[start:start + mb]
            B = idx.size
            v_loss, v_grad = critic_loss(critic, batch.obs[idx], batch.returns[idx], config.critic_coef)
            if not np.isfinite(v_loss):
                raise NonFiniteError(f"non-finite critic loss in epoch {epoch}")
            (v_grad,), _ = clip_by_global_norm([v_grad], config.max_grad_norm)
            critic, opts["critic"] = adam_step(critic, v_grad, opts["critic"], critic_lr)
            diag["v_loss"].append(v_loss)
            if critic_only:
                continue

            cur = policy.with_params(actor)
            ev = cur.evaluate(batch.obs[idx], batch.traj.subset(idx))
            old = batch.old_log_prob[idx]
            adv = adv_all[idx]
            log_ratio = ev.log_prob - old
            ratio = np.exp(log_ratio)
            if diag["first_ratio_mean"] is None:
                diag["first_ratio_mean"] = float(ratio.mean())
            surr1 = ratio * adv
            surr2 = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * adv
            pg_loss = -float(np.mean(np.minimum(surr1, surr2)))
            entropy = float(np.mean(chain_entropy(ev.stds, d, dt)))
            loss = pg_loss - config.entropy_coef * entropy
            # d(loss)/d(logp_i): only samples whose unclipped branch is active carry gradient
            w = -np.where(surr1 <= surr2, ratio * adv, 0.0) / B
            std_up = -config.entropy_coef * d / ev.stds / B if config.entropy_coef else None
            grads = ev.backward(w, std_up)
            bc_loss = 0.0
            if config.bc_coef > 0 and demo is not None:
                didx = rng.integers(len(demo), size=B)
                bc_loss, bc_grad = fm_loss(actor["velocity"], demo.observations[didx],
                                           demo.normalized_actions[didx], rng=rng)
                grads["velocity"] = grads["velocity"] + bc_grad.scale(config.bc_coef)
                loss += config.bc_coef * bc_loss
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite policy loss in epoch {epoch}")
            keys = list(actor)
            clipped, _ = clip_by_global_norm([grads[k] for k in keys], config.max_grad_norm)
            for k, g in zip(keys, clipped):
                actor[k], opts[k] = adam_step(actor[k], g, opts[k], actor_lr)

            kls.append(float(np.mean(-log_ratio)))
            diag["clip_frac"].append(float(np.mean(np.abs(ratio - 1.0) > config.clip_eps)))
            diag["pg_loss"].append(pg_loss)
            diag["entropy"].append(entropy)
            diag["bc_loss"].append(bc_loss)
            if kls[-1] > config.target_kl:
                stop = True
                break
        if kls:
            diag["epoch_kl"].append(float(np.mean(kls)))
        if stop:
            diag["early_stopped"] = True
            break
    diag["epochs_run"] = epoch + 1
    diag["approx_kl"] = diag["epoch_kl"][-1] if diag["epoch_kl"] else 0.0
    return PPOResult(policy.with_params(actor), critic, opts, diag)
