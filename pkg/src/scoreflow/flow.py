"""Flow-matching pretraining and deterministic Euler sampling.

Path: ``a_t = (1 - t) a0 + t a1`` with ``a0 ~ N(0, I)``; the regression
target is ``a1 - a0``. Time enters the network as a raw scalar appended
to the action, followed by the observation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError, TrainingDiverged
from .nn import (
    MLPSpec,
    OptimizerState,
    ParamBundle,
    adam_step,
    cosine_warm_restart_lr,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    mlp_init,
)
from .rng import FM_BATCH, SAMPLER, make_rng

log = logging.getLogger(__name__)

T_MAX_TRAIN = 0.999


@dataclass
class FlowPathSample:
    a0: np.ndarray
    a1: np.ndarray
    t: float
    a_t: np.ndarray
    target: np.ndarray


def linear_interpolate(a0, a1, t) -> FlowPathSample:
    a0 = np.asarray(a0, dtype=np.float64)
    a1 = np.asarray(a1, dtype=np.float64)
    if a0.shape != a1.shape:
        raise ShapeError(f"a0 {a0.shape} and a1 {a1.shape} differ")
    if not 0.0 <= t < 1.0:
        raise DomainError(f"interpolation time must lie in [0, 1), got {t}")
    return FlowPathSample(a0, a1, float(t), (1.0 - t) * a0 + t * a1, a1 - a0)


def velocity_spec(action_dim, obs_dim, hidden=(64, 64, 64), activation="silu") -> MLPSpec:
    return MLPSpec((action_dim + 1 + obs_dim, *hidden, action_dim), activation, "identity")


def init_velocity(action_dim, obs_dim, hidden=(64, 64, 64), seed=0, stream=0) -> ParamBundle:
    return mlp_init(velocity_spec(action_dim, obs_dim, hidden), seed, stream)


def network_input(a, t, s):
    """Concatenate ``[a, t, s]`` row-wise; ``t`` may be a scalar or per-row."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    n = a.shape[0]
    t_col = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
    s = np.asarray(s, dtype=np.float64)
    s = np.broadcast_to(s.reshape(1, -1) if s.ndim <= 1 else s, (n, s.shape[-1] if s.ndim else 0))
    return np.concatenate([a, t_col, s], axis=1)


def velocity(params: ParamBundle, a, t, s) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    out = mlp_forward(params, network_input(a, t, s))
    return out[0] if a.ndim == 1 else out


@dataclass
class DemoDataset:
    """Observation/action pairs with per-dimension action normalization.

    ``normalized = (action - offset) / scale``. Min/max statistics map the
    data onto ``[-1, 1]^d``; explicit bounds can be supplied instead.
    """

    observations: np.ndarray
    actions: np.ndarray
    offset: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_arrays(cls, observations, actions, bounds=None) -> "DemoDataset":
        obs = np.asarray(observations, dtype=np.float64)
        act = np.asarray(actions, dtype=np.float64)
        if act.ndim != 2 or obs.ndim != 2 or obs.shape[0] != act.shape[0]:
            raise ShapeError(f"observations {obs.shape} and actions {act.shape} do not pair up")
        if act.shape[0] == 0:
            raise ShapeError("dataset is empty")
        if not np.all(np.isfinite(act)):
            raise NonFiniteError("non-finite demonstration actions")
        if bounds is None:
            lo, hi = act.min(axis=0), act.max(axis=0)
        else:
            lo = np.broadcast_to(np.asarray(bounds[0], dtype=np.float64), act.shape[1:]).copy()
            hi = np.broadcast_to(np.asarray(bounds[1], dtype=np.float64), act.shape[1:]).copy()
        scale = (hi - lo) / 2.0
        scale = np.where(scale > 0, scale, 1.0)
        return cls(obs, act, (hi + lo) / 2.0, scale)

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    def __len__(self):
        return self.actions.shape[0]

    def normalize(self, actions):
        return (np.asarray(actions) - self.offset) / self.scale

    def denormalize(self, actions):
        return np.asarray(actions) * self.scale + self.offset

    @property
    def normalized_actions(self) -> np.ndarray:
        return self.normalize(self.actions)


def fm_loss(params: ParamBundle, obs, a1, seed=0, rng=None, a0=None, t=None):
    """Mean squared flow-matching error on a batch and its parameter gradient.

    ``t ~ U[0, 0.999]`` and ``a0 ~ N(0, I)`` are drawn from the seeded stream
    unless given explicitly.
    """
    a1 = np.atleast_2d(np.asarray(a1, dtype=np.float64))
    n, d = a1.shape
    if n == 0:
        raise ShapeError("empty flow-matching batch")
    obs = np.asarray(obs, dtype=np.float64).reshape(n, -1)
    if rng is None:
        rng = make_rng(seed, FM_BATCH)
    if t is None:
        t = rng.uniform(0.0, T_MAX_TRAIN, size=n)
    if a0 is None:
        a0 = rng.standard_normal((n, d))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    a0 = np.asarray(a0, dtype=np.float64).reshape(n, d)
    a_t = (1.0 - t)[:, None] * a0 + t[:, None] * a1
    target = a1 - a0
    out, cache = mlp_forward_cached(params, network_input(a_t, t, obs))
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"non-finite velocity output at sample {idx}", index=idx)
    diff = out - target
    loss = float(np.sum(diff * diff) / n)
    grad, _ = mlp_backward(params, cache, 2.0 * diff / n)
    return loss, grad


def ode_sample(params: ParamBundle, s, K: int, seed=0, a0=None) -> np.ndarray:
    """Euler-integrate the velocity field from ``a0 ~ N(0, I)`` on the grid ``t_k = k/K``.

    ``s`` is one observation ``(m,)`` or a batch ``(n, m)``; the result has
    matching leading shape.
    """
    if K < 1:
        raise DomainError(f"need at least one integration step, got K={K}")
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim <= 1
    sb = s.reshape(1, -1) if single else s
    d = params.out_dim
    if a0 is None:
        a0 = make_rng(seed, SAMPLER).standard_normal((sb.shape[0], d))
    a = np.asarray(a0, dtype=np.float64).reshape(sb.shape[0], d)
    dt = 1.0 / K
    for k in range(K):
        a = a + mlp_forward(params, network_input(a, k / K, sb)) * dt
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite state after Euler step {k}", index=k)
    return a[0] if single else a


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_steps: int = 0
    hidden: tuple = (64, 64, 64)
    seed: int = 0


@dataclass
class PretrainResult:
    params: ParamBundle
    optimizer: OptimizerState
    losses: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def pretrain(dataset: DemoDataset, config: PretrainConfig = PretrainConfig(), params=None) -> PretrainResult:
    """Adam on mini-batch FM loss with a single cosine cycle over ``config.steps``."""
    if len(dataset) == 0:
        raise ShapeError("dataset is empty")
    if params is None:
        params = init_velocity(dataset.action_dim, dataset.obs_dim, config.hidden, config.seed)
    state = OptimizerState.for_params(params)
    rng = make_rng(config.seed, FM_BATCH)
    targets = dataset.normalized_actions
    losses = []
    for step in range(config.steps):
        idx = rng.integers(len(dataset), size=config.batch_size)
        loss, grad = fm_loss(params, dataset.observations[idx], targets[idx], rng=rng)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"FM loss diverged at step {step}", params=params, index=step)
        lr = cosine_warm_restart_lr(config.lr, config.min_lr, config.steps, config.warmup_steps, step)
        params, state = adam_step(params, grad, state, lr)
        losses.append(loss)
        if step % 500 == 0:
            log.debug("pretrain step %d loss %.5f", step, loss)
    return PretrainResult(params, state, losses)
