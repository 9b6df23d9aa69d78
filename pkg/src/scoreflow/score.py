"""Score from velocity, the time-decayed score scheduler, the bounded
variance predictor, and the training-time noise-bound schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .flow import network_input
from .nn import MLPSpec, ParamBundle, mlp_forward, mlp_init, softplus

T_FLOOR = 1e-6
SCHEDULER_INIT_BIAS = -2.0


def closed_form_score(v, a, t):
    """Marginal score recovered from a velocity: ``(t v - a) / (1 - t)``.

    ``t`` is a scalar or broadcasts against the leading axis of ``a``.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(1.0 - t_arr < T_FLOOR):
        raise DomainError(f"score time must satisfy 0 <= t <= 1 - {T_FLOOR}")
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if t_arr.ndim and a.ndim > 1:
        t_arr = t_arr.reshape(-1, *([1] * (a.ndim - 1)))
    return (t_arr * v - a) / (1.0 - t_arr)


def scheduler_spec(hidden_dim: int = 16) -> MLPSpec:
    return MLPSpec((1, hidden_dim, hidden_dim, 1), "silu", "softplus", zero_final_bias=SCHEDULER_INIT_BIAS)


def init_scheduler(hidden_dim: int = 16, seed: int = 0, stream: int = 1) -> ParamBundle:
    """Scheduler net ``t -> alpha(t) > 0``: 1 -> h -> h -> 1, SiLU hidden, Softplus out."""
    return mlp_init(scheduler_spec(hidden_dim), seed, stream)


def alpha_raw(params: ParamBundle, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return mlp_forward(params, t.reshape(-1, 1))[:, 0].reshape(t.shape)


def alpha_scaled(params: ParamBundle, t):
    """``(1 - t) * alpha(t)``; vanishes exactly at ``t = 1``."""
    t = np.asarray(t, dtype=np.float64)
    out = (1.0 - t) * alpha_raw(params, t)
    return float(out) if out.ndim == 0 else out


@dataclass
class VariancePredictor:
    """Bounded std head ``sigma(a, t, s)`` in ``[sigma_min, sigma_max]``."""

    params: ParamBundle
    sigma_min: float
    sigma_max: float

    def __post_init__(self):
        check_bounds(self.sigma_min, self.sigma_max)

    def with_sigma_max(self, sigma_max: float) -> "VariancePredictor":
        return VariancePredictor(self.params, self.sigma_min, sigma_max)


def check_bounds(sigma_min, sigma_max):
    if not (0.0 < sigma_min < sigma_max):
        raise ConfigurationError(f"need 0 < sigma_min < sigma_max, got sigma_min={sigma_min}, sigma_max={sigma_max}")


def variance_spec(action_dim, obs_dim, hidden=(64, 64)) -> MLPSpec:
    return MLPSpec((action_dim + 1 + obs_dim, *hidden, 1), "tanh", "identity")


def init_variance(action_dim, obs_dim, sigma_min, sigma_max, hidden=(64, 64), seed=0, stream=2):
    return VariancePredictor(mlp_init(variance_spec(action_dim, obs_dim, hidden), seed, stream), sigma_min, sigma_max)


def squash_sigma(raw, sigma_min, sigma_max):
    return sigma_min + (sigma_max - sigma_min) / 2.0 * (np.tanh(raw) + 1.0)


def sigma_eval(pred: VariancePredictor, a, t, s):
    """Per-row std; scalar for a single action, ``(n,)`` for a batch."""
    check_bounds(pred.sigma_min, pred.sigma_max)
    a = np.asarray(a, dtype=np.float64)
    raw = mlp_forward(pred.params, network_input(a, t, s))[:, 0]
    sig = squash_sigma(raw, pred.sigma_min, pred.sigma_max)
    return float(sig[0]) if a.ndim == 1 else sig


@dataclass(frozen=True)
class NoiseBoundSchedule:
    """Hold ``sigma_max`` for ``hold_ratio`` of training, then decay linearly
    to ``decay_mix * sigma_min + (1 - decay_mix) * sigma_max``."""

    hold_ratio: float = 0.35
    decay_mix: float = 0.3
    total_iters: int = 100

    def __post_init__(self):
        if not 0.0 <= self.hold_ratio <= 1.0:
            raise ConfigurationError(f"noise_hold_ratio must lie in [0, 1], got {self.hold_ratio}")
        if not 0.0 <= self.decay_mix <= 1.0:
            raise ConfigurationError(f"noise_decay_mix must lie in [0, 1], got {self.decay_mix}")
        if self.total_iters < 0:
            raise ConfigurationError("total_iters must be non-negative")


def effective_sigma_max(schedule: NoiseBoundSchedule, it: int, sigma_min: float, sigma_max: float) -> float:
    if not 0 <= it <= schedule.total_iters:
        raise DomainError(f"iteration {it} outside [0, {schedule.total_iters}]")
    hold_end = schedule.hold_ratio * schedule.total_iters
    if it <= hold_end:
        return sigma_max
    target = schedule.decay_mix * sigma_min + (1.0 - schedule.decay_mix) * sigma_max
    if it >= schedule.total_iters:
        return target
    frac = (it - hold_end) / (schedule.total_iters - hold_end)
    return sigma_max + (target - sigma_max) * frac
