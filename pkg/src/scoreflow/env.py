"""Vectorized 2-D point-mass reaching task and its scripted demonstrator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, UsageError
from .rng import DEMOS, ENV_RESET, make_rng


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 40
    action_scale: float = 0.1
    arena: float = 1.5
    n_envs: int = 16


class PointMassEnv:
    """``n_envs`` independent point masses chasing random goals.

    Observation is ``[position, goal - position]``; reward is the negative
    distance to the goal after the move. Episodes last exactly ``horizon`` steps.
    """

    obs_dim = 4
    action_dim = 2

    def __init__(self, config: EnvConfig = EnvConfig()):
        self.config = config
        self.position = np.zeros((config.n_envs, 2))
        self.goal = np.zeros((config.n_envs, 2))
        self.steps = 0
        self.done = True

    def reset(self, seed: int, stream: int = 0) -> np.ndarray:
        rng = make_rng(seed, ENV_RESET, stream)
        n = self.config.n_envs
        self.position = rng.uniform(-1.0, 1.0, size=(n, 2))
        self.goal = rng.uniform(-1.0, 1.0, size=(n, 2))
        self.steps = 0
        self.done = False
        return self.observe()

    def observe(self) -> np.ndarray:
        return np.concatenate([self.position, self.goal - self.position], axis=1)

    def step(self, action):
        if self.done:
            raise UsageError("episode finished; call reset() before stepping again")
        action = np.asarray(action, dtype=np.float64).reshape(self.config.n_envs, 2)
        if not np.all(np.isfinite(action)):
            raise NonFiniteError("non-finite action passed to the environment")
        cfg = self.config
        action = np.clip(action, -1.0, 1.0)
        self.position = np.clip(self.position + cfg.action_scale * action, -cfg.arena, cfg.arena)
        self.steps += 1
        reward = -np.linalg.norm(self.position - self.goal, axis=1)
        self.done = self.steps >= cfg.horizon
        dones = np.full(cfg.n_envs, self.done)
        return self.observe(), reward, dones


def env_step(env: PointMassEnv, action):
    return env.step(action)


def scripted_action(obs, config: EnvConfig, gain=0.6, noise=0.05, rng=None):
    """Proportional controller that covers only ``gain`` of the ideal move."""
    ideal = np.clip(obs[:, 2:4] / config.action_scale, -1.0, 1.0)
    act = gain * ideal
    if rng is not None and noise > 0:
        act = act + noise * rng.standard_normal(act.shape)
    return np.clip(act, -1.0, 1.0)


def collect_demos(config: EnvConfig, n_episodes: int, seed: int, gain=0.6, noise=0.05):
    """Roll out the scripted expert; returns ``(observations, actions)``."""
    env = PointMassEnv(EnvConfig(config.horizon, config.action_scale, config.arena, n_episodes))
    rng = make_rng(seed, DEMOS)
    obs = env.reset(seed, DEMOS)
    all_obs, all_act = [], []
    while not env.done:
        act = scripted_action(obs, config, gain, noise, rng)
        all_obs.append(obs)
        all_act.append(act)
        obs, _, _ = env.step(act)
    return np.concatenate(all_obs), np.concatenate(all_act)
