"""Stochastic K-step action sampling and exact chain likelihoods.

Each denoising step is a Gaussian transition

    mu^k      = a^k + [v(a^k, t_k, s) + c^k * score(a^k, t_k)] * dt
    a^{k+1}   = mu^k + sigma^k * sqrt(dt) * eps_k

where the drift coefficient ``c^k`` and the std ``sigma^k`` depend on the
sampler variant:

    scoreflow           c = (1 - t) alpha_psi(t)       sigma = sigma_phi(a, t, s)
    noise_only          c = 0                          sigma = sigma_phi(a, t, s)
    alpha_one           c = (1 - t)                    sigma = sigma_phi(a, t, s)
    score_sde_coupled   c = lambda(t)                  sigma = sqrt(2 lambda(t)),  lambda = lambda_max (1 - t)
    coupled_learned     c = lambda(a, t, s)            sigma = sqrt(2 lambda),     lambda = (1 - t) softplus(net)

For the coupled variants the std is computed first and the drift coefficient
is taken as ``sigma**2 / 2`` so that the coupling holds bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DomainError, NonFiniteError, ShapeError
from .flow import network_input
from .nn import MLPSpec, ParamBundle, mlp_backward, mlp_forward_cached, mlp_init
from .rng import SAMPLER, make_rng
from .score import SCHEDULER_INIT_BIAS, VariancePredictor

VARIANTS = ("scoreflow", "noise_only", "alpha_one", "score_sde_coupled", "coupled_learned")
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ControlHeads:
    """Learnable heads steering the sampler.

    ``scheduler`` is the score-scheduler net, ``variance`` the bounded std
    predictor, ``coupling`` the tied drift/diffusion net used only by
    ``coupled_learned``; ``lambda_max`` sets the fixed coupled schedule.
    """

    scheduler: ParamBundle | None = None
    variance: VariancePredictor | None = None
    coupling: ParamBundle | None = None
    lambda_max: float = 0.1

    def copy(self) -> "ControlHeads":
        return ControlHeads(
            None if self.scheduler is None else self.scheduler.copy(),
            None if self.variance is None else replace(self.variance, params=self.variance.params.copy()),
            None if self.coupling is None else self.coupling.copy(),
            self.lambda_max,
        )


def coupling_spec(action_dim, obs_dim, hidden=(64, 64)) -> MLPSpec:
    return MLPSpec((action_dim + 1 + obs_dim, *hidden, 1), "tanh", "softplus", zero_final_bias=SCHEDULER_INIT_BIAS)


def init_coupling(action_dim, obs_dim, hidden=(64, 64), seed=0, stream=3) -> ParamBundle:
    return mlp_init(coupling_spec(action_dim, obs_dim, hidden), seed, stream)


@dataclass(frozen=True)
class ClipPolicy:
    intermediate_clip: float = 3.0
    final_clip: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if self.final_clip > self.intermediate_clip:
            raise ConfigurationError("sampler.clip_final must not exceed sampler.clip_intermediate")
        if self.final_clip <= 0:
            raise ConfigurationError("clip values must be positive")


NO_CLIP = ClipPolicy(np.inf, np.inf, False)


@dataclass
class FlowTrajectory:
    """Batched record of sampled chains.

    ``actions[:, k]`` is the state fed to step ``k`` (post-clip), with
    ``actions[:, K]`` the emitted action. ``raw[:, k]`` is the pre-clip
    sample ``means[:, k] + stds[:, k] sqrt(dt) noise[:, k]`` whose Gaussian
    density enters ``log_prob``.
    """

    actions: np.ndarray
    raw: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    noise: np.ndarray
    drift_coef: np.ndarray
    log_prob: np.ndarray
    variant: str

    @property
    def K(self) -> int:
        return self.means.shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.actions[:, -1]

    def __len__(self):
        return self.actions.shape[0]

    def subset(self, idx) -> "FlowTrajectory":
        return FlowTrajectory(
            self.actions[idx], self.raw[idx], self.means[idx], self.stds[idx],
            self.noise[idx], self.drift_coef[idx], self.log_prob[idx], self.variant,
        )

    @staticmethod
    def concatenate(trajs) -> "FlowTrajectory":
        trajs = list(trajs)
        cat = lambda name: np.concatenate([getattr(t, name) for t in trajs], axis=0)
        return FlowTrajectory(
            cat("actions"), cat("raw"), cat("means"), cat("stds"), cat("noise"),
            cat("drift_coef"), cat("log_prob"), trajs[0].variant,
        )


def _check_variant(variant, heads: ControlHeads):
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown sampler variant {variant!r}; expected one of {VARIANTS}")
    if variant == "scoreflow" and heads.scheduler is None:
        raise ConfigurationError("scoreflow variant needs a score scheduler")
    if variant in ("scoreflow", "noise_only", "alpha_one") and heads.variance is None:
        raise ConfigurationError(f"{variant} variant needs a variance predictor")
    if variant == "coupled_learned" and heads.coupling is None:
        raise ConfigurationError("coupled_learned variant needs a coupling net")
    if variant == "score_sde_coupled" and heads.lambda_max < 0:
        raise DomainError("lambda_max must be non-negative")


def _rows(x, n):
    x = np.asarray(x, dtype=np.float64)
    return np.broadcast_to(x, (n,)) if x.ndim == 0 else x


def step_stats(velocity, heads, variant, a, t, s, dt, keep_cache=False):
    """Transition mean and std for rows ``a`` ``(n, d)`` at times ``t`` (scalar or ``(n,)``).

    Returns a dict with ``mean``, ``std``, ``coef``, ``v``, ``score`` and,
    when ``keep_cache`` is set, the forward caches needed for gradients.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    t = _rows(t, n)
    one_m_t = 1.0 - t
    if np.any(one_m_t <= 0.0):
        raise DomainError("step times must stay below 1")
    inp = network_input(a, t, s)
    v, vcache = mlp_forward_cached(velocity, inp)
    score = (t[:, None] * v - a) / one_m_t[:, None]
    out = {"v": v, "score": score, "t": t, "a": a}
    if keep_cache:
        out["inp"] = inp
        out["vcache"] = vcache

    if variant in ("scoreflow", "noise_only", "alpha_one"):
        raw, scache = mlp_forward_cached(heads.variance.params, inp)
        raw = raw[:, 0]
        lo, hi = heads.variance.sigma_min, heads.variance.sigma_max
        std = lo + (hi - lo) / 2.0 * (np.tanh(raw) + 1.0)
        if keep_cache:
            out["scache"], out["sraw"] = scache, raw
        if variant == "scoreflow":
            alpha, acache = mlp_forward_cached(heads.scheduler, t.reshape(-1, 1))
            coef = one_m_t * alpha[:, 0]
            if keep_cache:
                out["acache"] = acache
        elif variant == "noise_only":
            coef = np.zeros(n)
        else:
            coef = one_m_t * 1.0
    elif variant == "score_sde_coupled":
        lam = heads.lambda_max * one_m_t
        if np.any(lam < 0):
            raise DomainError("coupled schedule produced lambda < 0")
        std = np.sqrt(2.0 * lam)
        coef = std * std / 2.0
    elif variant == "coupled_learned":
        sp, ccache = mlp_forward_cached(heads.coupling, inp)
        lam = one_m_t * sp[:, 0]
        std = np.sqrt(2.0 * lam)
        coef = std * std / 2.0
        if keep_cache:
            out["ccache"] = ccache
    else:
        raise ConfigurationError(f"unknown sampler variant {variant!r}")

    out["coef"] = coef
    out["std"] = std
    out["mean"] = a + (v + coef[:, None] * score) * dt
    return out


def gaussian_log_prob(x, mean, std, dt):
    """Row-wise ``log N(x; mean, std^2 dt I)``; deterministic rows (std = 0) contribute 0."""
    d = x.shape[-1]
    var = std * std * dt
    r = x - mean
    sq = np.sum(r * r, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = -0.5 * d * (LOG_2PI + np.log(var)) - sq / (2.0 * var)
    return np.where(std > 0, lp, 0.0)


def _split_obs(s, n=None):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim <= 1:
        s = s.reshape(1, -1)
        if n is not None:
            s = np.broadcast_to(s, (n, s.shape[1]))
    return s


def sample_action(velocity, heads: ControlHeads, s, K: int, variant="scoreflow", clip: ClipPolicy = NO_CLIP,
                  seed=0, rng=None, a0=None, noise=None) -> FlowTrajectory:
    """Run ``K`` stochastic steps from ``a0 ~ N(0, I)`` for one observation or a batch.

    ``a0`` and ``noise`` (shape ``(n, K, d)``) may be supplied to replay a
    chain; otherwise both come from the seeded sampler stream.
    """
    if K < 1:
        raise DomainError(f"need at least one step, got K={K}")
    _check_variant(variant, heads)
    s = _split_obs(s)
    n, d = s.shape[0], velocity.out_dim
    if rng is None:
        rng = make_rng(seed, SAMPLER)
    a = rng.standard_normal((n, d)) if a0 is None else np.asarray(a0, dtype=np.float64).reshape(n, d)
    eps = rng.standard_normal((n, K, d)) if noise is None else np.asarray(noise, dtype=np.float64).reshape(n, K, d)
    dt = 1.0 / K
    sq_dt = np.sqrt(dt)
    actions = np.empty((n, K + 1, d))
    raw = np.empty((n, K, d))
    means = np.empty((n, K, d))
    stds = np.empty((n, K))
    coefs = np.empty((n, K))
    logp = np.zeros(n)
    actions[:, 0] = a
    for k in range(K):
        st = step_stats(velocity, heads, variant, a, k / K, s, dt)
        mu, sig = st["mean"], st["std"]
        nxt = mu + sig[:, None] * sq_dt * eps[:, k]
        if not np.all(np.isfinite(nxt)):
            raise NonFiniteError(f"non-finite state at step {k} ({variant})", index=k)
        logp = logp + gaussian_log_prob(nxt, mu, sig, dt)
        raw[:, k], means[:, k], stds[:, k], coefs[:, k] = nxt, mu, sig, st["coef"]
        if clip.enabled:
            bound = clip.final_clip if k == K - 1 else clip.intermediate_clip
            nxt = np.clip(nxt, -bound, bound)
        actions[:, k + 1] = nxt
        a = nxt
    return FlowTrajectory(actions, raw, means, stds, eps, coefs, logp, variant)


def _chain_rows(traj: FlowTrajectory, s):
    n, K = traj.actions.shape[0], traj.K
    s = _split_obs(s, n)
    if s.shape[0] != n:
        raise ShapeError(f"{s.shape[0]} observations for {n} trajectories")
    d = traj.actions.shape[2]
    states = traj.actions[:, :K].reshape(n * K, d)
    t = np.tile(np.arange(K) / K, n)
    obs = np.repeat(s, K, axis=0)
    return states, t, obs


def trajectory_log_prob(velocity, heads: ControlHeads, s, traj: FlowTrajectory, variant=None) -> np.ndarray:
    """Recompute ``sum_k log N(raw^k; mu^k, sigma_k^2 dt I)`` on the stored chain."""
    variant = traj.variant if variant is None else variant
    _check_variant(variant, heads)
    if traj.actions.shape[2] != velocity.out_dim:
        raise ShapeError("trajectory action dimension does not match the velocity field")
    n, K = traj.actions.shape[0], traj.K
    dt = 1.0 / K
    states, t, obs = _chain_rows(traj, s)
    st = step_stats(velocity, heads, variant, states, t, obs, dt)
    lp = gaussian_log_prob(traj.raw.reshape(n * K, -1), st["mean"], st["std"], dt)
    return lp.reshape(n, K).sum(axis=1)


@dataclass
class ChainEval:
    """Forward pass over stored chains, kept for a later backward pass."""

    log_prob: np.ndarray
    stds: np.ndarray
    drift_coef: np.ndarray
    variant: str
    n: int
    K: int
    _velocity: ParamBundle = field(repr=False, default=None)
    _heads: ControlHeads = field(repr=False, default=None)
    _stats: dict = field(repr=False, default_factory=dict)
    _x: np.ndarray = field(repr=False, default=None)

    def backward(self, weights, std_upstream=None) -> dict:
        """Gradient of ``sum_i w_i logp_i + sum_ik g_ik sigma_ik`` for every head in use.

        Keys: ``velocity``, ``scheduler``, ``variance``, ``coupling``.
        """
        st, heads, variant = self._stats, self._heads, self.variant
        n, K = self.n, self.K
        dt = 1.0 / K
        x, mu, std, coef = self._x, st["mean"], st["std"], st["coef"]
        d = x.shape[1]
        w = np.repeat(np.asarray(weights, dtype=np.float64).reshape(n), K)
        r = x - mu
        safe = std > 0
        std_safe = np.where(safe, std, 1.0)
        var = std_safe * std_safe * dt
        g_mu = np.where(safe[:, None], w[:, None] * r / var[:, None], 0.0)
        g_std = np.where(safe, w * (-d / std_safe + np.sum(r * r, axis=1) / (std_safe * var)), 0.0)
        if std_upstream is not None:
            g_std = g_std + np.asarray(std_upstream, dtype=np.float64).reshape(n * K)

        one_m_t = 1.0 - st["t"]
        g_v = g_mu * dt * (1.0 + coef * st["t"] / one_m_t)[:, None]
        g_coef = np.sum(g_mu * dt * st["score"], axis=1)
        grads = {"velocity": mlp_backward(self._velocity, st["vcache"], g_v)[0]}
        if variant in ("scoreflow", "noise_only", "alpha_one"):
            lo, hi = heads.variance.sigma_min, heads.variance.sigma_max
            g_raw = g_std * (hi - lo) / 2.0 * (1.0 - np.tanh(st["sraw"]) ** 2)
            grads["variance"] = mlp_backward(heads.variance.params, st["scache"], g_raw[:, None])[0]
            if variant == "scoreflow":
                grads["scheduler"] = mlp_backward(heads.scheduler, st["acache"], (g_coef * one_m_t)[:, None])[0]
        elif variant == "coupled_learned":
            # coef = lambda and sigma = sqrt(2 lambda) in exact arithmetic
            g_lam = g_coef + np.where(safe, g_std / std_safe, 0.0)
            grads["coupling"] = mlp_backward(heads.coupling, st["ccache"], (g_lam * one_m_t)[:, None])[0]
        return grads


def evaluate_chain(velocity, heads: ControlHeads, s, traj: FlowTrajectory, variant=None) -> ChainEval:
    """Recompute per-step means/stds and log-likelihoods with gradient caches."""
    variant = traj.variant if variant is None else variant
    _check_variant(variant, heads)
    n, K = traj.actions.shape[0], traj.K
    dt = 1.0 / K
    states, t, obs = _chain_rows(traj, s)
    st = step_stats(velocity, heads, variant, states, t, obs, dt, keep_cache=True)
    x = traj.raw.reshape(n * K, -1)
    lp = gaussian_log_prob(x, st["mean"], st["std"], dt)
    return ChainEval(lp.reshape(n, K).sum(axis=1), st["std"].reshape(n, K), st["coef"].reshape(n, K),
                     variant, n, K, velocity, heads, st, x)


def trajectory_log_prob_grad(velocity, heads: ControlHeads, s, traj: FlowTrajectory, weights,
                             std_upstream=None, variant=None):
    """``(log_probs, grads)`` for the weighted objective; see :meth:`ChainEval.backward`."""
    ev = evaluate_chain(velocity, heads, s, traj, variant)
    return ev.log_prob, ev.backward(weights, std_upstream)


def chain_entropy(stds, d: int, dt: float):
    """Entropy of the Gaussian chain given its visited means: ``sum_k d/2 ln(2 pi e sigma_k^2 dt)``."""
    stds = np.asarray(stds, dtype=np.float64)
    if stds.size and np.any(stds <= 0):
        raise DomainError("chain entropy needs positive stds")
    return np.sum(0.5 * d * (LOG_2PI + 1.0 + np.log(stds * stds * dt)), axis=-1)


def scoreflow_step(velocity, scheduler, variance, a, t, s, eps, dt, alpha=None):
    """One decoupled step; returns ``(a_next, mean, std, log_prob)`` before any clipping.

    ``alpha`` overrides the scheduler output (e.g. ``0.0`` for the
    noise-only ablation).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    single = np.ndim(eps) == 1
    if alpha is None:
        heads, variant = ControlHeads(scheduler, variance), "scoreflow"
    else:
        heads, variant = ControlHeads(None, variance), "noise_only"
    st = step_stats(velocity, heads, variant, a, t, _split_obs(s, a.shape[0]), dt)
    mean, std = st["mean"], st["std"]
    if alpha is not None:
        mean = a + (st["v"] + float(alpha) * (1.0 - t) * st["score"]) * dt
    if np.any(std <= 0):
        raise DomainError("variance predictor produced a non-positive std")
    nxt = mean + std[:, None] * np.sqrt(dt) * np.atleast_2d(eps)
    lp = gaussian_log_prob(nxt, mean, std, dt)
    if single:
        return nxt[0], mean[0], float(std[0]), float(lp[0])
    return nxt, mean, std, lp


def score_sde_step(velocity, lam, a, t, s, eps, dt):
    """Coupled step: drift ``v + lambda score``, diffusion std ``sqrt(2 lambda)``.

    ``lam`` is a number or a callable of ``t``. A zero ``lambda`` gives the
    deterministic Euler step with a zero log-prob contribution.
    """
    lam_t = float(lam(t)) if callable(lam) else float(lam)
    if lam_t < 0:
        raise DomainError(f"lambda must be non-negative, got {lam_t}")
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    single = np.ndim(eps) == 1
    n = a.shape[0]
    inp = network_input(a, t, _split_obs(s, n))
    v = mlp_forward_cached(velocity, inp)[0]
    score = (t * v - a) / (1.0 - t)
    std = np.sqrt(2.0 * lam_t)
    coef = std * std / 2.0
    mean = a + (v + coef * score) * dt
    nxt = mean + std * np.sqrt(dt) * np.atleast_2d(eps)
    lp = gaussian_log_prob(nxt, mean, np.full(n, std), dt)
    if single:
        return nxt[0], mean[0], std, float(lp[0])
    return nxt, mean, np.full(n, std), lp
