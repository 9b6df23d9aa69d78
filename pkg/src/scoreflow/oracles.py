"""
Analytic and Monte-Carlo ground truth for the linear Gaussian-source path.

For ``a_t = (1 - t) a0 + t a1`` with ``a0 ~ N(0, I)``:

    a_t | a1 ~ N(t a1, (1 - t)^2 I)
    score(a, t) = E[ -(a - t a1) / (1 - t)^2  |  a_t = a ]

Gaussian data ``a1 ~ N(m, s2 I)`` gives a Gaussian marginal
``N(t m, ((1 - t)^2 + t^2 s2) I)``; finite isotropic mixtures give a
responsibility-weighted sum of such scores. The Monte-Carlo estimator
realizes the posterior expectation directly by self-normalized importance
weighting of prior draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .flow import DemoDataset, PretrainConfig, pretrain, velocity
from .rng import ORACLE, make_rng
from .score import closed_form_score


@dataclass(frozen=True)
class GaussianData:
    mean: np.ndarray
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise ConfigurationError("data variance must be positive")
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=np.float64)))

    def sample(self, n, rng):
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.mean.size))

    def as_mixture(self) -> "MixtureData":
        return MixtureData(np.array([1.0]), self.mean[None, :], np.array([self.var]))


@dataclass(frozen=True)
class MixtureData:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError("mixture weights must be positive and sum to 1")
        if means.shape[0] != w.size or var.shape != w.shape or np.any(var <= 0):
            raise ConfigurationError("mixture components are inconsistent")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n, rng):
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * rng.standard_normal((n, self.dim))


def _check_t(t, upper_open=True):
    if not 0.0 <= t < 1.0:
        raise DomainError(f"t must lie in [0, 1), got {t}")


def gaussian_marginal_score(data: GaussianData, a, t):
    _check_t(t)
    a = np.asarray(a, dtype=np.float64)
    var_t = (1.0 - t) ** 2 + t * t * data.var
    return -(a - t * data.mean) / var_t


def gaussian_optimal_velocity(data: GaussianData, a, t):
    """``E[a1 - a0 | a_t = a]`` from the conjugate posterior over ``a1``.

    Written as ``((1 - t)(m - a) + t s2 a) / ((1 - t)^2 + t^2 s2)``, which is
    ``(E[a1 | a] - a) / (1 - t)`` with the ``(1 - t)`` factor cancelled.
    """
    _check_t(t)
    a = np.asarray(a, dtype=np.float64)
    s2, m = data.var, data.mean
    denom = (1.0 - t) ** 2 + t * t * s2
    return ((1.0 - t) * (m - a) + t * s2 * a) / denom


def gaussian_posterior_mean(data: GaussianData, a, t):
    _check_t(t)
    a = np.asarray(a, dtype=np.float64)
    s2, m = data.var, data.mean
    return (m * (1.0 - t) ** 2 + t * s2 * a) / ((1.0 - t) ** 2 + t * t * s2)


def duality_check(data: GaussianData, a, t) -> float:
    """Sup-norm gap between the velocity-derived score and the exact marginal score."""
    if not 0.0 <= t <= 0.999:
        raise DomainError(f"duality check needs 0 <= t <= 0.999, got {t}")
    v = gaussian_optimal_velocity(data, a, t)
    return float(np.max(np.abs(closed_form_score(v, a, t) - gaussian_marginal_score(data, a, t))))


def _component_log_resp(data: MixtureData, a, t):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    var_t = (1.0 - t) ** 2 + t * t * data.variances  # (J,)
    diff = a[:, None, :] - t * data.means[None, :, :]  # (n, J, d)
    logp = (np.log(data.weights) - 0.5 * data.dim * np.log(2 * np.pi * var_t)
            - 0.5 * np.sum(diff * diff, axis=2) / var_t)
    return logp, diff, var_t


def mixture_log_density(data: MixtureData, a, t):
    _check_t(t)
    logp, _, _ = _component_log_resp(data, a, t)
    return np.logaddexp.reduce(logp, axis=1)


def mixture_score(data: MixtureData, a, t):
    """Exact marginal score of a Gaussian-mixture data law pushed along the path."""
    _check_t(t)
    a = np.asarray(a, dtype=np.float64)
    if t == 0.0:
        # the t = 0 marginal is the N(0, I) source whatever the data
        return -a
    logp, diff, var_t = _component_log_resp(data, a, t)
    resp = np.exp(logp - np.logaddexp.reduce(logp, axis=1, keepdims=True))
    out = np.sum(resp[:, :, None] * (-diff / var_t[None, :, None]), axis=1)
    return out[0] if a.ndim == 1 else out


@dataclass
class MCScore:
    estimate: np.ndarray
    std_error: np.ndarray
    ess: float
    low_ess: bool


def mc_posterior_score(data, a, t, n_samples=100_000, seed=0) -> MCScore:
    """Self-normalized importance estimate of ``E[-(a - t a1)/(1-t)^2 | a_t = a]``.

    Prior draws ``a1 ~ p_data`` are weighted by ``N(a; t a1, (1 - t)^2 I)``;
    the standard error is the jackknife over samples.
    """
    _check_t(t)
    if n_samples < 1000:
        raise DomainError("need at least 1000 samples")
    rng = make_rng(seed, ORACLE)
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    a1 = data.sample(n_samples, rng)
    diff = a[None, :] - t * a1
    logw = -0.5 * np.sum(diff * diff, axis=1) / (1.0 - t) ** 2
    w = np.exp(logw - logw.max())
    cond = -diff / (1.0 - t) ** 2
    sw = w.sum()
    swc = w @ cond
    est = swc / sw
    # leave-one-out ratio estimates
    with np.errstate(divide="ignore", invalid="ignore"):
        loo = (swc[None, :] - w[:, None] * cond) / (sw - w)[:, None]
    n = n_samples
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    # a single sample carrying all the weight leaves the jackknife undefined
    se = np.where(np.isfinite(se), se, np.inf)
    ess = float(sw * sw / np.sum(w * w))
    return MCScore(est, se, ess, ess < 10)


def train_mixture_velocity(data: MixtureData, n_samples=20_000, steps=3000, batch_size=512,
                           hidden=(64, 64, 64), lr=3e-3, seed=0):
    """Fit an observation-free velocity field to samples from ``data``."""
    rng = make_rng(seed, ORACLE, 1)
    acts = data.sample(n_samples, rng)
    ds = DemoDataset.from_arrays(np.zeros((n_samples, 0)), acts, bounds=(-1.0, 1.0))
    cfg = PretrainConfig(steps=steps, batch_size=batch_size, lr=lr, min_lr=lr / 30, hidden=hidden, seed=seed)
    return pretrain(ds, cfg)


@dataclass
class DualityReport:
    errors: np.ndarray
    bulk: np.ndarray
    a_grid: np.ndarray
    t_grid: np.ndarray

    @property
    def median_bulk_error(self) -> float:
        return float(np.median(self.errors[self.bulk]))

    @property
    def max_bulk_error(self) -> float:
        return float(np.max(self.errors[self.bulk]))


def trained_velocity_duality(params, data: MixtureData, a_grid, t_grid, bulk_quantile=0.05) -> DualityReport:
    """Compare the score implied by a trained velocity field with the exact mixture score.

    Errors are Euclidean norms per grid point; the bulk keeps points whose
    marginal density exceeds the given quantile of all grid densities.
    """
    a_grid = np.asarray(a_grid, dtype=np.float64)
    if a_grid.ndim == 1:
        a_grid = a_grid[:, None]
    t_grid = np.asarray(t_grid, dtype=np.float64)
    errors = np.empty((t_grid.size, a_grid.shape[0]))
    logdens = np.empty_like(errors)
    for i, t in enumerate(t_grid):
        v = velocity(params, a_grid, t, np.zeros((a_grid.shape[0], 0)))
        est = closed_form_score(v, a_grid, t)
        exact = mixture_score(data, a_grid, t)
        errors[i] = np.linalg.norm(est - exact, axis=1)
        logdens[i] = mixture_log_density(data, a_grid, t)
    bulk = logdens > np.quantile(logdens, bulk_quantile)
    return DualityReport(errors, bulk, a_grid, t_grid)
