"""
The check battery behind ``scoreflow verify``.

Each check returns a :class:`CheckResult` holding the worst residual seen
and the threshold it is held to. Bit-exact checks use threshold 0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .flow import fm_loss, init_velocity, velocity as velocity_field
from .nn import finite_diff_check, softplus
from .oracles import (
    GaussianData,
    MixtureData,
    duality_check,
    mc_posterior_score,
    mixture_score,
    train_mixture_velocity,
    trained_velocity_duality,
)
from .ppo import critic_loss, init_critic, ppo_surrogate
from .rng import ORACLE, make_rng
from .sampler import (
    VARIANTS,
    ClipPolicy,
    ControlHeads,
    chain_entropy,
    evaluate_chain,
    init_coupling,
    sample_action,
    trajectory_log_prob,
)
from .score import SCHEDULER_INIT_BIAS, VariancePredictor, alpha_raw, alpha_scaled, closed_form_score, \
    init_scheduler, init_variance


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_residual: float
    threshold: float
    passed: bool
    seconds: float = 0.0


def _result(name, residual, threshold, start, strict=False):
    residual = float(residual)
    ok = residual <= threshold if not strict else residual < threshold
    return CheckResult(name, residual, float(threshold), bool(ok and np.isfinite(residual)), time.time() - start)


def check_duality_sweep(n=10_000, seed=0, dim=3) -> CheckResult:
    """Velocity-derived score against the exact Gaussian marginal score."""
    start = time.time()
    rng = make_rng(seed, ORACLE, 10)
    worst = 0.0
    for _ in range(n):
        data = GaussianData(rng.uniform(-2, 2, dim), rng.uniform(0.1, 4.0))
        t = rng.uniform(0.0, 0.999)
        a = rng.uniform(-3, 3, dim)
        worst = max(worst, duality_check(data, a, t))
    return _result("duality_sweep", worst, 1e-10, start, strict=True)


def random_mixture(rng, dim=2, max_components=3) -> MixtureData:
    J = int(rng.integers(1, max_components + 1))
    return MixtureData(rng.dirichlet(np.ones(J)), rng.uniform(-2, 2, (J, dim)), rng.uniform(0.1, 1.0, J))


def check_mc_posterior(n_triples=50, n_samples=100_000, seed=0) -> CheckResult:
    """Importance-sampled posterior expectation against the exact mixture score.

    Query points are drawn from the path marginal at their time, the
    region where the posterior expectation is defined by typical data.
    Residual is the largest per-coordinate z-score.
    """
    start = time.time()
    rng = make_rng(seed, ORACLE, 11)
    worst = 0.0
    for i in range(n_triples):
        mix = random_mixture(rng)
        t = rng.uniform(0.0, 0.9)
        a = (1 - t) * rng.standard_normal(mix.dim) + t * mix.sample(1, rng)[0]
        est = mc_posterior_score(mix, a, t, n_samples, seed=seed * 1000 + i)
        z = np.abs(est.estimate - mixture_score(mix, a, t)) / est.std_error
        worst = max(worst, float(z.max()))
    return _result("mc_posterior_3se", worst, 3.0, start)


def check_trained_duality(seed=0, steps=3000) -> CheckResult:
    start = time.time()
    mix = MixtureData(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([0.25 ** 2, 0.25 ** 2]))
    res = train_mixture_velocity(mix, steps=steps, seed=seed)
    rep = trained_velocity_duality(res.params, mix, np.linspace(-2.0, 2.0, 81), np.linspace(0.0, 0.9, 10))
    return _result("trained_duality_median", rep.median_bulk_error, 0.15, start, strict=True)


def small_policy(seed=0, d=2, m=3, hidden=(8, 8)):
    """Random small velocity field and heads with a non-trivial scheduler."""
    rng = make_rng(seed, ORACLE, 12)
    vel = init_velocity(d, m, hidden, seed=seed)
    sched = init_scheduler(16, seed=seed)
    sched.weights[-1][:] = rng.standard_normal(sched.weights[-1].shape)
    coupling = init_coupling(d, m, (8,), seed=seed)
    coupling.weights[-1][:] = rng.standard_normal(coupling.weights[-1].shape)
    heads = ControlHeads(sched, init_variance(d, m, 0.1, 0.24, (8,), seed=seed), coupling, 0.1)
    obs = rng.standard_normal((1, m))
    return vel, heads, obs, rng


def check_likelihood(n_traj=1000, seed=0, K=4) -> CheckResult:
    """Recomputed chain log-likelihood against the value accumulated while sampling."""
    start = time.time()
    vel, heads, _, rng = small_policy(seed)
    per = n_traj // len(VARIANTS)
    worst = 0.0
    for i, var in enumerate(VARIANTS):
        obs = rng.standard_normal((per, vel.in_dim - vel.out_dim - 1))
        tr = sample_action(vel, heads, obs, K, var, ClipPolicy(3.0, 1.0, True), seed=seed * 10 + i)
        worst = max(worst, float(np.max(np.abs(trajectory_log_prob(vel, heads, obs, tr) - tr.log_prob))))
    return _result("likelihood_exactness", worst, 1e-9, start)


def _perturb(bundle, rng, scale=0.1):
    return bundle.with_arrays([a + scale * rng.standard_normal(a.shape) for a in bundle.arrays()])


def check_decoupling(n_perturb=100, seed=0, K=4):
    """Stored chains re-evaluated under perturbed heads.

    Changing the variance head must leave every step mean bit-identical;
    changing the scheduler must leave every step std bit-identical.
    """
    start = time.time()
    vel, heads, _, rng = small_policy(seed)
    obs = rng.standard_normal((32, vel.in_dim - vel.out_dim - 1))
    tr = sample_action(vel, heads, obs, K, "scoreflow", seed=seed)
    base = evaluate_chain(vel, heads, obs, tr)
    base_mu = base._stats["mean"]
    mean_diff = std_diff = 0.0
    for _ in range(n_perturb):
        var2 = VariancePredictor(_perturb(heads.variance.params, rng), heads.variance.sigma_min,
                                 heads.variance.sigma_max)
        ev = evaluate_chain(vel, ControlHeads(heads.scheduler, var2, None, heads.lambda_max), obs, tr)
        mean_diff = max(mean_diff, float(np.max(np.abs(ev._stats["mean"] - base_mu))))
        ev = evaluate_chain(vel, ControlHeads(_perturb(heads.scheduler, rng), heads.variance, None,
                                              heads.lambda_max), obs, tr)
        std_diff = max(std_diff, float(np.max(np.abs(ev.stds - base.stds))))
    return [_result("decoupling_mean_vs_sigma", mean_diff, 0.0, start),
            _result("decoupling_std_vs_alpha", std_diff, 0.0, start)]


def check_boundary(n_points=100_000, seed=0):
    """Terminal zero, drift bound, and the fresh-init value of the scaled scheduler."""
    start = time.time()
    vel, heads, _, rng = small_policy(seed)
    sched = heads.scheduler
    out = [_result("alpha_scaled_at_t1", abs(alpha_scaled(sched, 1.0)), 0.0, start)]

    t = rng.uniform(0.0, 1.0 - 1e-6, n_points)
    t[:100] = 1.0 - np.logspace(-6, -1, 100)
    a = rng.uniform(-3, 3, (n_points, vel.out_dim))
    s = rng.standard_normal((n_points, vel.in_dim - vel.out_dim - 1))
    v = velocity_field(vel, a, t, s)
    drift = alpha_scaled(sched, t)[:, None] * closed_form_score(v, a, t[:, None])
    sup_alpha = float(np.max(alpha_raw(sched, np.linspace(0.0, 1.0, 10_001))))
    sup_alpha = max(sup_alpha, float(np.max(alpha_raw(sched, t))))
    ratio = np.linalg.norm(drift, axis=1) / (sup_alpha * (np.linalg.norm(v, axis=1) + np.linalg.norm(a, axis=1)))
    out.append(_result("alpha_score_drift_bound_ratio", float(np.max(ratio)), 1.0, start))

    fresh = init_scheduler(16, seed=seed + 1)
    grid = np.linspace(0.0, 1.0, 1001)
    expect = (1.0 - grid) * softplus(SCHEDULER_INIT_BIAS)
    out.append(_result("alpha_init_matches", float(np.max(np.abs(alpha_scaled(fresh, grid) - expect))), 1e-6, start))
    return out


def _heads_with(heads, params):
    var = heads.variance
    if "variance" in params:
        var = VariancePredictor(params["variance"], var.sigma_min, var.sigma_max)
    return params.get("velocity"), ControlHeads(params.get("scheduler", heads.scheduler), var,
                                                params.get("coupling", heads.coupling), heads.lambda_max)


def check_gradients(seed=0, K=4):
    """Central-difference checks on small random nets."""
    start = time.time()
    vel, heads, _, rng = small_policy(seed)
    m = vel.in_dim - vel.out_dim - 1
    obs = rng.standard_normal((6, m))
    worst = {}

    a1 = rng.uniform(-1, 1, (6, vel.out_dim))
    a0 = rng.standard_normal((6, vel.out_dim))
    tt = rng.uniform(0, 0.999, 6)
    worst["fm_loss"] = finite_diff_check(lambda p: fm_loss(p, obs, a1, a0=a0, t=tt), vel)

    w = rng.standard_normal(6)
    lp_worst = 0.0
    for var in VARIANTS:
        tr = sample_action(vel, heads, obs, K, var, seed=seed)
        keys = ["velocity"] + {"scoreflow": ["scheduler", "variance"], "noise_only": ["variance"],
                               "alpha_one": ["variance"], "coupled_learned": ["coupling"]}.get(var, [])

        def loss(p, tr=tr, var=var):
            v, h = _heads_with(heads, p)
            ev = evaluate_chain(v, h, obs, tr, var)
            g = ev.backward(w)
            return float(np.dot(w, ev.log_prob)), {k: g[k] for k in p}

        p0 = {"velocity": vel, "scheduler": heads.scheduler, "variance": heads.variance.params,
              "coupling": heads.coupling}
        lp_worst = max(lp_worst, finite_diff_check(loss, {k: p0[k] for k in keys}))
    worst["trajectory_log_prob"] = lp_worst

    tr = sample_action(vel, heads, obs, K, "scoreflow", seed=seed)
    d, dt = vel.out_dim, 1.0 / K

    def ent_loss(p):
        v, h = _heads_with(heads, {"velocity": vel, "variance": p})
        ev = evaluate_chain(v, h, obs, tr)
        ent = chain_entropy(ev.stds, d, dt)
        g = ev.backward(np.zeros(6), (d / ev.stds) * w[:, None])
        return float(np.dot(w, ent)), g["variance"]

    worst["chain_entropy"] = finite_diff_check(ent_loss, heads.variance.params)

    critic = init_critic(m, (8, 8), seed=seed)
    returns = rng.standard_normal(6)
    worst["critic_loss"] = finite_diff_check(lambda p: critic_loss(p, obs, returns, 0.5), critic)
    return [_result(f"grad_{k}", v, 1e-4, start) for k, v in worst.items()]


def check_surrogate_cases():
    """The three tabulated clipped-surrogate cases, clip eps = 0.01."""
    start = time.time()
    cases = [  # (ratio, advantage, expected objective)
        (1.0, 1.7, 1.7),
        (1.5, 1.0, 1.01),
        (0.5, -1.0, -0.99),
    ]
    worst = 0.0
    for r, adv, want in cases:
        got = ppo_surrogate(np.log([r]), np.zeros(1), np.array([adv]), 0.01)
        worst = max(worst, abs(float(np.asarray(got).ravel()[0]) - want))
    return _result("ppo_surrogate_cases", worst, 1e-12, start)


def check_coupling(seed=0, n=200, K=4) -> CheckResult:
    """Squared std equals twice the drift weight on every coupled step."""
    start = time.time()
    vel, heads, _, rng = small_policy(seed)
    worst = 0.0
    for i, var in enumerate(("score_sde_coupled", "coupled_learned")):
        obs = rng.standard_normal((n, vel.in_dim - vel.out_dim - 1))
        tr = sample_action(vel, heads, obs, K, var, ClipPolicy(), seed=seed + i)
        worst = max(worst, float(np.max(np.abs(tr.stds * tr.stds - 2.0 * tr.drift_coef))))
    return _result("score_sde_coupling", worst, 0.0, start)


def run_battery(seed=0, include_trained=True) -> list:
    results = [check_duality_sweep(seed=seed), check_mc_posterior(seed=seed)]
    if include_trained:
        results.append(check_trained_duality(seed=seed))
    results.append(check_likelihood(seed=seed))
    results.extend(check_decoupling(seed=seed))
    results.extend(check_boundary(seed=seed))
    results.extend(check_gradients(seed=seed))
    results.append(check_surrogate_cases())
    results.append(check_coupling(seed=seed))
    return results
