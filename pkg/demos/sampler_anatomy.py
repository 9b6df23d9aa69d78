"""Walk one observation through each sampler and show what every step records.

    python demos/sampler_anatomy.py
"""

import numpy as np

from scoreflow.sampler import VARIANTS, ClipPolicy, ControlHeads, evaluate_chain, sample_action
from scoreflow.score import VariancePredictor
from scoreflow.verify import small_policy

vel, heads, obs, rng = small_policy(seed=0)
K = 4
print(f"velocity net {vel.n_params} params, scheduler {heads.scheduler.n_params}, "
      f"variance head {heads.variance.params.n_params}\n")

for variant in VARIANTS:
    tr = sample_action(vel, heads, obs, K, variant, ClipPolicy(), seed=1)
    print(variant)
    for k in range(K):
        print(f"  step {k}  t={k / K:.2f}  drift weight {tr.drift_coef[0, k]:.4f}  std {tr.stds[0, k]:.4f}  "
              f"state {np.array2string(tr.actions[0, k + 1], precision=3)}")
    print(f"  log-likelihood of the chain {tr.log_prob[0]:.4f}\n")

# Mean and noise are steered by separate heads: moving one leaves the other untouched.
tr = sample_action(vel, heads, obs, K, "scoreflow", seed=1)
base = evaluate_chain(vel, heads, obs, tr)
p = heads.variance.params.copy()
p.biases[-1] += 1.0
louder = ControlHeads(heads.scheduler, VariancePredictor(p, 0.1, 0.24), None, heads.lambda_max)
ev = evaluate_chain(vel, louder, obs, tr)
print("after shifting the variance head:")
print(f"  max change in step means {np.max(np.abs(ev._stats['mean'] - base._stats['mean'])):.1e}")
print(f"  max change in step stds  {np.max(np.abs(ev.stds - base.stds)):.3f}")
