"""Pretrain on scripted demos, fine-tune one seed, and export the learned alpha(t).

    python demos/toy_finetune.py [seed]

Takes a couple of minutes. Writes demo_run/ in the current directory.
"""

import os
import sys

import numpy as np

from scoreflow.cli import write_csv
from scoreflow.env import PointMassEnv
from scoreflow.finetune import METRIC_COLUMNS, ToyConfig, build_policy, evaluate_policy, finetune, pretrain_toy
from scoreflow.ppo import init_critic
from scoreflow.score import NoiseBoundSchedule, alpha_scaled

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = ToyConfig()
out = "demo_run"
os.makedirs(out, exist_ok=True)

demo, pre = pretrain_toy(cfg, seed)
print(f"pretrained on {len(demo)} demo steps, final FM loss {pre.final_loss:.4f}")
policy = build_policy(pre.params, cfg, "scoreflow", seed)
print(f"BC return {evaluate_policy(policy, cfg.env, seed, cfg.eval_episodes).mean():.3f}")

snapshots = {0: policy.heads.scheduler}


def progress(it, pol, critic, opts, norm, row):
    if (it + 1) % 20 == 0:
        snapshots[it + 1] = pol.heads.scheduler
        print(f"  iter {it + 1:3d}  train return {row['return_mean']:.3f}  sigma {row['sigma_mean']:.3f}  "
              f"alpha(0) {row['alpha_mean_at_t0']:.4f}  kl {row['approx_kl']:.2e}")


sched = NoiseBoundSchedule(cfg.hold_ratio, cfg.decay_mix, cfg.finetune.n_iters)
res = finetune(policy, cfg.env, cfg.ppo, sched, cfg.finetune.n_iters, seed, cfg.finetune, demo,
               init_critic(PointMassEnv.obs_dim, cfg.critic_hidden, seed), callback=progress)
print(f"fine-tuned return {evaluate_policy(res.policy, cfg.env, seed, cfg.eval_episodes).mean():.3f}")

write_csv(os.path.join(out, "metrics.csv"), METRIC_COLUMNS, ([r[c] for c in METRIC_COLUMNS] for r in res.metrics))
t = np.linspace(0, 1, 21)
write_csv(os.path.join(out, "alpha_sweep.csv"), ("training_stage", "t", "alpha_scaled"),
          ((stage, float(tt), float(a)) for stage, p in snapshots.items() for tt, a in zip(t, alpha_scaled(p, t))))
print(f"wrote {out}/metrics.csv and {out}/alpha_sweep.csv")
