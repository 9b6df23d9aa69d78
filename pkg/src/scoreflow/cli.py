"""
Command-line entry point.

    scoreflow verify [--out report.csv] [--skip-trained]
    scoreflow pretrain --config F
    scoreflow finetune --config F --checkpoint P
    scoreflow eval --runs A,B --seeds N [--config F]
    scoreflow sweep-alpha --checkpoint P [P ...] [--grid N]

Exit status: 0 success, 1 a check failed, 2 bad usage, config or checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, defaults, load_config
from .errors import CheckpointError, ConfigurationError, ScoreFlowError, UsageError
from .finetune import METRIC_COLUMNS, build_policy, evaluate_policy, finetune, make_demo_dataset, pretrain_toy
from .env import PointMassEnv
from .ppo import init_critic, init_optimizers
from .sampler import VARIANTS
from .score import NoiseBoundSchedule, alpha_scaled
from .stats import welch_t_test
from .verify import run_battery

log = logging.getLogger("scoreflow")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "pass" if x else "fail"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _out_path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg["output_dir"], name)


def cmd_verify(args) -> int:
    results = run_battery(seed=args.seed, include_trained=not args.skip_trained)
    write_csv(args.out, ("check", "max_residual", "threshold", "pass"),
              [(r.name, r.max_residual, r.threshold, r.passed) for r in results])
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:34s} {r.max_residual:.3e} (threshold {r.threshold:.1e})")
    print(f"report: {args.out}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    toy = cfg.to_toy()
    demo, res = pretrain_toy(toy, cfg.seed)
    policy = build_policy(res.params, toy, cfg.variant, cfg.seed)
    critic = init_critic(PointMassEnv.obs_dim, toy.critic_hidden, cfg.seed)
    opts = init_optimizers(policy, critic)
    opts["velocity"] = res.optimizer
    ck = Checkpoint(cfg, policy, critic, opts, 0, cfg["finetune.n_iters"], demo.offset, demo.scale, None)
    path = args.out or _out_path(cfg, f"pretrain_seed{cfg.seed}.ckpt")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_checkpoint(ck, path)
    write_csv(_out_path(cfg, f"pretrain_loss_seed{cfg.seed}.csv"), ("step", "fm_loss"), enumerate(res.losses))
    print(f"pretrain: final FM loss {res.final_loss:.4f}, checkpoint {path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    ck = load_checkpoint(args.checkpoint)
    toy = cfg.to_toy()
    policy = ck.policy
    if policy.variant != cfg.variant:
        raise UsageError(f"checkpoint holds a {policy.variant} policy, config asks for {cfg.variant}")
    demo = make_demo_dataset(toy, cfg.seed)
    n_iters = cfg["finetune.n_iters"]
    schedule = NoiseBoundSchedule(toy.hold_ratio, toy.decay_mix, n_iters)
    stem = _out_path(cfg, f"finetune_{cfg.variant}_seed{cfg.seed}")

    def checkpoint_cb(it, pol, critic, opts, normalizer, row):
        if args.save_every and (it + 1) % args.save_every == 0 and it + 1 < n_iters:
            save_checkpoint(Checkpoint(cfg, pol, critic, opts, it + 1, n_iters, ck.action_offset, ck.action_scale,
                                       normalizer), f"{stem}_iter{it + 1}.ckpt")

    res = finetune(policy, toy.env, toy.ppo, schedule, n_iters, cfg.seed, toy.finetune, demo, ck.critic,
                   callback=checkpoint_cb, optimizers=ck.optimizers if ck.iteration else None,
                   normalizer=ck.reward_normalizer, start_iter=ck.iteration, sigma_max=toy.sigma_max)
    write_csv(f"{stem}.csv", METRIC_COLUMNS, ([row[c] for c in METRIC_COLUMNS] for row in res.metrics))
    out = Checkpoint(cfg, res.policy, res.critic, res.optimizers, n_iters, n_iters, ck.action_offset,
                     ck.action_scale, res.reward_normalizer)
    save_checkpoint(out, f"{stem}.ckpt")
    final = evaluate_policy(res.policy, toy.env, cfg.seed, toy.eval_episodes)
    print(f"finetune: eval return {final.mean():.3f} +- {final.std():.3f}, metrics {stem}.csv")
    return EXIT_OK


def _run_config(base: RunConfig, spec: str) -> RunConfig:
    """A run is a sampler variant name or a config file path."""
    if spec in VARIANTS:
        return base.replace(sampler__variant=spec)
    if os.path.isfile(spec):
        return load_config(spec)
    raise UsageError(f"run {spec!r} is neither a sampler variant ({', '.join(VARIANTS)}) nor a config file")


def cmd_eval(args) -> int:
    base = load_config(args.config) if args.config else defaults()
    names = [r.strip() for r in args.runs.split(",") if r.strip()]
    if len(names) < 2:
        raise UsageError("--runs needs at least two comma-separated runs")
    if args.seeds < 2:
        raise UsageError("--seeds must be at least 2 for a t-test")
    seeds = list(base["seeds"])[:args.seeds]
    seeds += list(range(max(seeds) + 1, max(seeds) + 1 + args.seeds - len(seeds)))
    pretrained = {}
    rows, finals = [], {}
    for name in dict.fromkeys(names):
        cfg = _run_config(base, name)
        toy = cfg.to_toy()
        finals[name] = []
        for seed in seeds:
            key = (cfg.replace(sampler__variant="scoreflow").dumps(), seed)
            if key not in pretrained:
                pretrained[key] = pretrain_toy(toy, seed)
            demo, pre = pretrained[key]
            policy = build_policy(pre.params, toy, cfg.variant, seed)
            bc = evaluate_policy(policy, toy.env, seed, toy.eval_episodes).mean()
            schedule = NoiseBoundSchedule(toy.hold_ratio, toy.decay_mix, toy.finetune.n_iters)
            res = finetune(policy, toy.env, toy.ppo, schedule, toy.finetune.n_iters, seed, toy.finetune, demo,
                           init_critic(PointMassEnv.obs_dim, toy.critic_hidden, seed))
            final = evaluate_policy(res.policy, toy.env, seed, toy.eval_episodes).mean()
            rows.append((name, seed, float(bc), float(final)))
            finals[name].append(float(final))
            log.info("%s seed %d: bc %.3f final %.3f", name, seed, bc, final)
    out_dir = base["output_dir"]
    write_csv(os.path.join(out_dir, "eval_returns.csv"), ("run", "seed", "bc_return", "final_return"), rows)
    ref = names[0]
    summary = []
    for name in names[1:]:
        t, p = welch_t_test(finals[ref], finals[name])
        summary.append((ref, name, np.mean(finals[ref]), np.mean(finals[name]), t, p))
    for name in dict.fromkeys(names):
        vals = np.asarray(finals[name])
        print(f"{name:20s} {vals.mean():9.3f} +- {vals.std(ddof=1):.3f}")
    for ref_name, name, _, _, t, p in summary:
        print(f"welch {ref_name} vs {name}: t={t:.3f} p={p:.4f}")
    write_csv(os.path.join(out_dir, "eval_summary.csv"),
              ("run_a", "run_b", "mean_a", "mean_b", "welch_t", "welch_p"), summary)
    return EXIT_OK


def cmd_sweep_alpha(args) -> int:
    if args.grid < 2:
        raise UsageError("--grid must be at least 2")
    t = np.linspace(0.0, 1.0, args.grid)
    rows = []
    out = args.out
    for path in args.checkpoint:
        ck = load_checkpoint(path)
        if ck.policy.heads.scheduler is None:
            raise UsageError(f"{path} has no score scheduler")
        vals = alpha_scaled(ck.policy.heads.scheduler, t)
        rows.extend((ck.iteration, float(tt), float(v)) for tt, v in zip(t, vals))
        if out is None:
            out = os.path.join(ck.config["output_dir"], "alpha_sweep.csv")
    write_csv(out, ("training_stage", "t", "alpha_scaled"), rows)
    print(f"sweep: {len(rows)} rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scoreflow", description="Score-modulated flow policies on a point-mass task.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the oracle and invariant battery")
    v.add_argument("--out", default="verify_report.csv")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--skip-trained", action="store_true", help="skip the (slow) trained-duality check")
    v.set_defaults(func=cmd_verify)

    pt = sub.add_parser("pretrain", help="flow-matching pretraining on scripted demos")
    pt.add_argument("--config", required=True)
    pt.add_argument("--out", help="checkpoint path (default: <output_dir>/pretrain_seed<seed>.ckpt)")
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="PPO fine-tuning from a checkpoint")
    ft.add_argument("--config", required=True)
    ft.add_argument("--checkpoint", required=True)
    ft.add_argument("--save-every", type=int, default=0, help="write an intermediate checkpoint every N iterations")
    ft.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("eval", help="multi-seed comparison with Welch's t-test")
    ev.add_argument("--runs", required=True, help="comma-separated variant names or config files")
    ev.add_argument("--seeds", type=int, required=True)
    ev.add_argument("--config", help="base config for variant-named runs")
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep-alpha", help="export alpha_scaled(t) from one or more checkpoints")
    sw.add_argument("--checkpoint", required=True, nargs="+")
    sw.add_argument("--grid", type=int, default=21)
    sw.add_argument("--out")
    sw.set_defaults(func=cmd_sweep_alpha)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, CheckpointError, UsageError) as exc:
        print(f"scoreflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScoreFlowError as exc:
        print(f"scoreflow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
