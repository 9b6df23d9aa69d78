"""
Run configuration: a flat ``dotted.key = value`` text format.

Lines are ``key = value``; ``#`` starts a comment. Lists are comma
separated, booleans are ``true``/``false``. Every key has a default, unknown
keys are rejected, and each value remembers whether it came from the
default table, the file, or the environment.

``SCOREFLOW_SEED`` in the environment overrides ``seed``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources

from .env import EnvConfig
from .errors import ConfigurationError
from .finetune import FinetuneConfig, ToyConfig
from .flow import PretrainConfig
from .ppo import PPOConfig
from .sampler import VARIANTS, ClipPolicy

SEED_ENV_VAR = "SCOREFLOW_SEED"

# key -> (type tag, default, one-line description)
SCHEMA = {
    "seed": ("int", 0, "seed for pretrain / finetune commands"),
    "seeds": ("int_list", (0, 1, 2, 3, 4), "seed list for multi-seed evaluation"),
    "output_dir": ("str", "runs", "directory for checkpoints and CSV exports"),
    "env.horizon": ("int", 40, "steps per point-mass episode"),
    "env.action_scale": ("float", 0.1, "displacement per unit action"),
    "env.arena": ("float", 1.5, "position clamp"),
    "env.n_envs": ("int", 16, "parallel environments per rollout"),
    "demo.episodes": ("int", 64, "scripted demonstration episodes"),
    "demo.gain": ("float", 0.6, "scripted controller gain"),
    "demo.noise": ("float", 0.05, "scripted controller action noise"),
    "flow.hidden": ("int_list", (64, 64, 64), "velocity MLP hidden widths"),
    "flow.pretrain_steps": ("int", 2000, "flow-matching pretraining steps"),
    "flow.batch_size": ("int", 256, "pretraining minibatch"),
    "flow.lr": ("float", 3e-3, "pretraining peak learning rate"),
    "flow.min_lr": ("float", 1e-4, "pretraining final learning rate"),
    "flow.warmup_steps": ("int", 0, "pretraining linear warmup"),
    "sampler.variant": ("str", "scoreflow", "one of " + ", ".join(VARIANTS)),
    "sampler.K": ("int", 4, "denoising steps"),
    "sampler.clip": ("bool", True, "clip intermediate and final actions"),
    "sampler.clip_intermediate": ("float", 3.0, "clip value for intermediate actions"),
    "sampler.clip_final": ("float", 1.0, "clip value for the final action"),
    "score_control.scheduler_hidden": ("int", 16, "score scheduler hidden width"),
    "score_control.variance_hidden": ("int_list", (64, 64), "variance predictor hidden widths"),
    "score_control.sigma_min": ("float", 0.10, "lower noise bound"),
    "score_control.sigma_max": ("float", 0.24, "upper noise bound"),
    "score_control.lambda_max": ("float", 0.1, "peak coupling weight for score_sde_coupled"),
    "schedule.hold_ratio": ("float", 0.35, "fraction of iterations at full sigma_max"),
    "schedule.decay_mix": ("float", 0.3, "decay target weight on sigma_min"),
    "ppo.clip_eps": ("float", 0.2, "surrogate clip ratio"),
    "ppo.gamma": ("float", 0.99, "discount"),
    "ppo.gae_lambda": ("float", 0.95, "GAE lambda"),
    "ppo.update_epochs": ("int", 5, "passes over each rollout batch"),
    "ppo.minibatch_size": ("int", 160, "PPO minibatch"),
    "ppo.entropy_coef": ("float", 0.0, "entropy bonus weight"),
    "ppo.bc_coef": ("float", 0.01, "behavior-cloning loss weight"),
    "ppo.critic_coef": ("float", 0.5, "critic loss weight"),
    "ppo.target_kl": ("float", 1.0, "approximate-KL early-stop threshold"),
    "ppo.max_grad_norm": ("float", 25.0, "global gradient-norm clip"),
    "ppo.reward_norm": ("bool", True, "scale rewards by running return std"),
    "ppo.adv_norm": ("bool", True, "normalize advantages per minibatch"),
    "ppo.critic_hidden": ("int_list", (256, 256, 256), "critic MLP hidden widths"),
    "finetune.n_iters": ("int", 100, "fine-tuning iterations"),
    "finetune.actor_lr": ("float", 3e-4, "actor peak learning rate"),
    "finetune.actor_min_lr": ("float", 1e-4, "actor cosine floor"),
    "finetune.critic_lr": ("float", 1e-3, "critic peak learning rate"),
    "finetune.critic_min_lr": ("float", 3e-4, "critic cosine floor"),
    "finetune.lr_cycle": ("int", 100, "cosine restart period in iterations"),
    "finetune.critic_lr_warmup": ("int", 10, "critic learning-rate warmup iterations"),
    "finetune.critic_warmup_iters": ("int", 0, "critic-only iterations before actor updates"),
    "eval.episodes": ("int", 64, "evaluation episodes per policy"),
}


def _parse_value(key, kind, text):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if kind == "int_list":
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if not parts:
                raise ValueError(text)
            return tuple(int(p) for p in parts)
        return text
    except ValueError:
        raise ConfigurationError(f"{key}: expected {kind.replace('_', ' ')}, got {text!r}") from None


def _format_value(kind, value):
    if kind == "bool":
        return "true" if value else "false"
    if kind == "int_list":
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Validated values plus provenance (``default``, ``explicit`` or ``env``)."""

    values: dict
    provenance: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def variant(self) -> str:
        return self.values["sampler.variant"]

    def explicit_keys(self) -> list:
        return [k for k in SCHEMA if self.provenance[k] != "default"]

    def replace(self, **updates) -> "RunConfig":
        """Override keys (dots written as ``__``) and revalidate."""
        values, prov = dict(self.values), dict(self.provenance)
        for name, val in updates.items():
            key = name.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigurationError(f"unknown config key {key!r}")
            values[key] = val
            prov[key] = "explicit"
        _validate(values)
        return RunConfig(values, prov)

    def dumps(self) -> str:
        """Canonical text form: every key, schema order."""
        return "".join(f"{k} = {_format_value(SCHEMA[k][0], self.values[k])}\n" for k in SCHEMA)

    def to_toy(self) -> ToyConfig:
        v = self.values
        return ToyConfig(
            env=EnvConfig(v["env.horizon"], v["env.action_scale"], v["env.arena"], v["env.n_envs"]),
            ppo=PPOConfig(**{k[4:]: v[k] for k in SCHEMA if k.startswith("ppo.") and k != "ppo.critic_hidden"}),
            finetune=FinetuneConfig(**{k[9:]: v[k] for k in SCHEMA if k.startswith("finetune.")}),
            pretrain=PretrainConfig(v["flow.pretrain_steps"], v["flow.batch_size"], v["flow.lr"], v["flow.min_lr"],
                                    v["flow.warmup_steps"], v["flow.hidden"], v["seed"]),
            K=v["sampler.K"],
            sigma_min=v["score_control.sigma_min"],
            sigma_max=v["score_control.sigma_max"],
            hold_ratio=v["schedule.hold_ratio"],
            decay_mix=v["schedule.decay_mix"],
            score_hidden_dim=v["score_control.scheduler_hidden"],
            variance_hidden=v["score_control.variance_hidden"],
            critic_hidden=v["ppo.critic_hidden"],
            lambda_max=v["score_control.lambda_max"],
            clip=ClipPolicy(v["sampler.clip_intermediate"], v["sampler.clip_final"], v["sampler.clip"]),
            demo_episodes=v["demo.episodes"],
            demo_gain=v["demo.gain"],
            demo_noise=v["demo.noise"],
            eval_episodes=v["eval.episodes"],
        )


def _require(cond, keys, message):
    if not cond:
        raise ConfigurationError(f"{' / '.join(keys)}: {message}")


def _validate(v):
    for key, (kind, _, _) in SCHEMA.items():
        val = v[key]
        ok = {
            "int": lambda x: isinstance(x, int) and not isinstance(x, bool),
            "float": lambda x: isinstance(x, (int, float)) and not isinstance(x, bool),
            "bool": lambda x: isinstance(x, bool),
            "int_list": lambda x: isinstance(x, tuple) and all(isinstance(i, int) for i in x),
            "str": lambda x: isinstance(x, str),
        }[kind](val)
        _require(ok, [key], f"expected {kind.replace('_', ' ')}, got {val!r}")
        if kind == "float":
            v[key] = float(val)

    positive_ints = ["env.horizon", "env.n_envs", "demo.episodes", "flow.pretrain_steps", "flow.batch_size",
                     "sampler.K", "score_control.scheduler_hidden", "ppo.update_epochs", "ppo.minibatch_size",
                     "finetune.n_iters", "finetune.lr_cycle", "eval.episodes"]
    for key in positive_ints:
        _require(v[key] >= 1, [key], "must be at least 1")
    for key in ["finetune.critic_lr_warmup", "finetune.critic_warmup_iters", "flow.warmup_steps"]:
        _require(v[key] >= 0, [key], "must be non-negative")
    for key in ["flow.hidden", "score_control.variance_hidden", "ppo.critic_hidden"]:
        _require(len(v[key]) >= 1 and min(v[key]) >= 1, [key], "needs at least one positive width")
    _require(len(v["seeds"]) >= 1, ["seeds"], "needs at least one seed")
    for key in ["env.action_scale", "env.arena", "flow.lr", "flow.min_lr", "ppo.clip_eps", "ppo.max_grad_norm",
                "ppo.target_kl", "finetune.actor_lr", "finetune.actor_min_lr", "finetune.critic_lr",
                "finetune.critic_min_lr", "sampler.clip_intermediate", "sampler.clip_final"]:
        _require(v[key] > 0, [key], "must be positive")
    for key in ["demo.noise", "ppo.entropy_coef", "ppo.bc_coef", "ppo.critic_coef", "score_control.lambda_max"]:
        _require(v[key] >= 0, [key], "must be non-negative")
    _require(0 < v["score_control.sigma_min"] < v["score_control.sigma_max"],
             ["score_control.sigma_min", "score_control.sigma_max"], "need 0 < sigma_min < sigma_max")
    _require(0 <= v["ppo.gamma"] < 1, ["ppo.gamma"], "must lie in [0, 1)")
    _require(0 <= v["ppo.gae_lambda"] <= 1, ["ppo.gae_lambda"], "must lie in [0, 1]")
    _require(0 <= v["schedule.hold_ratio"] <= 1, ["schedule.hold_ratio"], "must lie in [0, 1]")
    _require(0 <= v["schedule.decay_mix"] <= 1, ["schedule.decay_mix"], "must lie in [0, 1]")
    _require(v["flow.min_lr"] <= v["flow.lr"], ["flow.min_lr", "flow.lr"], "floor exceeds peak")
    _require(v["finetune.actor_min_lr"] <= v["finetune.actor_lr"],
             ["finetune.actor_min_lr", "finetune.actor_lr"], "floor exceeds peak")
    _require(v["finetune.critic_min_lr"] <= v["finetune.critic_lr"],
             ["finetune.critic_min_lr", "finetune.critic_lr"], "floor exceeds peak")
    _require(v["sampler.variant"] in VARIANTS, ["sampler.variant"], f"must be one of {', '.join(VARIANTS)}")
    _require(v["sampler.clip_final"] <= v["sampler.clip_intermediate"],
             ["sampler.clip_final", "sampler.clip_intermediate"], "final clip exceeds intermediate clip")


def defaults() -> RunConfig:
    values = {k: spec[1] for k, spec in SCHEMA.items()}
    _validate(values)
    return RunConfig(values, {k: "default" for k in SCHEMA})


def parse_config(text: str, environ=None) -> RunConfig:
    """Parse config text; ``environ`` defaults to ``os.environ``."""
    environ = os.environ if environ is None else environ
    values = {k: spec[1] for k, spec in SCHEMA.items()}
    prov = {k: "default" for k in SCHEMA}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown config key {key!r} (line {lineno})")
        if key in seen:
            raise ConfigurationError(f"{key}: set twice (lines {seen[key]} and {lineno})")
        seen[key] = lineno
        values[key] = _parse_value(key, SCHEMA[key][0], val)
        prov[key] = "explicit"
    if environ.get(SEED_ENV_VAR, "").strip():
        values["seed"] = _parse_value(SEED_ENV_VAR, "int", environ[SEED_ENV_VAR])
        prov["seed"] = "env"
    _validate(values)
    return RunConfig(values, prov)


def load_config(path, environ=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, environ)


def preset_path(name: str) -> str:
    path = resources.files("scoreflow") / "presets" / f"{name}.cfg"
    if not path.is_file():
        raise ConfigurationError(f"no preset named {name!r}")
    return str(path)
