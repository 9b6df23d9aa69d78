"""
Binary checkpoints.

Layout::

    magic   8 bytes   b"SCRFLOW\\0"
    version uint32 LE
    records, each:  uint64 LE count n, then n little-endian float64 values

Records appear in this fixed order (``*`` marks a pair of records, a layout
descriptor and the flat parameter values; absent bundles have two empty
records):

     0  config snapshot, UTF-8 bytes of ``RunConfig.dumps()`` one per value
     1  meta: iteration, total_iters, K, variant index, clip_intermediate,
        clip_final, clip_enabled, sigma_min, sigma_max (current), lambda_max
     2  action offset
     3  action scale
     *  velocity, scheduler, variance, coupling, critic bundles
     -  per bundle in the same order: optimizer header (step, beta1, beta2,
        eps) then first and second moments (three empty records if absent)
     -  reward normalizer: (mean, var, count, gamma, eps) then the running
        per-env return (two empty records if absent)

A layout descriptor is ``[n_layers, out_1, in_1, act_1, ...]`` with
activation codes indexing ``nn.ACTIVATIONS``. Integers are stored as exact
float64 values. Trailing bytes after the last record are an error.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, parse_config
from .errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError
from .nn import ACTIVATIONS, OptimizerState, ParamBundle
from .ppo import FlowPolicy, RewardNormalizer
from .sampler import VARIANTS, ClipPolicy, ControlHeads
from .score import VariancePredictor

MAGIC = b"SCRFLOW\0"
VERSION = 1
BUNDLE_ORDER = ("velocity", "scheduler", "variance", "coupling", "critic")
_F64 = np.dtype("<f8")


@dataclass
class Checkpoint:
    config: RunConfig
    policy: FlowPolicy
    critic: ParamBundle | None
    optimizers: dict = field(default_factory=dict)
    iteration: int = 0
    total_iters: int = 0
    action_offset: np.ndarray = None
    action_scale: np.ndarray = None
    reward_normalizer: RewardNormalizer | None = None

    def bundles(self) -> dict:
        heads = self.policy.heads
        return {
            "velocity": self.policy.velocity,
            "scheduler": heads.scheduler,
            "variance": None if heads.variance is None else heads.variance.params,
            "coupling": heads.coupling,
            "critic": self.critic,
        }


def _layout(bundle: ParamBundle | None):
    if bundle is None:
        return np.zeros(0)
    rows = [len(bundle.weights)]
    for w, act in zip(bundle.weights, bundle.activations):
        rows.extend((w.shape[0], w.shape[1], ACTIVATIONS.index(act)))
    return np.asarray(rows, dtype=np.float64)


def _records(ck: Checkpoint):
    pol = ck.policy
    var = pol.heads.variance
    clip = pol.clip
    meta = [
        ck.iteration, ck.total_iters, pol.K, VARIANTS.index(pol.variant),
        clip.intermediate_clip, clip.final_clip, float(clip.enabled),
        var.sigma_min if var is not None else np.nan, var.sigma_max if var is not None else np.nan,
        pol.heads.lambda_max,
    ]
    out = [
        np.frombuffer(ck.config.dumps().encode("utf-8"), dtype=np.uint8).astype(np.float64),
        np.asarray(meta, dtype=np.float64),
        np.atleast_1d(np.asarray(ck.action_offset, dtype=np.float64)),
        np.atleast_1d(np.asarray(ck.action_scale, dtype=np.float64)),
    ]
    bundles = ck.bundles()
    for name in BUNDLE_ORDER:
        b = bundles[name]
        out += [_layout(b), np.zeros(0) if b is None else b.flat()]
    for name in BUNDLE_ORDER:
        st = ck.optimizers.get(name)
        if st is None:
            out += [np.zeros(0)] * 3
        else:
            out += [np.asarray([st.step, st.beta1, st.beta2, st.eps], dtype=np.float64), st.m.flat(), st.v.flat()]
    rn = ck.reward_normalizer
    if rn is None:
        out += [np.zeros(0)] * 2
    else:
        out += [np.asarray([float(rn.rms.mean), float(rn.rms.var), rn.rms.count, rn.gamma, rn.eps]),
                np.asarray(rn.ret, dtype=np.float64)]
    return out


def dumps_checkpoint(ck: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for rec in _records(ck):
        rec = np.ascontiguousarray(rec, dtype=_F64)
        parts.append(struct.pack("<Q", rec.size))
        parts.append(rec.tobytes())
    return b"".join(parts)


def save_checkpoint(ck: Checkpoint, path):
    data = dumps_checkpoint(ck)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def record(self) -> np.ndarray:
        (n,) = struct.unpack("<Q", self.take(8))
        if n > (len(self.data) - self.pos) // 8:
            raise TruncatedCheckpointError(f"record of {n} values runs past end of file")
        return np.frombuffer(self.take(8 * n), dtype=_F64).astype(np.float64)


def _bundle(layout, flat):
    if layout.size == 0:
        if flat.size:
            raise CheckpointError("parameter values without a layout")
        return None
    n = int(layout[0])
    if layout.size != 1 + 3 * n:
        raise CheckpointError("malformed layout descriptor")
    weights, biases, acts = [], [], []
    i = 0
    for l in range(n):
        out_d, in_d, code = (int(x) for x in layout[1 + 3 * l:4 + 3 * l])
        if not 0 <= code < len(ACTIVATIONS):
            raise CheckpointError(f"unknown activation code {code}")
        w_size = out_d * in_d
        if i + w_size + out_d > flat.size:
            raise CheckpointError("parameter record shorter than its layout")
        weights.append(flat[i:i + w_size].reshape(out_d, in_d).copy())
        biases.append(flat[i + w_size:i + w_size + out_d].copy())
        acts.append(ACTIVATIONS[code])
        i += w_size + out_d
    if i != flat.size:
        raise CheckpointError("parameter record longer than its layout")
    return ParamBundle(weights, biases, tuple(acts))


def loads_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError("bad magic: not a scoreflow checkpoint")
    (version,) = struct.unpack("<I", r.take(4))
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads version {VERSION}")
    text = bytes(r.record().astype(np.uint8)).decode("utf-8")
    config = parse_config(text, environ={})
    meta = r.record()
    if meta.size != 10:
        raise CheckpointError("malformed meta record")
    offset, scale = r.record(), r.record()
    bundles = {}
    for name in BUNDLE_ORDER:
        bundles[name] = _bundle(r.record(), r.record())
    if bundles["velocity"] is None:
        raise CheckpointError("checkpoint has no velocity field")
    optimizers = {}
    for name in BUNDLE_ORDER:
        head, m, v = r.record(), r.record(), r.record()
        if head.size == 0:
            continue
        if bundles[name] is None:
            raise CheckpointError(f"optimizer state for missing bundle {name}")
        tmpl = bundles[name]
        optimizers[name] = OptimizerState(tmpl.from_flat(m), tmpl.from_flat(v), int(head[0]),
                                          float(head[1]), float(head[2]), float(head[3]))
    rn_stats, rn_ret = r.record(), r.record()
    normalizer = None
    if rn_stats.size:
        normalizer = RewardNormalizer(rn_ret.size, float(rn_stats[3]), float(rn_stats[4]))
        normalizer.rms.mean = np.float64(rn_stats[0])
        normalizer.rms.var = np.float64(rn_stats[1])
        normalizer.rms.count = float(rn_stats[2])
        normalizer.ret = rn_ret.copy()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last record")

    it, total, K, vidx, ci, cf, ce, smin, smax, lam = meta
    variance = None
    if bundles["variance"] is not None:
        variance = VariancePredictor(bundles["variance"], float(smin), float(smax))
    heads = ControlHeads(bundles["scheduler"], variance, bundles["coupling"], float(lam))
    clip = ClipPolicy(float(ci), float(cf), bool(ce))
    policy = FlowPolicy(bundles["velocity"], heads, VARIANTS[int(vidx)], int(K), clip)
    return Checkpoint(config, policy, bundles["critic"], optimizers, int(it), int(total), offset, scale, normalizer)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return loads_checkpoint(data)
