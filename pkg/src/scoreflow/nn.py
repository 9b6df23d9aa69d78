"""
Minimal reverse-mode machinery for fixed-topology MLPs.

Every learnable piece of the package (velocity field, score scheduler,
variance predictor, critic) is a stack of affine maps followed by
element-wise activations. Forward passes cache the per-layer inputs and
pre-activations; the backward pass walks the stack in reverse:

    z_l = h_{l-1} @ W_l^T + b_l,     h_l = f_l(z_l)
    dL/dz_l = dL/dh_l * f_l'(z_l)
    dL/dW_l = dz_l^T @ h_{l-1},      dL/db_l = sum(dz_l),   dL/dh_{l-1} = dz_l @ W_l

All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, NonFiniteError, ShapeError
from .rng import INIT, make_rng

ACTIVATIONS = ("silu", "tanh", "softplus", "identity")


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(z):
    return np.logaddexp(0.0, z)


def _activate(name, z):
    if name == "silu":
        return z * sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return softplus(z)
    return z


def _activation_grad(name, z):
    if name == "silu":
        s = sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if name == "softplus":
        return sigmoid(z)
    return np.ones_like(z)


@dataclass
class ParamBundle:
    """Weights ``(out, in)`` and biases ``(out,)`` per layer plus activation tags.

    The same class doubles as the gradient container: a gradient is a bundle
    whose arrays hold partial derivatives.
    """

    weights: list
    biases: list
    activations: tuple

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r} in layer {i}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ParamBundle":
        arrays = list(arrays)
        return ParamBundle(arrays[0::2], arrays[1::2], self.activations)

    def copy(self) -> "ParamBundle":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "ParamBundle":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec: np.ndarray) -> "ParamBundle":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i:i + a.size], dtype=np.float64).reshape(a.shape).copy())
            i += a.size
        if i != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, bundle needs {i}")
        return self.with_arrays(out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def check_congruent(self, other: "ParamBundle", what="gradient"):
        mine, theirs = self.arrays(), other.arrays()
        if len(mine) != len(theirs) or any(a.shape != b.shape for a, b in zip(mine, theirs)):
            raise ShapeError(f"{what} is not shape-congruent with its parameter bundle")

    def __add__(self, other):
        self.check_congruent(other)
        return self.with_arrays([a + b for a, b in zip(self.arrays(), other.arrays())])

    def scale(self, c: float) -> "ParamBundle":
        return self.with_arrays([c * a for a in self.arrays()])

    def equals(self, other: "ParamBundle") -> bool:
        """Bit-exact comparison of values and activation tags."""
        if self.activations != other.activations:
            return False
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(mine, theirs)
        )


Gradient = ParamBundle


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths ``[in, h1, ..., out]`` with hidden and output activations.

    ``zero_final_bias`` switches on the special final-layer init: zero weights
    and the given constant bias.
    """

    sizes: tuple
    hidden_activation: str = "silu"
    output_activation: str = "identity"
    zero_final_bias: float | None = None

    def activations(self) -> tuple:
        n = len(self.sizes) - 1
        return (self.hidden_activation,) * (n - 1) + (self.output_activation,)


def mlp_init(spec: MLPSpec, seed: int, stream: int = 0) -> ParamBundle:
    """Seeded init: N(0, 1/fan_in) weights and zero biases.

    With ``spec.zero_final_bias`` set, the last layer gets exactly zero
    weights and that constant as bias.
    """
    sizes = tuple(int(s) for s in spec.sizes)
    if len(sizes) < 2:
        raise ConfigurationError("an MLP needs at least one layer")
    if any(s <= 0 for s in sizes):
        raise ConfigurationError(f"zero-width layer in {sizes}")
    rng = make_rng(seed, INIT, stream)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    if spec.zero_final_bias is not None:
        weights[-1] = np.zeros_like(weights[-1])
        biases[-1] = np.full_like(biases[-1], float(spec.zero_final_bias))
    return ParamBundle(weights, biases, spec.activations())


def _as_batch(params: ParamBundle, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.in_dim:
        raise ShapeError(f"input of shape {x.shape} does not match first layer width {params.in_dim}")
    return xb, single


def mlp_forward_cached(params: ParamBundle, x):
    """Forward pass on a batch ``(n, in)``; returns output and the backward cache."""
    h, _ = _as_batch(params, x)
    cache = []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = h @ w.T + b
        cache.append((h, z))
        h = _activate(act, z)
    return h, cache


def mlp_forward(params: ParamBundle, x) -> np.ndarray:
    """Evaluate the MLP on one input ``(in,)`` or a batch ``(n, in)``."""
    xb, single = _as_batch(params, x)
    out, _ = mlp_forward_cached(params, xb)
    return out[0] if single else out


def mlp_backward(params: ParamBundle, cache, upstream):
    """Backward pass from a cache; ``upstream`` is dL/d(output) with batch shape."""
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache[-1][1].shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match output {cache[-1][1].shape}")
    gw, gb = [None] * len(cache), [None] * len(cache)
    for i in range(len(cache) - 1, -1, -1):
        h, z = cache[i]
        dz = g * _activation_grad(params.activations[i], z)
        gw[i] = dz.T @ h
        gb[i] = dz.sum(axis=0)
        g = dz @ params.weights[i]
    return ParamBundle(gw, gb, params.activations), g


def backprop(params: ParamBundle, x, upstream):
    """Exact gradient of ``<upstream, mlp_forward(params, x)>``.

    Returns ``(Gradient, input_grad)``; shapes follow ``x``.
    """
    xb, single = _as_batch(params, x)
    up = np.asarray(upstream, dtype=np.float64)
    up = up[None, :] if single else up
    out, cache = mlp_forward_cached(params, xb)
    if up.shape != out.shape:
        raise ShapeError(f"upstream gradient {np.shape(upstream)} does not match output width {params.out_dim}")
    grad, gx = mlp_backward(params, cache, up)
    return grad, (gx[0] if single else gx)


@dataclass
class OptimizerState:
    m: ParamBundle
    v: ParamBundle
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamBundle, **kw) -> "OptimizerState":
        return cls(params.zeros_like(), params.zeros_like(), **kw)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.m.copy(), self.v.copy(), self.step, self.beta1, self.beta2, self.eps)


def adam_step(params: ParamBundle, grad: ParamBundle, state: OptimizerState, lr: float):
    """Bias-corrected Adam update; returns ``(new_params, new_state)``."""
    params.check_congruent(grad)
    params.check_congruent(state.m, "first moment")
    params.check_congruent(state.v, "second moment")
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if not grad.is_finite():
        raise NonFiniteError("non-finite gradient entries; Adam update rejected")
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grad.arrays(), state.m.arrays(), state.v.arrays()):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(
        state.m.with_arrays(new_m), state.v.with_arrays(new_v), step, b1, b2, state.eps
    )
    return params.with_arrays(new_p), new_state


def global_norm(grads: Sequence[ParamBundle]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for g in grads for a in g.arrays())))


def clip_by_global_norm(grads: Sequence[ParamBundle], max_norm: float):
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return list(grads), norm
    return [g.scale(max_norm / norm) for g in grads], norm


def cosine_warm_restart_lr(base_lr, min_lr, cycle_steps, warmup_steps, step) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr``, restarting every cycle."""
    if not 0 <= warmup_steps < cycle_steps:
        raise ConfigurationError("need 0 <= warmup_steps < cycle_steps")
    if step < 0:
        raise ConfigurationError("step must be non-negative")
    pos = step % cycle_steps
    if pos < warmup_steps:
        return min_lr + (base_lr - min_lr) * pos / warmup_steps
    progress = (pos - warmup_steps) / (cycle_steps - warmup_steps)
    return min_lr + (base_lr - min_lr) * (1.0 + np.cos(np.pi * progress)) / 2.0


def _flatten(params):
    if isinstance(params, ParamBundle):
        return params.flat()
    return np.concatenate([params[k].flat() for k in params])


def _unflatten(template, vec):
    if isinstance(template, ParamBundle):
        return template.from_flat(vec)
    out, i = {}, 0
    for k in template:
        n = template[k].n_params
        out[k] = template[k].from_flat(vec[i:i + n])
        i += n
    return out


def finite_diff_check(
    loss_fn: Callable,
    params,
    h: float = 1e-5,
) -> float:
    """Max relative error between central differences and the analytic gradient.

    ``loss_fn(params) -> (loss, grad)`` where ``params``/``grad`` are either a
    ParamBundle or a dict of them. The relative error per entry is
    ``|fd - g| / max(|g|, 1e-8)``.
    """
    if not h > 0:
        raise ConfigurationError(f"finite-difference step must be positive, got {h}")
    loss0, grad = loss_fn(params)
    loss0_again, _ = loss_fn(params)
    if float(loss0) != float(loss0_again):
        raise ConfigurationError("loss_fn is not deterministic: repeated evaluation differs")
    g = _flatten(grad)
    x = _flatten(params)
    fd = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        fd[i] = (float(loss_fn(_unflatten(params, xp))[0]) - float(loss_fn(_unflatten(params, xm))[0])) / (2 * h)
    return float(np.max(np.abs(fd - g) / np.maximum(np.abs(g), 1e-8)))
