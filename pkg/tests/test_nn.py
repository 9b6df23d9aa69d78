import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoreflow.errors import ConfigurationError, NonFiniteError, ShapeError
from scoreflow.nn import (
    MLPSpec,
    OptimizerState,
    ParamBundle,
    adam_step,
    backprop,
    clip_by_global_norm,
    cosine_warm_restart_lr,
    finite_diff_check,
    global_norm,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    mlp_init,
    sigmoid,
    softplus,
)
from scoreflow.score import init_scheduler, scheduler_spec


def test_scheduler_head_preactivation_is_minus_two_for_any_input():
    for seed in range(5):
        p = init_scheduler(16, seed=seed)
        x = np.random.default_rng(seed).uniform(-5, 5, (50, 1))
        _, cache = mlp_forward_cached(p, x)
        assert np.all(cache[-1][1] == -2.0)


def test_init_is_deterministic():
    spec = MLPSpec((3, 8, 8, 2))
    assert mlp_init(spec, 7).equals(mlp_init(spec, 7))
    assert not mlp_init(spec, 7).equals(mlp_init(spec, 8))
    assert not mlp_init(spec, 7, stream=1).equals(mlp_init(spec, 7, stream=2))


def test_single_identity_layer_matches_matrix_product():
    p = mlp_init(MLPSpec((4, 3), output_activation="identity"), seed=3)
    x = np.array([0.5, -1.0, 2.0, 0.25])
    want = [sum(p.weights[0][i, j] * x[j] for j in range(4)) + p.biases[0][i] for i in range(3)]
    np.testing.assert_allclose(mlp_forward(p, x), want, rtol=0, atol=1e-15)


def test_zero_network_outputs_zero():
    p = ParamBundle([np.zeros((2, 3))], [np.zeros(2)], ("identity",))
    np.testing.assert_array_equal(mlp_forward(p, np.ones(3)), np.zeros(2))


def test_single_softplus_unit_at_minus_two():
    p = ParamBundle([np.zeros((1, 1))], [np.array([-2.0])], ("softplus",))
    out = mlp_forward(p, np.array([0.3]))[0]
    assert out == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-15)
    assert out == pytest.approx(0.1269, abs=1e-4)


def test_two_layer_silu_matches_step_by_step_evaluation():
    p = mlp_init(MLPSpec((2, 3, 1), "silu", "identity"), seed=11)
    x = [0.7, -0.4]
    hidden = []
    for i in range(3):
        z = p.weights[0][i, 0] * x[0] + p.weights[0][i, 1] * x[1] + p.biases[0][i]
        hidden.append(z / (1.0 + math.exp(-z)))
    want = sum(p.weights[1][0, i] * hidden[i] for i in range(3)) + p.biases[1][0]
    assert mlp_forward(p, np.array(x))[0] == pytest.approx(want, abs=1e-14)


def test_activation_values():
    z = np.array([-30.0, -1.0, 0.0, 2.0, 40.0])
    np.testing.assert_allclose(sigmoid(z), 1.0 / (1.0 + np.exp(-z)), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(softplus(z), np.log1p(np.exp(z)), rtol=1e-13)


def test_identity_layer_gradient_is_outer_product():
    p = mlp_init(MLPSpec((3, 2), output_activation="identity"), seed=0)
    x = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -0.7])
    grad, gx = backprop(p, x, g)
    np.testing.assert_allclose(grad.weights[0], np.outer(g, x))
    np.testing.assert_allclose(grad.biases[0], g)
    np.testing.assert_allclose(gx, g @ p.weights[0])


def test_zero_upstream_gives_zero_gradient():
    p = mlp_init(MLPSpec((3, 5, 2)), seed=0)
    grad, _ = backprop(p, np.ones((4, 3)), np.zeros((4, 2)))
    assert all(np.all(a == 0) for a in grad.arrays())


def test_quadratic_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 3))
    y = rng.standard_normal((6, 2))

    def loss(p):
        out, cache = mlp_forward_cached(p, x)
        r = out - y
        return float(np.sum(r * r)), mlp_backward(p, cache, 2 * r)[0]

    for acts in (("silu", "identity"), ("tanh", "softplus")):
        p = mlp_init(MLPSpec((3, 8, 2), *acts), seed=1)
        assert finite_diff_check(loss, p, h=1e-5) < 1e-4


def test_finite_diff_exact_for_linear_loss():
    p = mlp_init(MLPSpec((3, 2), output_activation="identity"), seed=2)
    x = np.array([[0.1, 0.2, 0.3]])
    c = np.array([[1.5, -0.5]])

    def loss(q):
        out = mlp_forward(q, x)
        return float(np.sum(c * out)), backprop(q, x, c)[0]

    assert finite_diff_check(loss, p) < 1e-10


def test_finite_diff_rejects_bad_step_and_nondeterminism():
    p = mlp_init(MLPSpec((1, 1)), seed=0)
    with pytest.raises(ConfigurationError):
        finite_diff_check(lambda q: (0.0, q.zeros_like()), p, h=0.0)
    state = {"n": 0}

    def flaky(q):
        state["n"] += 1
        return float(state["n"]), q.zeros_like()

    with pytest.raises(ConfigurationError):
        finite_diff_check(flaky, p)


def test_adam_first_step_magnitude_is_lr():
    p = mlp_init(MLPSpec((3, 4)), seed=0)
    g = p.with_arrays([np.full_like(a, 0.37) for a in p.arrays()])
    new, st = adam_step(p, g, OptimizerState.for_params(p), 1e-3)
    for a, b in zip(p.arrays(), new.arrays()):
        np.testing.assert_allclose(a - b, 1e-3 * 0.37 / (0.37 + 1e-8), rtol=1e-12)
    assert st.step == 1


def test_adam_zero_gradient_is_fixed_point():
    p = mlp_init(MLPSpec((3, 4, 2)), seed=0)
    new, st = adam_step(p, p.zeros_like(), OptimizerState.for_params(p), 0.1)
    assert new.equals(p)
    assert st.step == 1


def test_adam_two_steps_match_scalar_recursion():
    p = ParamBundle([np.array([[1.0]])], [np.array([0.0])], ("identity",))
    g = ParamBundle([np.array([[0.5]])], [np.array([-2.0])], ("identity",))
    st = OptimizerState.for_params(p)
    lr = 0.01
    for _ in range(2):
        p, st = adam_step(p, g, st, lr)

    def scalar(x, grad):
        m = v = 0.0
        for t in (1, 2):
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            x -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        return x

    assert p.weights[0][0, 0] == pytest.approx(scalar(1.0, 0.5), abs=1e-15)
    assert p.biases[0][0] == pytest.approx(scalar(0.0, -2.0), abs=1e-15)


def test_adam_rejects_mismatch_and_nonfinite():
    p = mlp_init(MLPSpec((3, 4)), seed=0)
    other = mlp_init(MLPSpec((3, 5)), seed=0)
    with pytest.raises(ShapeError):
        adam_step(p, other, OptimizerState.for_params(p), 1e-3)
    bad = p.with_arrays([np.full_like(a, np.nan) for a in p.arrays()])
    with pytest.raises(NonFiniteError):
        adam_step(p, bad, OptimizerState.for_params(p), 1e-3)


def test_cosine_schedule_endpoints():
    assert cosine_warm_restart_lr(1e-3, 1e-4, 100, 10, 10) == 1e-3
    assert cosine_warm_restart_lr(1e-3, 1e-4, 100, 0, 100) == 1e-3
    want = 1e-4 + (1e-3 - 1e-4) * (1 + math.cos(math.pi * 99 / 100)) / 2
    assert cosine_warm_restart_lr(1e-3, 1e-4, 100, 0, 99) == pytest.approx(want, rel=1e-15)
    assert cosine_warm_restart_lr(1e-3, 1e-4, 100, 10, 0) == 1e-4


def test_global_norm_clip():
    p = ParamBundle([np.array([[3.0]])], [np.array([4.0])], ("identity",))
    assert global_norm([p]) == 5.0
    (c,), norm = clip_by_global_norm([p], 1.0)
    assert norm == 5.0
    assert global_norm([c]) == pytest.approx(1.0)


def test_flat_roundtrip_and_spec_param_count():
    p = init_scheduler(16)
    assert p.n_params == 321
    assert p.from_flat(p.flat()).equals(p)
    assert scheduler_spec(16).activations() == ("silu", "silu", "softplus")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2 ** 31 - 1),
       st.sampled_from(["silu", "tanh", "softplus", "identity"]))
def test_backprop_matches_directional_derivative(sizes, seed, act):
    p = mlp_init(MLPSpec(tuple(sizes), act, act), seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, sizes[0]))
    up = rng.standard_normal((3, sizes[-1]))
    grad, gx = backprop(p, x, up)
    direction = p.with_arrays([rng.standard_normal(a.shape) for a in p.arrays()])
    h = 1e-6
    plus = np.sum(up * mlp_forward(p + direction.scale(h), x))
    minus = np.sum(up * mlp_forward(p + direction.scale(-h), x))
    fd = (plus - minus) / (2 * h)
    analytic = float(grad.flat() @ direction.flat())
    assert fd == pytest.approx(analytic, rel=1e-5, abs=1e-7)
    dx = rng.standard_normal(x.shape)
    fdx = (np.sum(up * mlp_forward(p, x + h * dx)) - np.sum(up * mlp_forward(p, x - h * dx))) / (2 * h)
    assert fdx == pytest.approx(float(np.sum(gx * dx)), rel=1e-5, abs=1e-7)
