import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hflsim.datagen import LabeledBatch
from hflsim.errors import ConfigurationError
from hflsim.numkit import (
    ClipMode,
    Model,
    ParamVector,
    backward,
    clip,
    forward_loss,
    init_params,
    sgd_epochs,
)


def hand_forward(W, b, x, y):
    """Independent scalar-loop forward pass used as an oracle."""
    total, correct = 0.0, 0
    for xi, yi in zip(x, y):
        z = [sum(W[c][j] * xi[j] for j in range(len(xi))) + b[c] for c in range(len(b))]
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        total += lse - z[yi]
        correct += int(max(range(len(z)), key=lambda c: z[c]) == yi)
    return total / len(y), correct / len(y)


def finite_diff(model, params, batch, h=1e-5):
    out = np.zeros(params.size)
    for i in range(params.size):
        e = np.zeros(params.size)
        e[i] = h
        up = forward_loss(model, params.like(params.values + e), batch)[0]
        dn = forward_loss(model, params.like(params.values - e), batch)[0]
        out[i] = (up - dn) / (2 * h)
    return out


def test_uniform_logits_loss_is_log_classes():
    model = Model("linear", 3, 4)
    params = init_params(model, np.random.default_rng(0), zero=True)
    batch = LabeledBatch(np.random.default_rng(1).normal(size=(7, 3)), [0, 1, 2, 3, 0, 1, 2])
    loss, _ = forward_loss(model, params, batch)
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_margin_sample_is_correct():
    model = Model("linear", 2, 2)
    params = ParamVector(np.array([5.0, 0.0, 0.0, 0.0, 0.0, 0.0]), model.layout)
    _, acc = forward_loss(model, params, LabeledBatch([[1.0, 0.0]], [0]))
    assert acc == 1.0


def test_forward_matches_hand_rolled_pass():
    rng = np.random.default_rng(0)
    model = Model("linear", 5, 3)
    params = init_params(model, rng)
    x = rng.normal(size=(32, 5))
    y = rng.integers(0, 3, size=32)
    W, b = params.layers()["W"], params.layers()["b"]
    loss, acc = forward_loss(model, params, LabeledBatch(x, y))
    ref_loss, ref_acc = hand_forward(W.tolist(), b.tolist(), x.tolist(), y.tolist())
    assert loss == pytest.approx(ref_loss, rel=1e-12)
    assert acc == ref_acc


def test_dimension_mismatch_raises():
    model = Model("linear", 4, 2)
    params = init_params(model, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        forward_loss(model, params, LabeledBatch(np.zeros((2, 3)), [0, 1]))


def test_zero_input_bias_gradient_closed_form():
    model = Model("linear", 3, 4)
    b = np.array([0.1, -0.2, 0.3, 0.0])
    params = ParamVector(np.concatenate([np.zeros(12), b]), model.layout)
    y = np.array([0, 2, 2])
    grad = backward(model, params, LabeledBatch(np.zeros((3, 3)), y))
    p = np.exp(b) / np.exp(b).sum()
    expected = np.mean([p - np.eye(4)[c] for c in y], axis=0)
    np.testing.assert_allclose(grad.layers()["b"], expected, atol=1e-15)
    np.testing.assert_array_equal(grad.layers()["W"], 0.0)


@pytest.mark.parametrize("model", [Model("linear", 3, 2), Model("mlp", 2, 2, 2)])
def test_gradient_matches_finite_differences(model):
    # 8 and 12 parameters respectively
    rng = np.random.default_rng(3)
    params = init_params(model, rng)
    params = params.like(params.values + 0.1 * rng.normal(size=params.size))
    batch = LabeledBatch(rng.normal(size=(6, model.input_dim)), rng.integers(0, 2, size=6))
    err = np.max(np.abs(backward(model, params, batch).values - finite_diff(model, params, batch)))
    assert err < 1e-6


def test_gradient_matches_finite_differences_larger_mlp():
    model = Model("mlp", 8, 4, 6)
    rng = np.random.default_rng(4)
    params = init_params(model, rng)
    batch = LabeledBatch(rng.normal(size=(10, 8)), rng.integers(0, 4, size=10))
    err = np.max(np.abs(backward(model, params, batch).values - finite_diff(model, params, batch)))
    assert err < 1e-6


def test_duplicated_sample_has_same_gradient():
    model = Model("mlp", 4, 3, 5)
    rng = np.random.default_rng(5)
    params = init_params(model, rng)
    x = rng.normal(size=(1, 4))
    g1 = backward(model, params, LabeledBatch(x, [2]))
    g2 = backward(model, params, LabeledBatch(np.vstack([x, x]), [2, 2]))
    np.testing.assert_allclose(g1.values, g2.values, rtol=1e-14, atol=1e-16)


def test_sgd_zero_epochs_or_zero_lr_is_identity():
    model = Model("linear", 3, 2)
    rng = np.random.default_rng(0)
    params = init_params(model, rng)
    data = LabeledBatch(rng.normal(size=(5, 3)), [0, 1, 0, 1, 1])
    for lr, epochs in [(0.1, 0), (0.0, 3)]:
        out = sgd_epochs(model, params, data, lr, epochs, 2, np.random.default_rng(1))
        np.testing.assert_array_equal(out.values, params.values)


def test_sgd_single_step_is_gradient_step():
    model = Model("linear", 3, 2)
    rng = np.random.default_rng(0)
    params = init_params(model, rng)
    data = LabeledBatch([[0.5, -1.0, 2.0]], [1])
    out = sgd_epochs(model, params, data, 0.3, 1, 1, np.random.default_rng(0))
    expected = params.values - 0.3 * backward(model, params, data).values
    np.testing.assert_allclose(out.values, expected, rtol=0, atol=1e-15)


def test_sgd_is_deterministic_per_seed():
    model = Model("mlp", 4, 3, 4)
    rng = np.random.default_rng(0)
    params = init_params(model, rng)
    data = LabeledBatch(rng.normal(size=(20, 4)), rng.integers(0, 3, size=20))
    a = sgd_epochs(model, params, data, 0.1, 2, 3, np.random.default_rng(9))
    b = sgd_epochs(model, params, data, 0.1, 2, 3, np.random.default_rng(9))
    assert a.values.tobytes() == b.values.tobytes()


def test_sgd_rejects_empty_dataset():
    model = Model("linear", 3, 2)
    params = init_params(model, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        sgd_epochs(model, params, LabeledBatch(np.zeros((0, 3)), []), 0.1, 1, 1, np.random.default_rng(0))


def test_clip_examples():
    u = ParamVector.flat(np.array([3.0, 4.0]))
    np.testing.assert_allclose(clip(u, ClipMode("flat", 2.5)).values, [1.5, 2.0], rtol=1e-15)
    small = ParamVector.flat(np.array([0.3, 0.4]))
    np.testing.assert_array_equal(clip(small, ClipMode("flat", 2.5)).values, [0.3, 0.4])
    layered = ParamVector(np.array([3.0, 4.0, 0.0, 1.0]), (("a", (2,)), ("b", (2,))))
    out = clip(layered, ClipMode("per-layer", (2.5, 5.0)))
    np.testing.assert_allclose(out.values, [1.5, 2.0, 0.0, 1.0], rtol=1e-15)


def test_param_vector_rejects_non_finite_and_bad_layout():
    with pytest.raises(FloatingPointError):
        ParamVector.flat(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        ParamVector(np.zeros(3), (("a", (2,)),))


def test_clip_mode_rejects_nonpositive_bound():
    with pytest.raises(ConfigurationError):
        ClipMode("flat", 0.0)
    with pytest.raises(ConfigurationError):
        ClipMode("per-layer", (1.0, -1.0))


def test_parameter_count_is_function_of_dims():
    assert Model("linear", 32, 10).num_params == 330
    assert Model("mlp", 32, 10, 16).num_params == 32 * 16 + 16 + 16 * 10 + 10


vectors = arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6, allow_nan=False))


@given(vectors, st.floats(1e-3, 1e3))
def test_flat_clip_bounds_norm_and_is_idempotent(v, bound):
    mode = ClipMode("flat", bound)
    once = clip(ParamVector.flat(v), mode)
    assert once.norm() <= bound
    twice = clip(once, mode)
    assert twice.values.tobytes() == once.values.tobytes()


@given(vectors, vectors, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
@settings(max_examples=50)
def test_per_layer_clip_bounds_each_layer(a, b, ba, bb):
    pv = ParamVector(np.concatenate([a, b]), (("a", (a.size,)), ("b", (b.size,))))
    mode = ClipMode("per-layer", (ba, bb))
    once = clip(pv, mode)
    layers = once.layers()
    assert np.linalg.norm(layers["a"]) <= ba
    assert np.linalg.norm(layers["b"]) <= bb
    assert clip(once, mode).values.tobytes() == once.values.tobytes()
