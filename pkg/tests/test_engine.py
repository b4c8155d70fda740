"""Engine and kernel correctness against independent references."""

import numpy as np
import pytest

from fedsimlab import layers as L
from fedsimlab.engine import (LayerSpec, ModelSpec, flatten_layer_params, init_params,
                              layer_output_shapes, loss_and_grad, named_layers,
                              param_shapes, forward, predict, sgd_step)
from fedsimlab.errors import ValidationError


def naive_conv2d(x, weight, bias, stride, padding):
    """Direct sliding-window convolution, nested loops, no tricks."""
    b, c, h, w = x.shape
    o, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for bi in range(b):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, oi, i, j] = np.sum(patch * weight[oi]) + bias[oi]
    return out


def naive_maxpool(x, kernel, stride):
    b, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    out = np.zeros((b, c, ho, wo))
    for bi in range(b):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[bi, ci, i, j] = x[bi, ci, i * stride:i * stride + kernel,
                                          j * stride:j * stride + kernel].max()
    return out


def test_conv2d_matches_naive_reference():
    rng = np.random.default_rng(0)
    for stride, padding, k in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 3, 7), (1, 0, 1)]:
        x = rng.normal(size=(2, 3, 9, 9))
        weight = rng.normal(size=(4, 3, k, k))
        bias = rng.normal(size=4)
        got = L.conv2d_forward(x, weight, bias, stride, padding)
        want = naive_conv2d(x, weight, bias, stride, padding)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_maxpool_matches_naive_reference():
    rng = np.random.default_rng(1)
    for kernel, stride in [(2, 2), (3, 2), (3, 3), (2, 1)]:
        x = rng.normal(size=(2, 3, 8, 8))
        got, _ = L.maxpool2d_forward(x, kernel, stride)
        np.testing.assert_array_equal(got, naive_maxpool(x, kernel, stride))


def test_maxpool_tie_takes_first_position():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0] = [[5.0, 5.0], [5.0, 5.0]]
    y, arg = L.maxpool2d_forward(x, 2, 2)
    assert y[0, 0, 0, 0] == 5.0
    assert arg[0, 0, 0, 0] == 0  # row-major first among equals
    dx = L.maxpool2d_backward(x.shape, 2, 2, arg, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(dx[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_relu_derivative_is_zero_at_zero():
    x = np.array([[-1.0, 0.0, 2.0]])
    dy = np.ones_like(x)
    np.testing.assert_array_equal(L.relu_backward(x, dy), [[0.0, 0.0, 1.0]])


def test_cross_entropy_matches_log_softmax():
    from scipy.special import log_softmax
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(5, 7)) * 3
    labels = rng.integers(0, 7, size=5)
    loss, _ = L.cross_entropy(logits, labels)
    want = -np.mean(log_softmax(logits, axis=1)[np.arange(5), labels])
    assert abs(loss - want) < 1e-12


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(3)
    for _ in range(5):
        z = rng.normal(size=(4, 6)) * rng.uniform(0.1, 50)
        p = L.softmax(z)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
        np.testing.assert_allclose(L.softmax(z + 123.0), p, rtol=1e-9)
        assert (p >= 0).all()


def small_model():
    return ModelSpec((1, 10, 10), 5, (
        LayerSpec("conv", out_channels=4, kernel=3, stride=1, padding=1),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=2, stride=2),
        LayerSpec("residual", out_channels=8, stride=2),
        LayerSpec("gap"),
        LayerSpec("dense", units=5),
    ))


def test_layer_output_shapes():
    shapes = layer_output_shapes(small_model())
    assert shapes == [(4, 10, 10), (4, 10, 10), (4, 5, 5), (8, 3, 3), (8,), (5,)]


def test_stable_layer_names():
    names = [n for n, _ in named_layers(small_model())]
    assert names == ["conv1", "relu1", "pool1", "block1", "gap1", "dense1"]


def test_model_validation_rejects_bad_stacks():
    with pytest.raises(ValidationError):
        ModelSpec((1, 8, 8), 4, (LayerSpec("dense", units=4),))  # dense on spatial input
    with pytest.raises(ValidationError):
        ModelSpec((1, 8, 8), 4, (
            LayerSpec("flatten"),
            LayerSpec("conv", out_channels=2, kernel=3),  # spatial op after flatten
            LayerSpec("dense", units=4)))
    with pytest.raises(ValidationError):
        ModelSpec((1, 4, 4), 4, (
            LayerSpec("maxpool", kernel=5, stride=1),  # kernel larger than input
            LayerSpec("gap"), LayerSpec("dense", units=4)))
    with pytest.raises(ValidationError):
        ModelSpec((1, 8, 8), 4, (
            LayerSpec("gap"), LayerSpec("dense", units=3)))  # head width != classes


def test_init_params_deterministic_and_bounded():
    spec = small_model()
    a = init_params(spec, 11)
    b = init_params(spec, 11)
    c = init_params(spec, 12)
    for name in a:
        for p in a[name]:
            np.testing.assert_array_equal(a[name][p], b[name][p])
    assert any((a[n][p] != c[n][p]).any() for n in a for p in a[n])

    w = a["conv1"]["weight"]
    bound = np.sqrt(6.0 / (1 * 3 * 3))
    assert np.abs(w).max() <= bound
    np.testing.assert_array_equal(a["conv1"]["bias"], 0.0)
    dw = a["dense1"]["weight"]
    xbound = np.sqrt(6.0 / (8 + 5))
    assert np.abs(dw).max() <= xbound


def test_residual_projection_only_when_needed():
    stay = ModelSpec((4, 8, 8), 3, (
        LayerSpec("residual", out_channels=4, stride=1),
        LayerSpec("gap"), LayerSpec("dense", units=3)))
    change = ModelSpec((4, 8, 8), 3, (
        LayerSpec("residual", out_channels=8, stride=1),
        LayerSpec("gap"), LayerSpec("dense", units=3)))
    assert "proj_weight" not in param_shapes(stay)["block1"]
    assert param_shapes(change)["block1"]["proj_weight"] == (8, 4, 1, 1)


def test_flatten_layer_params_canonical_order():
    flat = flatten_layer_params(
        {"bias": np.array([5.0, 6.0]), "weight": np.array([[1.0, 2.0], [3.0, 4.0]])},
        "dense")
    np.testing.assert_array_equal(flat, [1, 2, 3, 4, 5, 6])
    with pytest.raises(ValidationError):
        flatten_layer_params({"weight": np.zeros(2), "extra": np.zeros(1)}, "dense")


def test_forward_rejects_wrong_shapes():
    spec = small_model()
    params = init_params(spec, 0)
    with pytest.raises(ValidationError):
        forward(spec, params, np.zeros((2, 1, 8, 8)))
    with pytest.raises(ValidationError):
        loss_and_grad(spec, params, np.zeros((2, 1, 10, 10)), np.array([0, 9]))


def test_predict_tie_goes_to_lowest_class():
    spec = ModelSpec((1, 2, 2), 3, (LayerSpec("flatten"), LayerSpec("dense", units=3)))
    params = {"dense1": {"weight": np.zeros((3, 4)), "bias": np.zeros(3)}}
    assert predict(spec, params, np.ones((2, 1, 2, 2))).tolist() == [0, 0]


def test_sgd_step_is_pure_and_correct():
    spec = small_model()
    params = init_params(spec, 1)
    before = params["dense1"]["weight"].copy()
    x = np.random.default_rng(4).normal(size=(3, 1, 10, 10))
    _, grads = loss_and_grad(spec, params, x, np.array([0, 1, 2]))
    stepped = sgd_step(params, grads, 0.5)
    np.testing.assert_array_equal(params["dense1"]["weight"], before)
    np.testing.assert_allclose(
        stepped["dense1"]["weight"],
        before - 0.5 * grads["dense1"]["weight"], rtol=1e-15)


def test_training_reduces_loss():
    spec = small_model()
    params = init_params(spec, 7)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(8, 1, 10, 10))
    y = rng.integers(0, 5, size=8)
    first, grads = loss_and_grad(spec, params, x, y)
    for _ in range(20):
        loss, grads = loss_and_grad(spec, params, x, y)
        params = sgd_step(params, grads, 0.1)
    final, _ = loss_and_grad(spec, params, x, y)
    assert final < first * 0.5
