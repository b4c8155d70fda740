"""Analytic gradients against central finite differences.

Every layer kind appears in the checked models. Checked coordinates are
sampled, 20 per parameterized layer, and inputs are redrawn when a relu
pre-activation or a pool top-two margin sits close enough to a kink to
poison the difference quotient.
"""

import time

import numpy as np

from fedsimlab import layers as L
from fedsimlab.engine import LayerSpec, ModelSpec, forward, init_params, loss_and_grad, named_layers

H = 1e-5
REL_TOL = 1e-4
COORDS_PER_LAYER = 20

MODEL_WITH_SIX_KINDS = ModelSpec((1, 10, 10), 5, (
    LayerSpec("conv", out_channels=4, kernel=3, stride=1, padding=1),
    LayerSpec("relu"),
    LayerSpec("maxpool", kernel=2, stride=2),
    LayerSpec("residual", out_channels=8, stride=2),
    LayerSpec("gap"),
    LayerSpec("dense", units=5),
))

MODEL_WITH_FLATTEN = ModelSpec((2, 6, 6), 4, (
    LayerSpec("conv", out_channels=3, kernel=3, stride=1, padding=0),
    LayerSpec("relu"),
    LayerSpec("flatten"),
    LayerSpec("dense", units=4),
))

MODEL_PROJECTIONLESS_RESIDUAL = ModelSpec((4, 6, 6), 3, (
    LayerSpec("residual", out_channels=4, stride=1),
    LayerSpec("gap"),
    LayerSpec("dense", units=3),
))

ALL_MODELS = (MODEL_WITH_SIX_KINDS, MODEL_WITH_FLATTEN, MODEL_PROJECTIONLESS_RESIDUAL)


def _loss_only(spec, params, x, labels):
    loss, _ = L.cross_entropy(forward(spec, params, x), labels)
    return loss


def _pool_margin(x, kernel, stride):
    """Smallest top-two gap over pool windows.

    Windows whose maximum is exactly 0 are relu-clamped flats: every route
    carries zero gradient, so their tie cannot distort the quotient.
    """
    v = L._windows(x, kernel, stride, padding=0)
    flat = v.reshape(v.shape[:4] + (kernel * kernel,))
    top2 = np.partition(flat, flat.shape[-1] - 2, axis=-1)
    gaps = top2[..., -1] - top2[..., -2]
    gaps = np.where(top2[..., -1] == 0.0, np.inf, gaps)
    return float(gaps.min())


def _kink_margin(spec, params, x):
    """Walk the stack explicitly, recording how close any relu input comes to
    zero and any pool window to a tie."""
    margin = np.inf
    cur = np.asarray(x, dtype=np.float64)
    for name, layer in named_layers(spec):
        if layer.kind == "conv":
            p = params[name]
            cur = L.conv2d_forward(cur, p["weight"], p["bias"], layer.stride, layer.padding)
        elif layer.kind == "relu":
            margin = min(margin, float(np.abs(cur).min()))
            cur = L.relu_forward(cur)
        elif layer.kind == "maxpool":
            if layer.kernel > 1:
                margin = min(margin, _pool_margin(cur, layer.kernel, layer.stride))
            cur, _ = L.maxpool2d_forward(cur, layer.kernel, layer.stride)
        elif layer.kind == "gap":
            cur = L.global_avg_pool_forward(cur)
        elif layer.kind == "flatten":
            cur = cur.reshape(cur.shape[0], -1)
        elif layer.kind == "dense":
            p = params[name]
            cur = L.dense_forward(cur, p["weight"], p["bias"])
        elif layer.kind == "residual":
            p = params[name]
            h1 = L.conv2d_forward(cur, p["conv1_weight"], p["conv1_bias"], layer.stride, 1)
            margin = min(margin, float(np.abs(h1).min()))
            a1 = L.relu_forward(h1)
            h2 = L.conv2d_forward(a1, p["conv2_weight"], p["conv2_bias"], 1, 1)
            margin = min(margin, float(np.abs(h2).min()))
            skip = cur
            if "proj_weight" in p:
                skip = L.conv2d_forward(cur, p["proj_weight"], p["proj_bias"], layer.stride, 0)
            cur = skip + L.relu_forward(h2)
    return margin


def _safe_batch(spec, params, seed, batch=3):
    """Draw inputs until every kink sits at least 10 steps away.

    A +-H parameter sweep moves a pre-activation by O(H), so a margin of
    10 * H keeps every relu sign and pool argmax fixed during the quotient.
    """
    for attempt in range(50):
        rng = np.random.default_rng(seed * 100 + attempt)
        x = rng.normal(size=(batch,) + spec.input_shape)
        labels = rng.integers(0, spec.num_classes, size=batch)
        if _kink_margin(spec, params, x) > 10 * H:
            return x, labels
    raise AssertionError("could not find a kink-free batch")


def _check_model(spec, seed):
    params = init_params(spec, seed)
    x, labels = _safe_batch(spec, params, seed)
    _, grads = loss_and_grad(spec, params, x, labels)
    rng = np.random.default_rng(seed)
    checked = 0
    for name in grads:
        for pname, grad in grads[name].items():
            flat_indices = rng.choice(grad.size, size=min(COORDS_PER_LAYER, grad.size),
                                      replace=False)
            for fi in flat_indices:
                idx = np.unravel_index(fi, grad.shape)
                orig = params[name][pname][idx]
                params[name][pname][idx] = orig + H
                up = _loss_only(spec, params, x, labels)
                params[name][pname][idx] = orig - H
                down = _loss_only(spec, params, x, labels)
                params[name][pname][idx] = orig
                numeric = (up - down) / (2 * H)
                analytic = grad[idx]
                denom = max(abs(numeric), abs(analytic))
                if denom < 1e-10:
                    continue  # both effectively zero
                rel = abs(numeric - analytic) / denom
                assert rel < REL_TOL, (
                    f"{name}.{pname}{idx}: analytic {analytic:.10g} "
                    f"vs numeric {numeric:.10g} (rel {rel:.3g})")
                checked += 1
    assert checked > 0


def test_gradients_all_layer_kinds_within_tolerance():
    start = time.time()
    for seed, spec in enumerate(ALL_MODELS):
        _check_model(spec, seed)
    kinds = {layer.kind for m in ALL_MODELS for layer in m.layers}
    assert kinds == {"conv", "relu", "maxpool", "residual", "gap", "flatten", "dense"}
    assert time.time() - start < 60


def test_gradients_repeat_across_seeds():
    for seed in (3, 4):
        _check_model(MODEL_WITH_FLATTEN, seed=seed)


def test_gradient_of_mean_loss_is_mean_of_sample_gradients():
    spec = MODEL_WITH_FLATTEN
    params = init_params(spec, 9)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4,) + spec.input_shape)
    labels = rng.integers(0, spec.num_classes, size=4)
    _, g_all = loss_and_grad(spec, params, x, labels)
    per_sample = []
    for i in range(4):
        _, gi = loss_and_grad(spec, params, x[i:i + 1], labels[i:i + 1])
        per_sample.append(gi)
    for name in g_all:
        for pname in g_all[name]:
            mean_grad = np.mean([g[name][pname] for g in per_sample], axis=0)
            np.testing.assert_allclose(g_all[name][pname], mean_grad, rtol=1e-9, atol=1e-12)
