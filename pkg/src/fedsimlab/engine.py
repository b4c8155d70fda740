"""Model definition and training engine.

A model is a flat sequence of layer specs evaluated in order. Parameters live
in plain nested dicts (layer name -> param name -> float64 array) so they can
be averaged, flattened, and diffed without ceremony.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from . import layers as L

Params = dict[str, dict[str, np.ndarray]]

LAYER_KINDS = ("conv", "relu", "maxpool", "gap", "flatten", "dense", "residual")

# canonical parameter order inside a layer; flattening follows it row-major
PARAM_ORDER = {
    "conv": ("weight", "bias"),
    "dense": ("weight", "bias"),
    "residual": ("conv1_weight", "conv1_bias", "conv2_weight", "conv2_bias",
                 "proj_weight", "proj_bias"),
}

_NAME_PREFIX = {
    "conv": "conv", "relu": "relu", "maxpool": "pool", "gap": "gap",
    "flatten": "flatten", "dense": "dense", "residual": "block",
}


@dataclass(frozen=True)
class LayerSpec:
    """One layer in a model.

    kind: one of LAYER_KINDS.
    out_channels: conv/residual output channels.
    kernel: conv/maxpool square kernel size.
    stride: conv/maxpool/residual stride (residual strides in its first conv).
    padding: conv zero padding per side.
    units: dense output width.
    """

    kind: str
    out_channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int = 0
    units: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "residual") and (self.out_channels is None or self.out_channels < 1):
            raise ValidationError(f"{self.kind} layer needs out_channels >= 1")
        if self.kind in ("conv", "maxpool") and (self.kernel is None or self.kernel < 1):
            raise ValidationError(f"{self.kind} layer needs kernel >= 1")
        if self.kind == "dense" and (self.units is None or self.units < 1):
            raise ValidationError("dense layer needs units >= 1")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")
        if self.padding < 0:
            raise ValidationError("padding must be >= 0")


@dataclass(frozen=True)
class ModelSpec:
    """A full classifier: input shape (C, H, W), class count, layer list."""

    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValidationError("input_shape must be (channels, height, width), all >= 1")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        layer_output_shapes(self)  # raises on an inconsistent stack


def named_layers(spec: ModelSpec) -> list[tuple[str, LayerSpec]]:
    """Stable names: conv1, conv2, ... numbered per kind in stack order."""
    counts: dict[str, int] = {}
    out = []
    for layer in spec.layers:
        prefix = _NAME_PREFIX[layer.kind]
        counts[prefix] = counts.get(prefix, 0) + 1
        out.append((f"{prefix}{counts[prefix]}", layer))
    return out


def layer_output_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Shape after each layer; raises ValidationError on any mismatch.

    Spatial shapes are (C, H, W) triples, flat shapes are (F,) singletons.
    """
    shapes: list[tuple[int, ...]] = []
    cur: tuple[int, ...] = spec.input_shape
    for idx, layer in enumerate(spec.layers):
        where = f"layer {idx} ({layer.kind})"
        if layer.kind in ("conv", "maxpool", "gap", "flatten", "residual") and len(cur) != 3:
            raise ValidationError(f"{where} expects a spatial input, got shape {cur}")
        if layer.kind == "conv":
            c, h, w = cur
            ho, wo = L.conv2d_output_hw(h, w, layer.kernel, layer.stride, layer.padding)
            if ho < 1 or wo < 1:
                raise ValidationError(f"{where} output collapses to {ho}x{wo} from {h}x{w}")
            cur = (layer.out_channels, ho, wo)
        elif layer.kind == "residual":
            c, h, w = cur
            ho = (h + 2 - 3) // layer.stride + 1
            wo = (w + 2 - 3) // layer.stride + 1
            if h < 1 or ho < 1 or wo < 1:
                raise ValidationError(f"{where} output collapses from {h}x{w}")
            cur = (layer.out_channels, ho, wo)
        elif layer.kind == "maxpool":
            c, h, w = cur
            if h < layer.kernel or w < layer.kernel:
                raise ValidationError(f"{where} kernel {layer.kernel} exceeds input {h}x{w}")
            ho = (h - layer.kernel) // layer.stride + 1
            wo = (w - layer.kernel) // layer.stride + 1
            cur = (c, ho, wo)
        elif layer.kind == "gap":
            cur = (cur[0],)
        elif layer.kind == "flatten":
            cur = (cur[0] * cur[1] * cur[2],)
        elif layer.kind == "relu":
            pass
        elif layer.kind == "dense":
            if len(cur) != 1:
                raise ValidationError(f"{where} expects a flat input; add flatten or gap first")
            cur = (layer.units,)
        shapes.append(cur)
    if not spec.layers or shapes[-1] != (spec.num_classes,):
        raise ValidationError(
            f"model must end in a flat ({spec.num_classes},) output, got {shapes[-1] if shapes else 'no layers'}")
    return shapes


def _residual_has_projection(in_channels: int, layer: LayerSpec) -> bool:
    return layer.stride != 1 or in_channels != layer.out_channels


def param_shapes(spec: ModelSpec) -> dict[str, dict[str, tuple[int, ...]]]:
    """Shapes of every trainable array, keyed layer name -> param name."""
    shapes: dict[str, dict[str, tuple[int, ...]]] = {}
    cur: tuple[int, ...] = spec.input_shape
    out_shapes = layer_output_shapes(spec)
    for (name, layer), out in zip(named_layers(spec), out_shapes):
        if layer.kind == "conv":
            shapes[name] = {
                "weight": (layer.out_channels, cur[0], layer.kernel, layer.kernel),
                "bias": (layer.out_channels,),
            }
        elif layer.kind == "dense":
            shapes[name] = {"weight": (layer.units, cur[0]), "bias": (layer.units,)}
        elif layer.kind == "residual":
            o = layer.out_channels
            shapes[name] = {
                "conv1_weight": (o, cur[0], 3, 3), "conv1_bias": (o,),
                "conv2_weight": (o, o, 3, 3), "conv2_bias": (o,),
            }
            if _residual_has_projection(cur[0], layer):
                shapes[name]["proj_weight"] = (o, cur[0], 1, 1)
                shapes[name]["proj_bias"] = (o,)
        cur = out
    return shapes


def init_params(spec: ModelSpec, seed: int) -> Params:
    """Fresh parameters: kaiming-uniform conv weights, xavier-uniform dense
    weights, zero biases. Same seed, same model -> identical arrays."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0])))
    params: Params = {}
    for name, per_layer in param_shapes(spec).items():
        params[name] = {}
        for pname in PARAM_ORDER["residual" if name.startswith("block") else
                                 ("conv" if name.startswith("conv") else "dense")]:
            if pname not in per_layer:
                continue
            shape = per_layer[pname]
            if pname.endswith("bias"):
                params[name][pname] = np.zeros(shape)
            elif len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
                bound = np.sqrt(6.0 / fan_in)
                params[name][pname] = rng.uniform(-bound, bound, size=shape)
            else:
                fan_in, fan_out = shape[1], shape[0]
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                params[name][pname] = rng.uniform(-bound, bound, size=shape)
    return params


def clone_params(params: Params) -> Params:
    return {name: {p: a.copy() for p, a in per.items()} for name, per in params.items()}


def count_parameters(params: Params) -> int:
    return sum(a.size for per in params.values() for a in per.values())


def flatten_layer_params(layer_params: dict[str, np.ndarray], kind: str) -> np.ndarray:
    """Concatenate a layer's arrays into one vector, canonical order, row-major."""
    names = [n for n in PARAM_ORDER[kind] if n in layer_params]
    if set(names) != set(layer_params):
        raise ValidationError(f"unexpected params {sorted(set(layer_params) - set(names))} for kind {kind!r}")
    return np.concatenate([np.ravel(layer_params[n]) for n in names])


def _residual_forward(x, p, stride, keep):
    h1 = L.conv2d_forward(x, p["conv1_weight"], p["conv1_bias"], stride, 1)
    a1 = L.relu_forward(h1)
    h2 = L.conv2d_forward(a1, p["conv2_weight"], p["conv2_bias"], 1, 1)
    a2 = L.relu_forward(h2)
    if "proj_weight" in p:
        skip = L.conv2d_forward(x, p["proj_weight"], p["proj_bias"], stride, 0)
    else:
        skip = x
    y = skip + a2
    return y, ((x, h1, a1, h2) if keep else None)


def _residual_backward(p, stride, cache, dy):
    x, h1, a1, h2 = cache
    grads = {}
    dh2 = L.relu_backward(h2, dy)
    da1, grads["conv2_weight"], grads["conv2_bias"] = L.conv2d_backward(a1, p["conv2_weight"], 1, 1, dh2)
    dh1 = L.relu_backward(h1, da1)
    dx, grads["conv1_weight"], grads["conv1_bias"] = L.conv2d_backward(x, p["conv1_weight"], stride, 1, dh1)
    if "proj_weight" in p:
        dskip, grads["proj_weight"], grads["proj_bias"] = L.conv2d_backward(x, p["proj_weight"], stride, 0, dy)
        dx = dx + dskip
    else:
        dx = dx + dy
    return dx, grads


def _run_forward(spec: ModelSpec, params: Params, x: np.ndarray, keep: bool):
    caches = []
    cur = x
    for name, layer in named_layers(spec):
        if layer.kind == "conv":
            p = params[name]
            caches.append((cur,) if keep else None)
            cur = L.conv2d_forward(cur, p["weight"], p["bias"], layer.stride, layer.padding)
        elif layer.kind == "relu":
            caches.append((cur,) if keep else None)
            cur = L.relu_forward(cur)
        elif layer.kind == "maxpool":
            y, arg = L.maxpool2d_forward(cur, layer.kernel, layer.stride)
            caches.append((cur.shape, arg) if keep else None)
            cur = y
        elif layer.kind == "gap":
            caches.append((cur.shape,) if keep else None)
            cur = L.global_avg_pool_forward(cur)
        elif layer.kind == "flatten":
            caches.append((cur.shape,) if keep else None)
            cur = cur.reshape(cur.shape[0], -1)
        elif layer.kind == "dense":
            p = params[name]
            caches.append((cur,) if keep else None)
            cur = L.dense_forward(cur, p["weight"], p["bias"])
        elif layer.kind == "residual":
            cur, cache = _residual_forward(cur, params[name], layer.stride, keep)
            caches.append(cache)
    return cur, caches


def forward(spec: ModelSpec, params: Params, x: np.ndarray) -> np.ndarray:
    """Logits (B, num_classes) for a batch x of shape (B, C, H, W)."""
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ValidationError(f"batch shape {x.shape} does not match input_shape {spec.input_shape}")
    logits, _ = _run_forward(spec, params, np.asarray(x, dtype=np.float64), keep=False)
    return logits


def loss_and_grad(spec: ModelSpec, params: Params, x: np.ndarray,
                  labels: np.ndarray) -> tuple[float, Params]:
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ValidationError(f"batch shape {x.shape} does not match input_shape {spec.input_shape}")
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise ValidationError(f"labels shape {labels.shape} does not match batch size {x.shape[0]}")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ValidationError("labels out of range for num_classes")

    logits, caches = _run_forward(spec, params, np.asarray(x, dtype=np.float64), keep=True)
    loss, dy = L.cross_entropy(logits, labels)

    grads: Params = {}
    for (name, layer), cache in zip(reversed(named_layers(spec)), reversed(caches)):
        if layer.kind == "conv":
            (xin,) = cache
            dy, dw, db = L.conv2d_backward(xin, params[name]["weight"], layer.stride, layer.padding, dy)
            grads[name] = {"weight": dw, "bias": db}
        elif layer.kind == "relu":
            (xin,) = cache
            dy = L.relu_backward(xin, dy)
        elif layer.kind == "maxpool":
            shape, arg = cache
            dy = L.maxpool2d_backward(shape, layer.kernel, layer.stride, arg, dy)
        elif layer.kind == "gap":
            (shape,) = cache
            dy = L.global_avg_pool_backward(shape, dy)
        elif layer.kind == "flatten":
            (shape,) = cache
            dy = dy.reshape(shape)
        elif layer.kind == "dense":
            (xin,) = cache
            dy, dw, db = L.dense_backward(xin, params[name]["weight"], dy)
            grads[name] = {"weight": dw, "bias": db}
        elif layer.kind == "residual":
            dy, g = _residual_backward(params[name], layer.stride, cache, dy)
            grads[name] = g
    return loss, grads


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    """One vanilla SGD update; returns new arrays, inputs untouched."""
    out: Params = {}
    for name, per in params.items():
        if name in grads:
            out[name] = {p: a - lr * grads[name][p] for p, a in per.items()}
        else:
            out[name] = {p: a.copy() for p, a in per.items()}
    return out


def predict(spec: ModelSpec, params: Params, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Predicted class per row; ties go to the lowest class index."""
    preds = []
    for start in range(0, x.shape[0], batch_size):
        logits = forward(spec, params, x[start:start + batch_size])
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
