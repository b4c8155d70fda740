"""Architecture helpers: a receptive-field calculator and the CNN builders
used by the width/depth/schedule experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import LayerSpec, ModelSpec
from .errors import ValidationError

SCHEDULES = ("normal", "mean", "reversed")


@dataclass(frozen=True)
class RFRow:
    """Receptive field state after one sliding layer.

    rf is the input-pixel extent one output unit sees; jump is the cumulative
    stride product, i.e. the input-pixel distance between neighboring outputs.
    """

    name: str
    kind: str
    kernel: int
    stride: int
    rf: int
    jump: int


def receptive_field(model: ModelSpec | list[LayerSpec] | tuple[LayerSpec, ...]) -> list[RFRow]:
    """Per-layer receptive field via rf += (k - 1) * jump, starting at rf 1.

    Residual blocks contribute their two stacked 3x3 convs as separate rows
    (the 1x1 projection never widens the field). Layers without spatial
    extent produce no row; a sliding layer after flatten or gap is an error.
    """
    layers = tuple(model.layers) if isinstance(model, ModelSpec) else tuple(model)
    rows: list[RFRow] = []
    rf, jump = 1, 1
    spatial = True
    counts: dict[str, int] = {}

    def emit(name: str, kind: str, kernel: int, stride: int):
        nonlocal rf, jump
        rf = rf + (kernel - 1) * jump
        jump = jump * stride
        rows.append(RFRow(name=name, kind=kind, kernel=kernel, stride=stride, rf=rf, jump=jump))

    for layer in layers:
        prefix = {"conv": "conv", "maxpool": "pool", "residual": "block"}.get(layer.kind)
        if prefix is not None:
            if not spatial:
                raise ValidationError(f"{layer.kind} layer appears after the spatial extent ended")
            counts[prefix] = counts.get(prefix, 0) + 1
            base = f"{prefix}{counts[prefix]}"
            if layer.kind == "residual":
                emit(f"{base}.conv1", "conv", 3, layer.stride)
                emit(f"{base}.conv2", "conv", 3, 1)
            else:
                emit(base, layer.kind, layer.kernel, layer.stride)
        elif layer.kind in ("flatten", "gap"):
            spatial = False
        # relu and dense leave the field untouched
    return rows


def final_receptive_field(model: ModelSpec | list[LayerSpec] | tuple[LayerSpec, ...]) -> int:
    rows = receptive_field(model)
    return rows[-1].rf if rows else 1


def channel_schedule(depth_blocks: int, base_width: int, schedule: str,
                     width_multiplier: float = 1.0) -> list[int]:
    """Stage widths for the three studied layouts.

    normal doubles per stage from base_width; mean holds every stage at the
    normal layout's average (same total, no taper); reversed runs the normal
    layout backwards. The multiplier scales each width, rounded half-up with
    a floor of one channel.
    """
    if depth_blocks < 1:
        raise ValidationError("depth_blocks must be >= 1")
    if base_width < 1:
        raise ValidationError("base_width must be >= 1")
    if not width_multiplier > 0:
        raise ValidationError("width_multiplier must be > 0")
    if schedule not in SCHEDULES:
        raise ValidationError(f"schedule must be one of {SCHEDULES}, got {schedule!r}")
    normal = [base_width * 2 ** i for i in range(depth_blocks)]
    if schedule == "normal":
        widths = normal
    elif schedule == "mean":
        widths = [int(np.floor(np.mean(normal) + 0.5))] * depth_blocks
    else:
        widths = normal[::-1]
    return [max(1, int(np.floor(width_multiplier * w + 0.5))) for w in widths]


def build_cnn(input_shape: tuple[int, int, int], num_classes: int,
              depth_blocks: int = 4, base_width: int = 32,
              width_multiplier: float = 1.0, schedule: str = "normal",
              stem: str = "conv3", stem_pool: bool = False,
              residual: bool = False) -> ModelSpec:
    """Stage-structured classifier: stem, depth_blocks stages, gap, dense.

    Each stage holds two 3x3 convs (or one residual block) at that stage's
    width; stages past the first open with a stride-2 downsample. The conv7
    stem is 7x7 stride 2; conv3 is 3x3 stride 1. stem_pool adds a 3x3
    stride-2 max pool after the stem.
    """
    if stem not in ("conv3", "conv7"):
        raise ValidationError(f"stem must be conv3 or conv7, got {stem!r}")
    widths = channel_schedule(depth_blocks, base_width, schedule, width_multiplier)
    layers: list[LayerSpec] = []
    if stem == "conv7":
        layers += [LayerSpec("conv", out_channels=widths[0], kernel=7, stride=2, padding=3),
                   LayerSpec("relu")]
    else:
        layers += [LayerSpec("conv", out_channels=widths[0], kernel=3, stride=1, padding=1),
                   LayerSpec("relu")]
    if stem_pool:
        layers.append(LayerSpec("maxpool", kernel=3, stride=2))
    for i, ch in enumerate(widths):
        stride = 1 if i == 0 else 2
        if residual:
            layers.append(LayerSpec("residual", out_channels=ch, stride=stride))
        else:
            layers += [LayerSpec("conv", out_channels=ch, kernel=3, stride=stride, padding=1),
                       LayerSpec("relu"),
                       LayerSpec("conv", out_channels=ch, kernel=3, stride=1, padding=1),
                       LayerSpec("relu")]
    layers += [LayerSpec("gap"), LayerSpec("dense", units=num_classes)]
    return ModelSpec(input_shape=tuple(input_shape), num_classes=num_classes,
                     layers=tuple(layers))


def build_probe_cnns(input_shape: tuple[int, int, int] = (1, 28, 28),
                     num_classes: int = 10,
                     width: int = 16) -> tuple[ModelSpec, ModelSpec]:
    """The uniform-width pair used by the gradient-noise probes.

    Shallow is four 3x3 convs with one mid-stack pool; deep is eight with
    pools after the second and sixth. A shared width keeps the first conv the
    same shape in both, so its statistics compare directly.
    """
    def conv():
        return [LayerSpec("conv", out_channels=width, kernel=3, stride=1, padding=1),
                LayerSpec("relu")]

    pool = LayerSpec("maxpool", kernel=2, stride=2)
    head = [LayerSpec("gap"), LayerSpec("dense", units=num_classes)]
    shallow = ModelSpec(input_shape=tuple(input_shape), num_classes=num_classes,
                        layers=tuple(conv() + conv() + [pool] + conv() + conv() + head))
    deep_layers = (conv() + conv() + [pool] + conv() + conv() + conv() + conv()
                   + [pool] + conv() + conv() + head)
    deep = ModelSpec(input_shape=tuple(input_shape), num_classes=num_classes,
                     layers=tuple(deep_layers))
    return shallow, deep
