"""Datasets: IDX file loading, synthetic class-prototype data, i.i.d.
partitioning, and the image augmentations used during local training.

Images are float64 arrays shaped (N, C, H, W) with values in [0, 1] at rest;
augmentation outputs may leave that range only where documented.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FedSimLabError, ValidationError


class IdxFormatError(FedSimLabError):
    """An IDX file is structurally invalid."""


class IdxMagicError(IdxFormatError):
    """The magic number does not describe an unsigned-byte tensor we accept."""


class IdxTruncatedError(IdxFormatError):
    """The file ends before the header-declared payload does."""


class IdxCountMismatchError(IdxFormatError):
    """An image file and its label file disagree on the record count."""


@dataclass(frozen=True)
class Dataset:
    """Immutable image classification dataset."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValidationError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValidationError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError("labels out of range for num_classes")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices].copy(), self.labels[indices].copy(), self.num_classes)


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(path: str) -> np.ndarray:
    """Read one IDX file into a uint8 array of the header-declared shape.

    Only the unsigned-byte element type is supported. The payload must match
    the declared sizes exactly; short or oversized files are rejected.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: shorter than the 4-byte magic")
    zero0, zero1, dtype_code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero0 != 0 or zero1 != 0:
        raise IdxMagicError(f"{path}: first two magic bytes must be zero")
    if dtype_code != 0x08:
        raise IdxMagicError(f"{path}: element type 0x{dtype_code:02x} unsupported, expected 0x08 (ubyte)")
    if not 1 <= ndim <= 3:
        raise IdxMagicError(f"{path}: dimension count {ndim} outside 1..3")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(dims))
    payload = raw[header_end:]
    if len(payload) < expected:
        raise IdxTruncatedError(f"{path}: payload holds {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise IdxFormatError(f"{path}: {len(payload) - expected} trailing bytes after declared payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx_pair(images_path: str, labels_path: str, num_classes: int = 10) -> Dataset:
    """Load an images/labels IDX pair into one Dataset, pixels scaled to [0, 1]."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise IdxMagicError(f"{images_path}: expected a 3-D image tensor, got {images.ndim}-D")
    if labels.ndim != 1:
        raise IdxMagicError(f"{labels_path}: expected a 1-D label vector, got {labels.ndim}-D")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def load_idx_dir(dirpath: str) -> tuple[Dataset, Dataset]:
    """Load the conventional train/t10k IDX quartet (plain or .gz) from a directory."""
    def find(stem: str) -> str:
        for name in (stem, stem + ".gz"):
            candidate = os.path.join(dirpath, name)
            if os.path.exists(candidate):
                return candidate
        raise FileNotFoundError(f"{stem}[.gz] not found under {dirpath}")

    train = load_idx_pair(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    test = load_idx_pair(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    return train, test


@dataclass(frozen=True)
class SyntheticSpec:
    """Class-prototype synthetic data: one uniform-random prototype image per
    class, samples are the prototype plus Gaussian pixel noise, clipped."""

    num_classes: int = 8
    image_shape: tuple[int, int, int] = (1, 16, 16)
    train_per_class: int = 150
    test_per_class: int = 40
    noise_std: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if len(self.image_shape) != 3 or any(d < 1 for d in self.image_shape):
            raise ValidationError("image_shape must be (C, H, W), all >= 1")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValidationError("per-class sample counts must be >= 1")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair; samples are grouped by class."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    c, h, w = spec.image_shape
    protos = rng.uniform(0.0, 1.0, size=(spec.num_classes, c, h, w))

    def draw(per_class: int) -> Dataset:
        noise = rng.normal(0.0, spec.noise_std, size=(spec.num_classes, per_class, c, h, w))
        images = np.clip(protos[:, None] + noise, 0.0, 1.0).reshape(-1, c, h, w)
        labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), per_class)
        return Dataset(images, labels, spec.num_classes)

    return draw(spec.train_per_class), draw(spec.test_per_class)


def partition_iid(dataset: Dataset, n_clients: int, seed: int) -> list[Dataset]:
    """Split into n_clients label-balanced shards, sizes within 1 per class.

    Each class is shuffled independently and dealt round-robin, so every shard
    sees close to the full label distribution. Raises if any shard would be
    empty.
    """
    if n_clients < 1:
        raise ValidationError("n_clients must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 3])))
    shards: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for cls in range(dataset.num_classes):
        idxs = np.flatnonzero(dataset.labels == cls)
        idxs = rng.permutation(idxs)
        for j in range(n_clients):
            shards[j].append(idxs[j::n_clients])
    out = []
    for j, parts in enumerate(shards):
        merged = np.concatenate(parts)
        if merged.size == 0:
            raise ValidationError(f"client {j} would receive no samples; lower n_clients")
        out.append(dataset.subset(merged))
    return out


def resize(images: np.ndarray, out_h: int, out_w: int, method: str = "bilinear") -> np.ndarray:
    """Resize (N, C, H, W) images with half-pixel-centered sampling."""
    n, c, h, w = images.shape
    if out_h < 1 or out_w < 1:
        raise ValidationError("output size must be >= 1")
    if (out_h, out_w) == (h, w):
        return images
    if method == "nearest":
        ri = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.int64)
        ci = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.int64)
        return images[:, :, ri[:, None], ci[None, :]]
    if method != "bilinear":
        raise ValidationError(f"unknown resize method {method!r}")
    ry = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1)
    rx = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1)
    y0 = np.floor(ry).astype(np.int64)
    x0 = np.floor(rx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]
    top = images[:, :, y0][:, :, :, x0] * (1 - fx) + images[:, :, y0][:, :, :, x1] * fx
    bot = images[:, :, y1][:, :, :, x0] * (1 - fx) + images[:, :, y1][:, :, :, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass(frozen=True)
class AugmentationSpec:
    """Which training-time augmentations run, and their strengths.

    Jitter half-widths of zero leave the op disabled; a random resized crop
    uses the usual area/aspect rejection sampling with a center-crop fallback.
    """

    use_rrc: bool = False
    rrc_scale: tuple[float, float] = (0.4, 1.0)
    rrc_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rrc_scale", tuple(self.rrc_scale))
        object.__setattr__(self, "rrc_ratio", tuple(self.rrc_ratio))
        lo, hi = self.rrc_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValidationError("rrc_scale must satisfy 0 < lo <= hi <= 1")
        rlo, rhi = self.rrc_ratio
        if not (0.0 < rlo <= rhi):
            raise ValidationError("rrc_ratio must satisfy 0 < lo <= hi")
        for field_name in ("brightness", "contrast", "saturation", "noise_std"):
            if getattr(self, field_name) < 0:
                raise ValidationError(f"{field_name} must be >= 0")

    @property
    def any_enabled(self) -> bool:
        return (self.use_rrc or self.noise_std > 0
                or max(self.brightness, self.contrast, self.saturation) > 0)


def apply_rrc(images: np.ndarray, rng: np.random.Generator,
              scale: tuple[float, float] = (0.4, 1.0),
              ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)) -> np.ndarray:
    """Random resized crop per image, output size equal to the input size."""
    n, c, h, w = images.shape
    log_ratio = (np.log(ratio[0]), np.log(ratio[1]))
    out = np.empty_like(images)
    for i in range(n):
        crop = None
        for _ in range(10):
            area = rng.uniform(scale[0], scale[1]) * h * w
            r = np.exp(rng.uniform(log_ratio[0], log_ratio[1]))
            cw = int(round(np.sqrt(area * r)))
            ch = int(round(np.sqrt(area / r)))
            if 0 < cw <= w and 0 < ch <= h:
                top = int(rng.integers(0, h - ch + 1))
                left = int(rng.integers(0, w - cw + 1))
                crop = images[i:i + 1, :, top:top + ch, left:left + cw]
                break
        if crop is None:
            # center crop at the nearest in-range aspect
            if w / h < ratio[0]:
                cw, ch = w, min(h, int(round(w / ratio[0])))
            elif w / h > ratio[1]:
                cw, ch = min(w, int(round(h * ratio[1]))), h
            else:
                cw, ch = w, h
            top = (h - ch) // 2
            left = (w - cw) // 2
            crop = images[i:i + 1, :, top:top + ch, left:left + cw]
        out[i] = resize(crop, h, w, method="bilinear")[0]
    return out


def apply_color_jitter(images: np.ndarray, rng: np.random.Generator,
                       brightness: float = 0.0, contrast: float = 0.0,
                       saturation: float = 0.0) -> np.ndarray:
    """Per-image brightness/contrast/saturation scaling, output clipped to [0, 1].

    All enabled factor draws happen even when a half-width is zero, keeping
    the random stream identical across strength settings; a zero half-width
    op is then skipped so it is an exact identity. Saturation applies only to
    3-channel images and draws nothing otherwise.
    """
    n, c, _, _ = images.shape
    fb = rng.uniform(max(0.0, 1.0 - brightness), 1.0 + brightness, size=n)
    fc = rng.uniform(max(0.0, 1.0 - contrast), 1.0 + contrast, size=n)
    fs = rng.uniform(max(0.0, 1.0 - saturation), 1.0 + saturation, size=n) if c == 3 else None
    out = images
    if brightness > 0:
        out = out * fb[:, None, None, None]
    if contrast > 0:
        m = out.mean(axis=(2, 3), keepdims=True)
        out = (out - m) * fc[:, None, None, None] + m
    if saturation > 0 and fs is not None:
        weights = np.array([0.299, 0.587, 0.114])
        gray = np.einsum("nchw,c->nhw", out, weights)[:, None, :, :]
        out = gray + fs[:, None, None, None] * (out - gray)
    if out is images:
        return images
    return np.clip(out, 0.0, 1.0)


def add_gaussian_noise(images: np.ndarray, rng: np.random.Generator, std: float) -> np.ndarray:
    """Additive pixel noise; values are deliberately not clipped afterwards."""
    return images + rng.normal(0.0, std, size=images.shape)


def augment_batch(images: np.ndarray, rng: np.random.Generator,
                  aug: AugmentationSpec) -> np.ndarray:
    """Apply the enabled augmentations in a fixed order: crop, jitter, noise.

    May return the input array itself when nothing is enabled; callers must
    treat the result as read-only.
    """
    out = images
    if aug.use_rrc:
        out = apply_rrc(out, rng, scale=aug.rrc_scale, ratio=aug.rrc_ratio)
    if max(aug.brightness, aug.contrast, aug.saturation) > 0:
        out = apply_color_jitter(out, rng, brightness=aug.brightness,
                                 contrast=aug.contrast, saturation=aug.saturation)
    if aug.noise_std > 0:
        out = add_gaussian_noise(out, rng, aug.noise_std)
    return out
