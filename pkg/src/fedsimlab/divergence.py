"""Gradient-divergence probes and the gradient-decomposition Monte-Carlo check.

The probes measure how much per-layer gradients scatter when the input is
perturbed (Gaussian pixel noise around one image) or swapped (different
images of one class). The decomposition check simulates backpropagation
through a single dense layer and verifies, by sampling, that the gradient
deviation splits into an upstream-carried term and a locally-generated term
whose cross term vanishes, which is what makes the deviation norm grow as it
travels toward the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .arch import build_probe_cnns
from .data import Dataset
from .engine import (ModelSpec, Params, PARAM_ORDER, flatten_layer_params, loss_and_grad,
                     named_layers)
from .errors import ValidationError
from .federation import run_centralized


@dataclass(frozen=True)
class LayerDivergenceProfile:
    """Per-layer scatter statistic: sqrt of the mean per-parameter variance."""

    layer_names: tuple[str, ...]
    values: tuple[float, ...]
    n_samples: int

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.layer_names, self.values))


class _VarAccumulator:
    """Streaming per-parameter mean and variance (Welford), one vector per layer."""

    def __init__(self):
        self.n = 0
        self.mean: dict[str, np.ndarray] = {}
        self.m2: dict[str, np.ndarray] = {}

    def add(self, flat_grads: dict[str, np.ndarray]):
        self.n += 1
        for name, g in flat_grads.items():
            if name not in self.mean:
                self.mean[name] = np.zeros_like(g)
                self.m2[name] = np.zeros_like(g)
            delta = g - self.mean[name]
            self.mean[name] += delta / self.n
            self.m2[name] += delta * (g - self.mean[name])

    def profile(self) -> LayerDivergenceProfile:
        if self.n < 2:
            raise ValidationError("variance needs at least 2 samples")
        names = tuple(self.mean)
        values = tuple(float(np.sqrt(np.mean(self.m2[n] / self.n))) for n in names)
        return LayerDivergenceProfile(layer_names=names, values=values, n_samples=self.n)


def _flat_layer_grads(spec: ModelSpec, params: Params, x: np.ndarray,
                      label: int) -> dict[str, np.ndarray]:
    _, grads = loss_and_grad(spec, params, x[None], np.array([label]))
    out = {}
    for name, layer in named_layers(spec):
        if layer.kind in PARAM_ORDER:
            out[name] = flatten_layer_params(grads[name], layer.kind)
    return out


def gradient_divergence_noise(spec: ModelSpec, params: Params, image: np.ndarray,
                              label: int, n_samples: int = 1000,
                              noise_std: float = 0.1, seed: int = 0) -> LayerDivergenceProfile:
    """Per-layer gradient scatter under additive pixel noise on one image.

    Each sample perturbs the image with fresh N(0, noise_std^2) noise from its
    own seeded stream, so the result does not depend on evaluation order.
    """
    if n_samples < 2:
        raise ValidationError("n_samples must be >= 2")
    if noise_std < 0:
        raise ValidationError("noise_std must be >= 0")
    acc = _VarAccumulator()
    for s in range(n_samples):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 5, s])))
        x = image + rng.normal(0.0, noise_std, size=image.shape)
        acc.add(_flat_layer_grads(spec, params, x, label))
    return acc.profile()


def gradient_divergence_class(spec: ModelSpec, params: Params, dataset: Dataset,
                              label: int, max_samples: int | None = None) -> LayerDivergenceProfile:
    """Per-layer gradient scatter across distinct images of one class."""
    idxs = np.flatnonzero(dataset.labels == label)
    if max_samples is not None:
        idxs = idxs[:max_samples]
    if idxs.size < 2:
        raise ValidationError(f"need at least 2 images of class {label}, found {idxs.size}")
    acc = _VarAccumulator()
    for i in idxs:
        acc.add(_flat_layer_grads(spec, params, dataset.images[i], label))
    return acc.profile()


@dataclass(frozen=True)
class AccumulationResult:
    """Probe outcome for the shallow/deep CNN pair on one seed.

    deep_spearman_rho correlates conv position with scatter in the deep model;
    the accumulation effect shows up as a negative value (early layers scatter
    more). first_conv_* compare the two models at their identically-shaped
    first conv.
    """

    seed: int
    base_index: int
    base_label: int
    shallow_profile: LayerDivergenceProfile
    deep_profile: LayerDivergenceProfile
    deep_spearman_rho: float
    shallow_spearman_rho: float
    first_conv_shallow: float
    first_conv_deep: float


def conv_spearman(profile: LayerDivergenceProfile) -> float:
    """Rank correlation of conv stack position against the scatter statistic."""
    pairs = [(i, v) for i, (n, v) in enumerate(zip(profile.layer_names, profile.values))
             if n.startswith("conv")]
    if len(pairs) < 2:
        raise ValidationError("need at least 2 conv layers for a rank correlation")
    rho, _ = stats.spearmanr([p[0] for p in pairs], [p[1] for p in pairs])
    return float(rho)


def run_accumulation_experiment(train: Dataset, seed: int, n_samples: int = 200,
                                noise_std: float = 0.1, pretrain_epochs: int = 2,
                                lr: float = 0.02, batch_size: int = 32,
                                probe_width: int = 16,
                                image_index: int | None = None) -> AccumulationResult:
    """Pre-train the probe pair briefly, then profile both around one image."""
    c, h, w = train.images.shape[1:]
    shallow, deep = build_probe_cnns((c, h, w), train.num_classes, width=probe_width)
    if image_index is None:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 4])))
        image_index = int(rng.integers(0, len(train)))
    image = train.images[image_index]
    label = int(train.labels[image_index])

    profiles = []
    for spec in (shallow, deep):
        trained = run_centralized(spec, train, epochs=pretrain_epochs, lr=lr,
                                  batch_size=batch_size, seed=seed, eval_every=0)
        profiles.append(gradient_divergence_noise(
            spec, trained.final_params, image, label,
            n_samples=n_samples, noise_std=noise_std, seed=seed))
    shallow_profile, deep_profile = profiles
    return AccumulationResult(
        seed=seed, base_index=image_index, base_label=label,
        shallow_profile=shallow_profile, deep_profile=deep_profile,
        deep_spearman_rho=conv_spearman(deep_profile),
        shallow_spearman_rho=conv_spearman(shallow_profile),
        first_conv_shallow=shallow_profile.values[0],
        first_conv_deep=deep_profile.values[0])


@dataclass(frozen=True)
class DecompositionConfig:
    """Monte-Carlo setup for the single-layer gradient decomposition check.

    The simulated layer maps width_in inputs to width_out units, with a
    width_out x width_out matrix carrying the upstream signal back in.
    upstream_std perturbs the incoming gradient signal; input_std perturbs the
    layer's input activations and pre-activations. The mean input activation
    is scaled so its perturbed squared norm is 1 in expectation, which
    requires width_in * input_std^2 < 1.
    """

    width_in: int = 32
    width_out: int = 32
    n_samples: int = 10_000
    upstream_std: float = 0.1
    input_std: float = 0.05
    activation: str = "linear"
    weights: str = "orthogonal"
    seed: int = 0
    chunk: int = 512

    def __post_init__(self):
        if self.width_in < 1 or self.width_out < 1:
            raise ValidationError("widths must be >= 1")
        if self.n_samples < 2:
            raise ValidationError("n_samples must be >= 2")
        if self.upstream_std < 0:
            raise ValidationError("upstream_std must be >= 0")
        if self.input_std < 0:
            raise ValidationError("input_std must be >= 0")
        if self.activation not in ("linear", "relu"):
            raise ValidationError("activation must be linear or relu")
        if self.weights not in ("orthogonal", "gaussian"):
            raise ValidationError("weights must be orthogonal or gaussian")
        if self.width_in * self.input_std ** 2 >= 1.0:
            raise ValidationError("width_in * input_std^2 must stay below 1")
        if self.chunk < 1:
            raise ValidationError("chunk must be >= 1")


@dataclass(frozen=True)
class DecompositionResult:
    """Sample statistics from the decomposition check.

    The per-sample identity eps_prev = T1 + T2 is exact up to rounding;
    max_identity_rel_error reports the worst case seen. cross_mean estimates
    the T1/T2 inner product, which should sit within a few standard errors of
    zero. With orthogonal weights and a linear activation the carried term
    retains the upstream norm, so mean_sq_prev - mean_sq_cur matches
    mean_sq_t2 (decomposition_gap_rel) and the deviation norm cannot shrink
    moving toward the input (monotone).
    """

    config: DecompositionConfig
    mean_sq_prev: float
    mean_sq_cur: float
    mean_sq_t1: float
    mean_sq_t2: float
    cross_mean: float
    cross_stderr: float
    max_identity_rel_error: float
    retention_rel_error: float
    decomposition_gap_rel: float
    monotone: bool


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def run_decomposition_check(config: DecompositionConfig) -> DecompositionResult:
    """Sample the one-layer backprop model and test the decomposition claims."""
    n0, n1 = config.width_in, config.width_out
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 6])))
    if config.weights == "orthogonal":
        a = _orthogonal(rng, n1)
    else:
        a = rng.normal(0.0, 1.0 / np.sqrt(n1), size=(n1, n1))
    delta_bar = rng.normal(size=n1)
    delta_bar /= np.linalg.norm(delta_bar)
    h_bar = rng.normal(size=n1)
    z_bar = rng.normal(size=n0)
    z_bar *= np.sqrt(1.0 - n0 * config.input_std ** 2) / np.linalg.norm(z_bar)

    def sprime(h: np.ndarray) -> np.ndarray:
        return np.ones_like(h) if config.activation == "linear" else (h > 0).astype(h.dtype)

    up_mean = a.T @ delta_bar
    g_bar = (up_mean * sprime(h_bar))[:, None] * z_bar[None, :]

    sq_prev, sq_t1, sq_t2, cross = [], [], [], []
    max_rel = 0.0
    sq_cur_total = 0.0
    for start in range(0, config.n_samples, config.chunk):
        count = min(config.chunk, config.n_samples - start)
        e = np.empty((count, n1))
        xi = np.empty((count, n1))
        eta = np.empty((count, n0))
        for j in range(count):
            g = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([config.seed, 7, start + j])))
            e[j] = g.normal(0.0, config.upstream_std, size=n1)
            xi[j] = g.normal(0.0, config.input_std, size=n1)
            eta[j] = g.normal(0.0, config.input_std, size=n0)

        h = h_bar[None, :] + xi
        z = z_bar[None, :] + eta
        sp = sprime(h)
        up_e = e @ a
        t1 = (up_e * sp)[:, :, None] * z[:, None, :]
        t2 = (up_mean[None, :] * sp)[:, :, None] * z[:, None, :] - g_bar[None]
        g_s = ((up_mean[None, :] + up_e) * sp)[:, :, None] * z[:, None, :]
        eps_prev = g_s - g_bar[None]

        resid = np.sqrt(((eps_prev - t1 - t2) ** 2).sum(axis=(1, 2)))
        scale = np.maximum(np.sqrt((eps_prev ** 2).sum(axis=(1, 2))), 1e-300)
        max_rel = max(max_rel, float((resid / scale).max()))
        sq_prev.append((eps_prev ** 2).sum(axis=(1, 2)))
        sq_t1.append((t1 ** 2).sum(axis=(1, 2)))
        sq_t2.append((t2 ** 2).sum(axis=(1, 2)))
        cross.append((t1 * t2).sum(axis=(1, 2)))
        sq_cur_total += float((e ** 2).sum())

    sq_prev = np.concatenate(sq_prev)
    sq_t1 = np.concatenate(sq_t1)
    sq_t2 = np.concatenate(sq_t2)
    cross = np.concatenate(cross)

    mean_prev = float(sq_prev.mean())
    mean_cur = sq_cur_total / config.n_samples
    mean_t1 = float(sq_t1.mean())
    mean_t2 = float(sq_t2.mean())
    cross_mean = float(cross.mean())
    cross_stderr = float(cross.std(ddof=1) / np.sqrt(cross.size))
    gap = abs((mean_prev - mean_cur) - mean_t2) / mean_t2 if mean_t2 > 0 else 0.0
    if mean_cur > 0:
        retention = abs(mean_t1 - mean_cur) / mean_cur
    else:
        # no upstream noise: nothing to retain, T1 must vanish with it
        retention = 0.0 if mean_t1 == 0.0 else float("inf")
    return DecompositionResult(
        config=config, mean_sq_prev=mean_prev, mean_sq_cur=mean_cur,
        mean_sq_t1=mean_t1, mean_sq_t2=mean_t2,
        cross_mean=cross_mean, cross_stderr=cross_stderr,
        max_identity_rel_error=max_rel,
        retention_rel_error=retention,
        decomposition_gap_rel=gap,
        monotone=mean_prev >= mean_cur)
