"""Federated averaging over simulated clients, with per-layer divergence
instrumentation, plus the matching centralized baseline.

Determinism contract: every stochastic draw comes from a PCG64 generator
seeded by a structured SeedSequence, so runs are reproducible bit for bit
across platforms. Client (round, id) pairs get independent streams; the
centralized baseline shares the stream derivation of client 0, which makes a
one-client one-epoch federation equal centralized training exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import AugmentationSpec, Dataset, augment_batch
from .engine import (ModelSpec, Params, PARAM_ORDER, clone_params, flatten_layer_params,
                     init_params, loss_and_grad, named_layers, predict, sgd_step)
from .errors import ValidationError


@dataclass(frozen=True)
class FederationConfig:
    """Knobs for one federated run. Defaults follow the standard small setup."""

    num_clients: int = 5
    local_epochs: int = 4
    rounds: int = 30
    lr: float = 0.02
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 1
    augment: AugmentationSpec | None = None

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValidationError("num_clients must be >= 1")
        if self.local_epochs < 1:
            raise ValidationError("local_epochs must be >= 1")
        if self.rounds < 1:
            raise ValidationError("rounds must be >= 1")
        if not self.lr > 0:
            raise ValidationError("lr must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.eval_every < 0:
            raise ValidationError("eval_every must be >= 0 (0 disables evaluation)")


@dataclass(frozen=True)
class ClientState:
    client_id: int
    dataset: Dataset


@dataclass(frozen=True)
class RoundRecord:
    """Metrics for one round, measured before aggregation where noted.

    per_layer_divergence: client parameter divergence per parameterized layer,
    computed on the post-local-training, pre-aggregation parameters.
    global_test_accuracy is NaN on rounds where evaluation was skipped.
    """

    round: int
    per_layer_divergence: dict[str, float]
    mean_divergence: float
    global_test_accuracy: float
    global_train_loss: float


@dataclass(frozen=True)
class FederationResult:
    records: list[RoundRecord]
    final_params: Params
    param_history: list[Params] | None = None


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float


@dataclass(frozen=True)
class CentralizedResult:
    records: list[EpochRecord]
    final_params: Params


def client_stream(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    """The random stream a given client uses in a given round."""
    ss = np.random.SeedSequence([seed, 1, round_index, client_id])
    return np.random.Generator(np.random.PCG64(ss))


def _local_train(spec: ModelSpec, params: Params, dataset: Dataset,
                 rng: np.random.Generator, epochs: int, lr: float, batch_size: int,
                 augment: AugmentationSpec | None) -> tuple[Params, list[float]]:
    """Mini-batch SGD from the given parameters; returns new params and the
    per-step losses. Augmentation draws interleave with the shuffle stream."""
    cur = params
    losses: list[float] = []
    n = len(dataset)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            x = dataset.images[idx]
            if augment is not None and augment.any_enabled:
                x = augment_batch(x, rng, augment)
            loss, grads = loss_and_grad(spec, cur, x, dataset.labels[idx])
            cur = sgd_step(cur, grads, lr)
            losses.append(loss)
    return cur, losses


def local_train(spec: ModelSpec, params: Params, dataset: Dataset,
                config: FederationConfig, round_index: int, client_id: int) -> Params:
    """One client's local update for one round, from the broadcast parameters."""
    rng = client_stream(config.seed, round_index, client_id)
    new_params, _ = _local_train(spec, params, dataset, rng, config.local_epochs,
                                 config.lr, config.batch_size, config.augment)
    return new_params


def aggregate(client_params: list[Params], client_ids: list[int] | None = None) -> Params:
    """Equal-weight parameter average.

    Arrays are summed in ascending client-id order, so the result is bit-exact
    no matter how the caller ordered the list.
    """
    if not client_params:
        raise ValidationError("aggregate needs at least one client")
    if client_ids is None:
        client_ids = list(range(len(client_params)))
    if len(client_ids) != len(client_params):
        raise ValidationError("client_ids length does not match client_params")
    if len(set(client_ids)) != len(client_ids):
        raise ValidationError("client_ids must be unique")
    ordered = [p for _, p in sorted(zip(client_ids, client_params), key=lambda t: t[0])]
    n = len(ordered)
    out: Params = {}
    for name, per in ordered[0].items():
        out[name] = {}
        for pname in per:
            acc = ordered[0][name][pname].copy()
            for other in ordered[1:]:
                acc += other[name][pname]
            out[name][pname] = acc / n
    return out


def divergence_of_vectors(mat: np.ndarray) -> float:
    """Dimension-normalized spread of row vectors around their mean.

    For rows w_1..w_N of length d: mean over i of sqrt(||w_i - mean_j w_j||^2
    / d). Sorts along the row axis before both reductions, so any permutation
    of the rows yields a bit-identical value.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1 or mat.shape[1] < 1:
        raise ValidationError(f"expected a (clients, dims) matrix, got shape {mat.shape}")
    d = mat.shape[1]
    # shifting by the column minimum changes nothing mathematically but keeps
    # identical rows at exactly zero spread (mean(x,x,x) rounds, 0 does not)
    shifted = mat - np.min(mat, axis=0)
    center = np.mean(np.sort(shifted, axis=0), axis=0)
    per_client = np.sqrt(((shifted - center) ** 2).sum(axis=1) / d)
    return float(np.mean(np.sort(per_client)))


def layer_divergence(spec: ModelSpec, client_params: list[Params]) -> dict[str, float]:
    """divergence_of_vectors per parameterized layer, clients as rows."""
    if not client_params:
        raise ValidationError("layer_divergence needs at least one client")
    out: dict[str, float] = {}
    for name, layer in named_layers(spec):
        if layer.kind not in PARAM_ORDER:
            continue
        mat = np.stack([flatten_layer_params(p[name], layer.kind) for p in client_params])
        out[name] = divergence_of_vectors(mat)
    return out


def mean_divergence(per_layer: dict[str, float]) -> float:
    """Unweighted mean over parameterized layers, in stack order."""
    if not per_layer:
        raise ValidationError("no parameterized layers to average")
    return float(np.mean(list(per_layer.values())))


def evaluate(spec: ModelSpec, params: Params, dataset: Dataset) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    preds = predict(spec, params, dataset.images)
    return float(np.mean(preds == dataset.labels))


def run_federation(spec: ModelSpec, config: FederationConfig,
                   client_datasets: list[Dataset], test_dataset: Dataset | None = None,
                   client_order: list[int] | None = None,
                   keep_param_history: bool = False) -> FederationResult:
    """Full-participation federated averaging for config.rounds rounds.

    client_order only changes the scheduling of local updates inside a round;
    results are bit-identical for every permutation. Evaluation runs on rounds
    where (round + 1) divides eval_every evenly and on the final round, or
    never when eval_every is 0.
    """
    if len(client_datasets) != config.num_clients:
        raise ValidationError(
            f"got {len(client_datasets)} client datasets for {config.num_clients} clients")
    clients = [ClientState(client_id=i, dataset=ds) for i, ds in enumerate(client_datasets)]
    if client_order is None:
        client_order = list(range(config.num_clients))
    if sorted(client_order) != list(range(config.num_clients)):
        raise ValidationError("client_order must be a permutation of range(num_clients)")

    params = init_params(spec, config.seed)
    history: list[Params] | None = [clone_params(params)] if keep_param_history else None
    records: list[RoundRecord] = []

    for t in range(config.rounds):
        updated: dict[int, Params] = {}
        client_mean_loss: dict[int, float] = {}
        for cid in client_order:
            rng = client_stream(config.seed, t, cid)
            new_params, losses = _local_train(
                spec, params, clients[cid].dataset, rng, config.local_epochs,
                config.lr, config.batch_size, config.augment)
            updated[cid] = new_params
            client_mean_loss[cid] = float(np.mean(losses))

        in_id_order = [updated[cid] for cid in range(config.num_clients)]
        per_layer = layer_divergence(spec, in_id_order)
        train_loss = float(np.mean(np.sort(
            [client_mean_loss[cid] for cid in range(config.num_clients)])))
        params = aggregate(in_id_order)

        if test_dataset is not None and config.eval_every > 0 and (
                (t + 1) % config.eval_every == 0 or t == config.rounds - 1):
            acc = evaluate(spec, params, test_dataset)
        else:
            acc = math.nan
        records.append(RoundRecord(
            round=t, per_layer_divergence=per_layer,
            mean_divergence=mean_divergence(per_layer),
            global_test_accuracy=acc, global_train_loss=train_loss))
        if keep_param_history:
            history.append(clone_params(params))

    return FederationResult(records=records, final_params=params, param_history=history)


def run_centralized(spec: ModelSpec, dataset: Dataset, epochs: int, lr: float = 0.02,
                    batch_size: int = 32, seed: int = 0,
                    test_dataset: Dataset | None = None, eval_every: int = 1,
                    augment: AugmentationSpec | None = None) -> CentralizedResult:
    """Plain mini-batch SGD on the pooled data.

    Epoch e draws from the stream of (round e, client 0), so a federation with
    one client and one local epoch reproduces this run exactly.
    """
    if epochs < 1:
        raise ValidationError("epochs must be >= 1")
    params = init_params(spec, seed)
    records: list[EpochRecord] = []
    for e in range(epochs):
        rng = client_stream(seed, e, 0)
        params, losses = _local_train(spec, params, dataset, rng, 1, lr, batch_size, augment)
        if test_dataset is not None and eval_every > 0 and (
                (e + 1) % eval_every == 0 or e == epochs - 1):
            acc = evaluate(spec, params, test_dataset)
        else:
            acc = math.nan
        records.append(EpochRecord(epoch=e, train_loss=float(np.mean(losses)), test_accuracy=acc))
    return CentralizedResult(records=records, final_params=params)
