"""Experiment configuration: strict JSON parsing with defaults materialized.

Every validation failure raises ConfigError carrying the dotted path of the
offending field. Unknown fields are rejected rather than ignored, so typos
fail loudly. Parsed configs round-trip: parse(to_raw(cfg)) == cfg.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .data import AugmentationSpec
from .divergence import DecompositionConfig
from .engine import LayerSpec
from .errors import ConfigError, ValidationError

KINDS = ("federation", "accumulation", "theorem_check")

OUTPUT_ROOT_ENV = "FEDSIMLAB_OUTPUT_ROOT"


def _as_dict(obj, path: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {type(obj).__name__}")
    return obj


class _Section:
    """One JSON object being consumed field by field; flags leftovers."""

    def __init__(self, obj, path: str):
        self.obj = dict(_as_dict(obj, path))
        self.path = path

    def _err(self, key: str, msg: str):
        raise ConfigError(f"{self.path}.{key}: {msg}" if self.path else f"{key}: {msg}")

    def take(self, key: str, kind: str, default=None, required: bool = False):
        if key not in self.obj:
            if required:
                self._err(key, "required field is missing")
            return default
        val = self.obj.pop(key)
        if kind == "int":
            if isinstance(val, bool) or not isinstance(val, int):
                self._err(key, f"expected an integer, got {val!r}")
        elif kind == "float":
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                self._err(key, f"expected a number, got {val!r}")
            val = float(val)
        elif kind == "str":
            if not isinstance(val, str):
                self._err(key, f"expected a string, got {val!r}")
        elif kind == "bool":
            if not isinstance(val, bool):
                self._err(key, f"expected true or false, got {val!r}")
        elif kind == "list":
            if not isinstance(val, list):
                self._err(key, f"expected a list, got {val!r}")
        elif kind == "dict":
            if not isinstance(val, dict):
                self._err(key, f"expected an object, got {val!r}")
        elif kind == "any":
            pass
        else:
            raise AssertionError(kind)
        return val

    def finish(self):
        if self.obj:
            extras = ", ".join(sorted(self.obj))
            where = self.path or "top level"
            raise ConfigError(f"{where}: unknown field(s): {extras}")


def _int_list(sec: _Section, key: str, default, length: int | None = None,
              minimum: int | None = None, required: bool = False):
    val = sec.take(key, "list", default=None, required=required)
    if val is None:
        return default
    for i, v in enumerate(val):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{sec.path}.{key}[{i}]: expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            raise ConfigError(f"{sec.path}.{key}[{i}]: must be >= {minimum}")
    if length is not None and len(val) != length:
        raise ConfigError(f"{sec.path}.{key}: expected exactly {length} entries")
    return tuple(val)


def _float_pair(sec: _Section, key: str, default):
    val = sec.take(key, "list", default=None)
    if val is None:
        return default
    if len(val) != 2 or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in val):
        raise ConfigError(f"{sec.path}.{key}: expected [low, high] numbers")
    return (float(val[0]), float(val[1]))


@dataclass(frozen=True)
class DataConfig:
    """Where training/test data comes from: generated, or IDX files on disk."""

    source: str = "synthetic"
    num_classes: int = 8
    image_shape: tuple[int, int, int] = (1, 16, 16)
    train_per_class: int = 150
    test_per_class: int = 40
    noise_std: float = 0.15
    data_seed: int = 100
    dir: str | None = None
    limit_train: int | None = None
    limit_test: int | None = None


@dataclass(frozen=True)
class ModelConfig:
    """Either the staged CNN builder's knobs, or an explicit layer stack."""

    builder: str = "cnn"
    depth_blocks: int = 4
    base_width: int = 32
    width_multiplier: float = 1.0
    schedule: str = "normal"
    stem: str = "conv3"
    stem_pool: bool = False
    residual: bool = False
    layers: tuple[LayerSpec, ...] | None = None


@dataclass(frozen=True)
class FederationSection:
    num_clients: int = 5
    local_epochs: int = 4
    rounds: int = 30
    lr: float = 0.02
    batch_size: int = 32
    eval_every: int = 1


@dataclass(frozen=True)
class SweepSection:
    """One axis swept over values, each value run under each seed."""

    parameter: str
    values: tuple
    seeds: tuple[int, ...]


@dataclass(frozen=True)
class FederationExperiment:
    kind: str
    experiment_id: str
    seed: int
    data: DataConfig
    model: ModelConfig
    federation: FederationSection
    augment: AugmentationSpec | None
    centralized_baseline: bool
    threshold: float
    sweep: SweepSection | None


@dataclass(frozen=True)
class AccumulationExperiment:
    kind: str
    experiment_id: str
    data: DataConfig
    seeds: tuple[int, ...]
    n_samples: int
    noise_std: float
    pretrain_epochs: int
    lr: float
    batch_size: int
    probe_width: int


@dataclass(frozen=True)
class DecompositionExperiment:
    kind: str
    experiment_id: str
    check: DecompositionConfig


Experiment = FederationExperiment | AccumulationExperiment | DecompositionExperiment


def parse_layer(obj, path: str) -> LayerSpec:
    sec = _Section(obj, path)
    kind = sec.take("kind", "str", required=True)
    fields = {}
    if kind in ("conv", "residual"):
        fields["out_channels"] = sec.take("out_channels", "int", required=True)
    if kind == "conv":
        fields["kernel"] = sec.take("kernel", "int", required=True)
        fields["padding"] = sec.take("padding", "int", default=0)
    if kind == "maxpool":
        fields["kernel"] = sec.take("kernel", "int", required=True)
    if kind in ("conv", "maxpool", "residual"):
        fields["stride"] = sec.take("stride", "int", default=1)
    if kind == "dense":
        fields["units"] = sec.take("units", "int", required=True)
    sec.finish()
    try:
        return LayerSpec(kind=kind, **fields)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e


def parse_layer_list(obj, path: str) -> tuple[LayerSpec, ...]:
    if not isinstance(obj, list) or not obj:
        raise ConfigError(f"{path}: expected a non-empty list of layer objects")
    return tuple(parse_layer(entry, f"{path}[{i}]") for i, entry in enumerate(obj))


def _parse_data(obj, path: str) -> DataConfig:
    sec = _Section(obj, path)
    source = sec.take("source", "str", default="synthetic")
    if source not in ("synthetic", "idx"):
        raise ConfigError(f"{path}.source: must be synthetic or idx, got {source!r}")
    if source == "synthetic":
        cfg = DataConfig(
            source=source,
            num_classes=sec.take("num_classes", "int", default=8),
            image_shape=_int_list(sec, "image_shape", (1, 16, 16), length=3, minimum=1),
            train_per_class=sec.take("train_per_class", "int", default=150),
            test_per_class=sec.take("test_per_class", "int", default=40),
            noise_std=sec.take("noise_std", "float", default=0.15),
            data_seed=sec.take("data_seed", "int", default=100))
    else:
        cfg = DataConfig(
            source=source,
            dir=sec.take("dir", "str", required=True),
            num_classes=sec.take("num_classes", "int", default=10),
            limit_train=sec.take("limit_train", "int"),
            limit_test=sec.take("limit_test", "int"))
    sec.finish()
    if cfg.num_classes < 2:
        raise ConfigError(f"{path}.num_classes: must be >= 2")
    for key in ("train_per_class", "test_per_class"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{path}.{key}: must be >= 1")
    if cfg.noise_std < 0:
        raise ConfigError(f"{path}.noise_std: must be >= 0")
    for key in ("limit_train", "limit_test"):
        lim = getattr(cfg, key)
        if lim is not None and lim < 1:
            raise ConfigError(f"{path}.{key}: must be >= 1 when given")
    return cfg


def parse_model(obj, path: str) -> ModelConfig:
    sec = _Section(obj, path)
    builder = sec.take("builder", "str", default="cnn")
    if builder == "cnn":
        cfg = ModelConfig(
            builder=builder,
            depth_blocks=sec.take("depth_blocks", "int", default=4),
            base_width=sec.take("base_width", "int", default=32),
            width_multiplier=sec.take("width_multiplier", "float", default=1.0),
            schedule=sec.take("schedule", "str", default="normal"),
            stem=sec.take("stem", "str", default="conv3"),
            stem_pool=sec.take("stem_pool", "bool", default=False),
            residual=sec.take("residual", "bool", default=False))
        sec.finish()
        if cfg.depth_blocks < 1:
            raise ConfigError(f"{path}.depth_blocks: must be >= 1")
        if cfg.base_width < 1:
            raise ConfigError(f"{path}.base_width: must be >= 1")
        if not cfg.width_multiplier > 0:
            raise ConfigError(f"{path}.width_multiplier: must be > 0")
        if cfg.schedule not in ("normal", "mean", "reversed"):
            raise ConfigError(f"{path}.schedule: must be normal, mean, or reversed")
        if cfg.stem not in ("conv3", "conv7"):
            raise ConfigError(f"{path}.stem: must be conv3 or conv7")
        return cfg
    if builder == "layers":
        layers = parse_layer_list(sec.take("layers", "list", required=True), f"{path}.layers")
        sec.finish()
        return ModelConfig(builder=builder, layers=layers)
    raise ConfigError(f"{path}.builder: must be cnn or layers, got {builder!r}")


def _parse_federation(obj, path: str) -> FederationSection:
    sec = _Section(obj if obj is not None else {}, path)
    cfg = FederationSection(
        num_clients=sec.take("num_clients", "int", default=5),
        local_epochs=sec.take("local_epochs", "int", default=4),
        rounds=sec.take("rounds", "int", default=30),
        lr=sec.take("lr", "float", default=0.02),
        batch_size=sec.take("batch_size", "int", default=32),
        eval_every=sec.take("eval_every", "int", default=1))
    sec.finish()
    for key, lo in (("num_clients", 1), ("local_epochs", 1), ("rounds", 1),
                    ("batch_size", 1), ("eval_every", 0)):
        if getattr(cfg, key) < lo:
            raise ConfigError(f"{path}.{key}: must be >= {lo}")
    if not cfg.lr > 0:
        raise ConfigError(f"{path}.lr: must be > 0")
    return cfg


def _parse_augment(obj, path: str) -> AugmentationSpec | None:
    if obj is None:
        return None
    sec = _Section(obj, path)
    kwargs = dict(
        use_rrc=sec.take("use_rrc", "bool", default=False),
        rrc_scale=_float_pair(sec, "rrc_scale", (0.4, 1.0)),
        rrc_ratio=_float_pair(sec, "rrc_ratio", (3.0 / 4.0, 4.0 / 3.0)),
        brightness=sec.take("brightness", "float", default=0.0),
        contrast=sec.take("contrast", "float", default=0.0),
        saturation=sec.take("saturation", "float", default=0.0),
        noise_std=sec.take("noise_std", "float", default=0.0))
    sec.finish()
    try:
        return AugmentationSpec(**kwargs)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e


SWEEPABLE = (
    "seed",
    "model.depth_blocks", "model.base_width", "model.width_multiplier",
    "model.schedule", "model.stem", "model.stem_pool", "model.residual",
    "federation.num_clients", "federation.local_epochs", "federation.rounds",
    "federation.lr", "federation.batch_size",
    "data.noise_std", "data.train_per_class",
    "augment.use_rrc", "augment.brightness", "augment.contrast",
    "augment.saturation", "augment.noise_std",
)


def _parse_sweep(obj, path: str, default_seed: int) -> SweepSection | None:
    if obj is None:
        return None
    sec = _Section(obj, path)
    parameter = sec.take("parameter", "str", required=True)
    values = sec.take("values", "list", required=True)
    seeds = _int_list(sec, "seeds", (default_seed,), minimum=0)
    sec.finish()
    if parameter not in SWEEPABLE:
        raise ConfigError(f"{path}.parameter: {parameter!r} is not sweepable; "
                          f"choose one of {', '.join(SWEEPABLE)}")
    if not values:
        raise ConfigError(f"{path}.values: must be non-empty")
    if len(set(map(str, values))) != len(values):
        raise ConfigError(f"{path}.values: entries must be distinct")
    if parameter == "seed" and len(seeds) > 1:
        raise ConfigError(f"{path}.seeds: not allowed when sweeping seed itself")
    return SweepSection(parameter=parameter, values=tuple(values), seeds=seeds)


def parse_experiment(obj, default_id: str) -> Experiment:
    """Validate a raw JSON object into one of the experiment config types."""
    top = _Section(obj, "")
    kind = top.take("kind", "str", required=True)
    if kind not in KINDS:
        raise ConfigError(f"kind: must be one of {', '.join(KINDS)}, got {kind!r}")
    experiment_id = top.take("experiment_id", "str", default=default_id)
    if not experiment_id or "/" in experiment_id or experiment_id.startswith("."):
        raise ConfigError("experiment_id: must be a plain directory name")

    if kind == "federation":
        seed = top.take("seed", "int", default=0)
        data = _parse_data(top.take("data", "dict", default={}), "data")
        model = parse_model(top.take("model", "dict", default={}), "model")
        federation = _parse_federation(top.take("federation", "dict", default={}), "federation")
        augment = _parse_augment(top.take("augment", "any"), "augment")
        centralized = top.take("centralized_baseline", "bool", default=False)
        threshold = top.take("threshold", "float", default=0.4)
        sweep = _parse_sweep(top.take("sweep", "any"), "sweep", seed)
        top.finish()
        if seed < 0:
            raise ConfigError("seed: must be >= 0")
        if not 0 < threshold < 1:
            raise ConfigError("threshold: must be strictly between 0 and 1")
        if sweep is not None and sweep.parameter.startswith("augment.") and augment is None:
            raise ConfigError("sweep.parameter: add an augment section to sweep augment fields")
        return FederationExperiment(
            kind=kind, experiment_id=experiment_id, seed=seed, data=data, model=model,
            federation=federation, augment=augment, centralized_baseline=centralized,
            threshold=threshold, sweep=sweep)

    if kind == "accumulation":
        data = _parse_data(top.take("data", "dict", default={}), "data")
        exp = AccumulationExperiment(
            kind=kind, experiment_id=experiment_id, data=data,
            seeds=_int_list(top, "seeds", (0, 1, 2), minimum=0),
            n_samples=top.take("n_samples", "int", default=200),
            noise_std=top.take("noise_std", "float", default=0.1),
            pretrain_epochs=top.take("pretrain_epochs", "int", default=2),
            lr=top.take("lr", "float", default=0.02),
            batch_size=top.take("batch_size", "int", default=32),
            probe_width=top.take("probe_width", "int", default=16))
        top.finish()
        if not exp.seeds:
            raise ConfigError("seeds: must be non-empty")
        if exp.n_samples < 2:
            raise ConfigError("n_samples: must be >= 2")
        if exp.noise_std < 0:
            raise ConfigError("noise_std: must be >= 0")
        if exp.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs: must be >= 0")
        if not exp.lr > 0:
            raise ConfigError("lr: must be > 0")
        if exp.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if exp.probe_width < 1:
            raise ConfigError("probe_width: must be >= 1")
        return exp

    kwargs = dict(
        width_in=top.take("width_in", "int", default=32),
        width_out=top.take("width_out", "int", default=32),
        n_samples=top.take("n_samples", "int", default=10_000),
        upstream_std=top.take("upstream_std", "float", default=0.1),
        input_std=top.take("input_std", "float", default=0.05),
        activation=top.take("activation", "str", default="linear"),
        weights=top.take("weights", "str", default="orthogonal"),
        seed=top.take("seed", "int", default=0),
        chunk=top.take("chunk", "int", default=512))
    top.finish()
    try:
        check = DecompositionConfig(**kwargs)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    return DecompositionExperiment(kind=kind, experiment_id=experiment_id, check=check)


def load_experiment(path: str) -> Experiment:
    """Read and validate one JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})")
    default_id = os.path.splitext(os.path.basename(path))[0]
    return parse_experiment(obj, default_id)


def _layer_to_raw(layer: LayerSpec) -> dict:
    out: dict = {"kind": layer.kind}
    if layer.kind in ("conv", "residual"):
        out["out_channels"] = layer.out_channels
    if layer.kind in ("conv", "maxpool"):
        out["kernel"] = layer.kernel
    if layer.kind == "conv":
        out["padding"] = layer.padding
    if layer.kind in ("conv", "maxpool", "residual"):
        out["stride"] = layer.stride
    if layer.kind == "dense":
        out["units"] = layer.units
    return out


def to_raw(exp: Experiment) -> dict:
    """Emit the config back as plain JSON data, every default written out."""
    if isinstance(exp, FederationExperiment):
        if exp.data.source == "synthetic":
            data = {"source": "synthetic", "num_classes": exp.data.num_classes,
                    "image_shape": list(exp.data.image_shape),
                    "train_per_class": exp.data.train_per_class,
                    "test_per_class": exp.data.test_per_class,
                    "noise_std": exp.data.noise_std, "data_seed": exp.data.data_seed}
        else:
            data = {"source": "idx", "dir": exp.data.dir, "num_classes": exp.data.num_classes}
            if exp.data.limit_train is not None:
                data["limit_train"] = exp.data.limit_train
            if exp.data.limit_test is not None:
                data["limit_test"] = exp.data.limit_test
        if exp.model.builder == "cnn":
            model = {"builder": "cnn", "depth_blocks": exp.model.depth_blocks,
                     "base_width": exp.model.base_width,
                     "width_multiplier": exp.model.width_multiplier,
                     "schedule": exp.model.schedule, "stem": exp.model.stem,
                     "stem_pool": exp.model.stem_pool, "residual": exp.model.residual}
        else:
            model = {"builder": "layers",
                     "layers": [_layer_to_raw(l) for l in exp.model.layers]}
        out = {"kind": exp.kind, "experiment_id": exp.experiment_id, "seed": exp.seed,
               "data": data, "model": model,
               "federation": {"num_clients": exp.federation.num_clients,
                              "local_epochs": exp.federation.local_epochs,
                              "rounds": exp.federation.rounds, "lr": exp.federation.lr,
                              "batch_size": exp.federation.batch_size,
                              "eval_every": exp.federation.eval_every},
               "centralized_baseline": exp.centralized_baseline,
               "threshold": exp.threshold}
        if exp.augment is not None:
            out["augment"] = {"use_rrc": exp.augment.use_rrc,
                              "rrc_scale": list(exp.augment.rrc_scale),
                              "rrc_ratio": list(exp.augment.rrc_ratio),
                              "brightness": exp.augment.brightness,
                              "contrast": exp.augment.contrast,
                              "saturation": exp.augment.saturation,
                              "noise_std": exp.augment.noise_std}
        if exp.sweep is not None:
            out["sweep"] = {"parameter": exp.sweep.parameter,
                            "values": list(exp.sweep.values),
                            "seeds": list(exp.sweep.seeds)}
        return out
    if isinstance(exp, AccumulationExperiment):
        data = {"source": exp.data.source}
        if exp.data.source == "synthetic":
            data.update({"num_classes": exp.data.num_classes,
                         "image_shape": list(exp.data.image_shape),
                         "train_per_class": exp.data.train_per_class,
                         "test_per_class": exp.data.test_per_class,
                         "noise_std": exp.data.noise_std, "data_seed": exp.data.data_seed})
        else:
            data.update({"dir": exp.data.dir, "num_classes": exp.data.num_classes})
            if exp.data.limit_train is not None:
                data["limit_train"] = exp.data.limit_train
            if exp.data.limit_test is not None:
                data["limit_test"] = exp.data.limit_test
        return {"kind": exp.kind, "experiment_id": exp.experiment_id, "data": data,
                "seeds": list(exp.seeds), "n_samples": exp.n_samples,
                "noise_std": exp.noise_std, "pretrain_epochs": exp.pretrain_epochs,
                "lr": exp.lr, "batch_size": exp.batch_size,
                "probe_width": exp.probe_width}
    c = exp.check
    return {"kind": exp.kind, "experiment_id": exp.experiment_id,
            "width_in": c.width_in, "width_out": c.width_out, "n_samples": c.n_samples,
            "upstream_std": c.upstream_std, "input_std": c.input_std,
            "activation": c.activation, "weights": c.weights, "seed": c.seed,
            "chunk": c.chunk}


def set_by_path(raw: dict, dotted: str, value) -> dict:
    """Copy raw with the dotted-path field replaced; creates missing objects."""
    keys = dotted.split(".")
    out = dict(raw)
    node = out
    for key in keys[:-1]:
        child = dict(node.get(key) or {})
        node[key] = child
        node = child
    node[keys[-1]] = value
    return out
