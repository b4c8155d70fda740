"""Experiment orchestration: materialize a parsed config, run it, and write
the report directory.

A run directory holds config.json (defaults materialized), the metric CSVs,
summary.json, rendered figures, and a DONE marker written last. Reports
carry no timestamps and floats are written with 17 significant digits, so
rerunning a config reproduces every CSV byte for byte.
"""

from __future__ import annotations

import csv
import json
import math
import os

import numpy as np
from scipy import stats

from .arch import build_cnn
from .config import (AccumulationExperiment, DecompositionExperiment, Experiment,
                     FederationExperiment, OUTPUT_ROOT_ENV, parse_experiment, set_by_path,
                     to_raw)
from .data import Dataset, SyntheticSpec, generate_synthetic, load_idx_dir, partition_iid
from .divergence import run_accumulation_experiment, run_decomposition_check
from .engine import ModelSpec, PARAM_ORDER, named_layers, param_shapes
from .errors import ConfigError, ValidationError
from .federation import FederationConfig, run_centralized, run_federation
from . import figures


def resolve_output_root(explicit: str | None = None) -> str:
    """CLI flag wins, then the environment variable, then ./runs."""
    if explicit:
        return explicit
    return os.environ.get(OUTPUT_ROOT_ENV) or "runs"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _none_if_nan(v: float | None):
    if v is None or not math.isfinite(v):
        return None
    return v


def build_dataset(data_cfg) -> tuple[Dataset, Dataset]:
    if data_cfg.source == "synthetic":
        spec = SyntheticSpec(num_classes=data_cfg.num_classes,
                             image_shape=data_cfg.image_shape,
                             train_per_class=data_cfg.train_per_class,
                             test_per_class=data_cfg.test_per_class,
                             noise_std=data_cfg.noise_std)
        return generate_synthetic(spec, seed=data_cfg.data_seed)
    train, test = load_idx_dir(data_cfg.dir)
    if data_cfg.num_classes != train.num_classes:
        train = Dataset(train.images, train.labels, data_cfg.num_classes)
        test = Dataset(test.images, test.labels, data_cfg.num_classes)
    if data_cfg.limit_train is not None:
        train = train.subset(np.arange(min(data_cfg.limit_train, len(train))))
    if data_cfg.limit_test is not None:
        test = test.subset(np.arange(min(data_cfg.limit_test, len(test))))
    return train, test


def build_model(model_cfg, input_shape: tuple[int, int, int], num_classes: int) -> ModelSpec:
    try:
        if model_cfg.builder == "cnn":
            return build_cnn(input_shape, num_classes,
                             depth_blocks=model_cfg.depth_blocks,
                             base_width=model_cfg.base_width,
                             width_multiplier=model_cfg.width_multiplier,
                             schedule=model_cfg.schedule, stem=model_cfg.stem,
                             stem_pool=model_cfg.stem_pool, residual=model_cfg.residual)
        return ModelSpec(input_shape=input_shape, num_classes=num_classes,
                         layers=model_cfg.layers)
    except ValidationError as e:
        raise ConfigError(f"model: {e} (for input shape {input_shape})") from e


def _start_dir(outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    marker = os.path.join(outdir, "DONE")
    if os.path.exists(marker):
        os.remove(marker)


def _finish_dir(outdir: str) -> None:
    with open(os.path.join(outdir, "DONE"), "w", encoding="utf-8") as fh:
        fh.write("done\n")


def _rounds_to_threshold(records, threshold: float) -> int:
    for r in records:
        if math.isfinite(r.global_test_accuracy) and r.global_test_accuracy >= threshold:
            return r.round + 1
    return -1


def run_federation_experiment(exp: FederationExperiment, outdir: str) -> str:
    """One federated run (plus optional centralized baseline) into outdir."""
    _start_dir(outdir)
    _write_json(os.path.join(outdir, "config.json"), to_raw(exp))

    train, test = build_dataset(exp.data)
    model = build_model(exp.model, train.images.shape[1:], train.num_classes)
    shards = partition_iid(train, exp.federation.num_clients, seed=exp.seed)
    fed_cfg = FederationConfig(
        num_clients=exp.federation.num_clients, local_epochs=exp.federation.local_epochs,
        rounds=exp.federation.rounds, lr=exp.federation.lr,
        batch_size=exp.federation.batch_size, seed=exp.seed,
        eval_every=exp.federation.eval_every, augment=exp.augment)
    result = run_federation(model, fed_cfg, shards, test_dataset=test)

    layer_names = [n for n, l in named_layers(model) if l.kind in PARAM_ORDER]
    rows = []
    for r in result.records:
        acc = _none_if_nan(r.global_test_accuracy)
        for i, name in enumerate(layer_names):
            rows.append([exp.experiment_id, r.round, i, name, r.per_layer_divergence[name],
                        r.mean_divergence, acc, r.global_train_loss])
        rows.append([exp.experiment_id, r.round, -1, "all", r.mean_divergence,
                    r.mean_divergence, acc, r.global_train_loss])
    write_csv(os.path.join(outdir, "metrics.csv"),
              ["experiment_id", "round", "layer_index", "layer_name", "divergence",
               "mean_divergence", "test_accuracy", "train_loss"], rows)

    centralized = None
    if exp.centralized_baseline:
        epochs = exp.federation.rounds * exp.federation.local_epochs
        centralized = run_centralized(
            model, train, epochs=epochs, lr=exp.federation.lr,
            batch_size=exp.federation.batch_size, seed=exp.seed, test_dataset=test,
            eval_every=max(1, exp.federation.eval_every), augment=exp.augment)
        write_csv(os.path.join(outdir, "centralized.csv"),
                  ["experiment_id", "epoch", "train_loss", "test_accuracy"],
                  [[exp.experiment_id, r.epoch, r.train_loss, _none_if_nan(r.test_accuracy)]
                   for r in centralized.records])

    shapes = param_shapes(model)
    fl_final = _none_if_nan(result.records[-1].global_test_accuracy)
    fl_accs = [r.global_test_accuracy for r in result.records
               if not math.isnan(r.global_test_accuracy)]
    fl_best = max(fl_accs) if fl_accs else None
    summary = {
        "experiment_id": exp.experiment_id,
        "kind": exp.kind,
        "layer_names": layer_names,
        "parameter_count": int(sum(int(np.prod(s)) for per in shapes.values()
                                   for s in per.values())),
        "final_test_accuracy": fl_final,
        "best_test_accuracy": fl_best,
        "mean_divergence": float(np.mean([r.mean_divergence for r in result.records])),
        "final_round_divergence": result.records[-1].mean_divergence,
        "per_layer_mean_divergence": {
            name: float(np.mean([r.per_layer_divergence[name] for r in result.records]))
            for name in layer_names},
        "threshold": exp.threshold,
        "rounds_to_threshold": _rounds_to_threshold(result.records, exp.threshold),
    }
    if centralized is not None:
        cl_final = _none_if_nan(centralized.records[-1].test_accuracy)
        cl_accs = [r.test_accuracy for r in centralized.records
                   if not math.isnan(r.test_accuracy)]
        cl_best = max(cl_accs) if cl_accs else None
        summary["centralized"] = {"epochs": len(centralized.records),
                                  "final_test_accuracy": cl_final,
                                  "best_test_accuracy": cl_best}
        # gap between the best models each regime produced over its budget
        if cl_best and fl_best is not None:
            summary["accuracy_gap_rel"] = (cl_best - fl_best) / cl_best
        else:
            summary["accuracy_gap_rel"] = None
    _write_json(os.path.join(outdir, "summary.json"), summary)

    figures.save_federation_figures(
        outdir, result.records, layer_names,
        centralized_records=centralized.records if centralized else None,
        local_epochs=exp.federation.local_epochs)
    _finish_dir(outdir)
    return outdir


def _value_label(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def run_sweep(exp: FederationExperiment, outdir: str) -> str:
    """Run every (value, seed) child into its own subdirectory, then compare."""
    if exp.sweep is None:
        raise ConfigError("sweep: section is required for the sweep command")
    _start_dir(outdir)
    _write_json(os.path.join(outdir, "config.json"), to_raw(exp))

    base_raw = to_raw(exp)
    base_raw.pop("sweep")
    param = exp.sweep.parameter
    child_dirs = []
    for value in exp.sweep.values:
        raw_v = set_by_path(base_raw, param, value)
        seeds = (value,) if param == "seed" else exp.sweep.seeds
        for seed in seeds:
            raw = raw_v if param == "seed" else set_by_path(raw_v, "seed", seed)
            child_id = (f"{exp.experiment_id}-{param.replace('.', '-')}-"
                        f"{_value_label(value)}-seed{seed}")
            raw = set_by_path(raw, "experiment_id", child_id)
            try:
                child = parse_experiment(raw, child_id)
            except ConfigError as e:
                raise ConfigError(f"sweep value {value!r}: {e}") from e
            if param == "seed":
                child_dir = os.path.join(outdir, f"seed={_value_label(value)}")
            else:
                child_dir = os.path.join(outdir, f"{param}={_value_label(value)}",
                                         f"seed={seed}")
            run_federation_experiment(child, child_dir)
            child_dirs.append(child_dir)

    write_comparison(child_dirs, outdir)
    _finish_dir(outdir)
    return outdir


def run_accumulation(exp: AccumulationExperiment, outdir: str) -> str:
    """Gradient-noise probes on the shallow/deep pair, one run per seed."""
    _start_dir(outdir)
    _write_json(os.path.join(outdir, "config.json"), to_raw(exp))
    train, _ = build_dataset(exp.data)

    results = []
    rows = []
    for seed in exp.seeds:
        res = run_accumulation_experiment(
            train, seed=seed, n_samples=exp.n_samples, noise_std=exp.noise_std,
            pretrain_epochs=exp.pretrain_epochs, lr=exp.lr, batch_size=exp.batch_size,
            probe_width=exp.probe_width)
        results.append(res)
        for model_name, prof in (("shallow", res.shallow_profile), ("deep", res.deep_profile)):
            for i, (lname, val) in enumerate(zip(prof.layer_names, prof.values)):
                rows.append([exp.experiment_id, seed, model_name, i, lname, val])
    write_csv(os.path.join(outdir, "profiles.csv"),
              ["experiment_id", "seed", "model", "layer_index", "layer_name", "divergence"],
              rows)

    deep_negative = sum(1 for r in results if r.deep_spearman_rho < 0)
    ordered = sum(1 for r in results if r.first_conv_shallow < r.first_conv_deep)
    summary = {
        "experiment_id": exp.experiment_id,
        "kind": exp.kind,
        "per_seed": [{
            "seed": r.seed, "base_index": r.base_index, "base_label": r.base_label,
            "deep_spearman_rho": r.deep_spearman_rho,
            "shallow_spearman_rho": r.shallow_spearman_rho,
            "first_conv_shallow": r.first_conv_shallow,
            "first_conv_deep": r.first_conv_deep,
        } for r in results],
        "deep_rho_negative": f"{deep_negative}/{len(results)}",
        "first_conv_shallow_below_deep": f"{ordered}/{len(results)}",
    }
    _write_json(os.path.join(outdir, "summary.json"), summary)
    figures.save_accumulation_figure(outdir, results)
    _finish_dir(outdir)
    return outdir


def run_decomposition(exp: DecompositionExperiment, outdir: str) -> str:
    """Monte-Carlo decomposition check with derived pass/fail style flags."""
    _start_dir(outdir)
    _write_json(os.path.join(outdir, "config.json"), to_raw(exp))
    res = run_decomposition_check(exp.check)
    quantities = [
        ("n_samples", exp.check.n_samples),
        ("mean_sq_prev", res.mean_sq_prev),
        ("mean_sq_cur", res.mean_sq_cur),
        ("mean_sq_t1", res.mean_sq_t1),
        ("mean_sq_t2", res.mean_sq_t2),
        ("cross_mean", res.cross_mean),
        ("cross_stderr", res.cross_stderr),
        ("max_identity_rel_error", res.max_identity_rel_error),
        ("retention_rel_error", res.retention_rel_error),
        ("decomposition_gap_rel", res.decomposition_gap_rel),
        ("monotone", res.monotone),
    ]
    write_csv(os.path.join(outdir, "decomposition.csv"), ["quantity", "value"],
              [[k, v] for k, v in quantities])
    summary = {
        "experiment_id": exp.experiment_id,
        "kind": exp.kind,
        **{k: v for k, v in quantities},
        "identity_holds": res.max_identity_rel_error <= 1e-9,
        "cross_term_within_3_stderr": abs(res.cross_mean) <= 3 * res.cross_stderr,
    }
    _write_json(os.path.join(outdir, "summary.json"), summary)
    figures.save_decomposition_figure(outdir, res)
    _finish_dir(outdir)
    return outdir


def run_experiment(exp: Experiment, output_root: str) -> str:
    outdir = os.path.join(output_root, exp.experiment_id)
    if isinstance(exp, FederationExperiment):
        if exp.sweep is not None:
            return run_sweep(exp, outdir)
        return run_federation_experiment(exp, outdir)
    if isinstance(exp, AccumulationExperiment):
        return run_accumulation(exp, outdir)
    return run_decomposition(exp, outdir)


def _flatten(obj, prefix: str = "") -> dict:
    out = {}
    if isinstance(obj, dict):
        for k, v in obj.items():
            out.update(_flatten(v, f"{prefix}.{k}" if prefix else k))
    elif isinstance(obj, list):
        out[prefix] = json.dumps(obj)
    else:
        out[prefix] = obj
    return out


def load_run(run_dir: str) -> dict:
    """Read one finished run directory's config and summary."""
    for fname in ("config.json", "summary.json"):
        if not os.path.exists(os.path.join(run_dir, fname)):
            raise FileNotFoundError(f"{run_dir}: missing {fname}; not a finished run directory")
    with open(os.path.join(run_dir, "config.json"), encoding="utf-8") as fh:
        config = json.load(fh)
    with open(os.path.join(run_dir, "summary.json"), encoding="utf-8") as fh:
        summary = json.load(fh)
    return {"dir": run_dir, "config": config, "summary": summary}


def _spearman(xs, ys):
    # undefined for constant inputs; report that as absent rather than nan
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        return None
    rho, _ = stats.spearmanr(xs, ys)
    return float(rho) if math.isfinite(rho) else None


def compare_runs(run_dirs: list[str]) -> dict:
    """Line up finished federation runs and, when they differ on exactly one
    config axis besides seed, test how divergence and accuracy move along it.
    """
    if len(run_dirs) < 2:
        raise ValidationError("compare needs at least two run directories")
    runs = [load_run(d) for d in run_dirs]
    for r in runs:
        if r["summary"].get("kind") != "federation":
            raise ValidationError(f"{r['dir']}: compare handles federation runs, "
                                  f"got kind {r['summary'].get('kind')!r}")

    flats = [_flatten(r["config"]) for r in runs]
    keys = set().union(*flats)
    differing = sorted(
        k for k in keys
        if k not in ("experiment_id", "seed")
        and len({json.dumps(f.get(k)) for f in flats}) > 1)
    axis = differing[0] if len(differing) == 1 else None

    rows = []
    for r, flat in zip(runs, flats):
        s = r["summary"]
        rows.append({
            "dir": r["dir"],
            "experiment_id": s["experiment_id"],
            "seed": flat.get("seed"),
            "axis_value": flat.get(axis) if axis else None,
            "final_round_divergence": s["final_round_divergence"],
            "mean_divergence": s["mean_divergence"],
            "best_test_accuracy": s.get("best_test_accuracy"),
            "final_test_accuracy": s["final_test_accuracy"],
            "rounds_to_threshold": s["rounds_to_threshold"],
            "accuracy_gap_rel": s.get("accuracy_gap_rel"),
        })

    trends = None
    if axis is not None:
        values = [row["axis_value"] for row in rows]
        numeric = all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values)
        by_seed: dict = {}
        for row in rows:
            by_seed.setdefault(row["seed"], []).append(row)
        per_seed = []
        div_down = acc_up = gap_up = 0
        usable = 0
        for seed, group in sorted(by_seed.items(), key=lambda t: (t[0] is None, t[0])):
            if not numeric or len(group) < 2:
                continue
            group = sorted(group, key=lambda row: row["axis_value"])
            # trends are judged on the trained model: last-round divergence and
            # the best accuracy each run reached, not the run averages
            divs = [g["final_round_divergence"] for g in group]
            accs = [g["best_test_accuracy"] for g in group]
            gaps = [g["accuracy_gap_rel"] for g in group]
            usable += 1
            entry = {"seed": seed,
                     "divergence_strictly_decreasing": all(b < a for a, b in zip(divs, divs[1:])),
                     "accuracy_non_decreasing": (None not in accs
                                                 and all(b >= a for a, b in zip(accs, accs[1:])))}
            if None not in gaps:
                entry["gap_strictly_increasing"] = all(b > a for a, b in zip(gaps, gaps[1:]))
                gap_up += entry["gap_strictly_increasing"]
            div_down += entry["divergence_strictly_decreasing"]
            acc_up += entry["accuracy_non_decreasing"]
            per_seed.append(entry)
        trends = {"axis": axis, "per_seed": per_seed}
        if usable:
            trends["divergence_strictly_decreasing"] = f"{div_down}/{usable}"
            trends["accuracy_non_decreasing"] = f"{acc_up}/{usable}"
            if any("gap_strictly_increasing" in e for e in per_seed):
                trends["gap_strictly_increasing"] = f"{gap_up}/{usable}"
        if numeric and len({str(v) for v in values}) >= 2:
            finite = [(row["axis_value"], row["final_round_divergence"], row["best_test_accuracy"])
                      for row in rows]
            trends["divergence_spearman_rho"] = _spearman(
                [f[0] for f in finite], [f[1] for f in finite])
            accs = [(f[0], f[2]) for f in finite if f[2] is not None]
            if len(accs) >= 2:
                trends["accuracy_spearman_rho"] = _spearman(
                    [a[0] for a in accs], [a[1] for a in accs])

    return {"axis": axis, "rows": rows, "trends": trends}


def write_comparison(run_dirs: list[str], outdir: str) -> dict:
    """compare_runs plus the comparison.csv / comparison.json / figure files."""
    comparison = compare_runs(run_dirs)
    os.makedirs(outdir, exist_ok=True)
    write_csv(os.path.join(outdir, "comparison.csv"),
              ["dir", "experiment_id", "seed", "axis", "axis_value",
               "final_round_divergence", "mean_divergence", "best_test_accuracy",
               "final_test_accuracy", "rounds_to_threshold", "accuracy_gap_rel"],
              [[os.path.relpath(row["dir"], outdir), row["experiment_id"], row["seed"],
                comparison["axis"], row["axis_value"], row["final_round_divergence"],
                row["mean_divergence"], row["best_test_accuracy"],
                row["final_test_accuracy"], row["rounds_to_threshold"],
                row["accuracy_gap_rel"]]
               for row in comparison["rows"]])
    _write_json(os.path.join(outdir, "comparison.json"),
                {"axis": comparison["axis"], "trends": comparison["trends"],
                 "runs": [{k: v for k, v in row.items() if k != "dir"}
                          | {"dir": os.path.relpath(row["dir"], outdir)}
                          for row in comparison["rows"]]})
    if comparison["axis"] is not None:
        groups: dict = {}
        for row in comparison["rows"]:
            groups.setdefault(row["axis_value"], []).append(
                (row["final_round_divergence"], row["best_test_accuracy"]))
        figures.save_comparison_figure(outdir, comparison["axis"], groups)
    return comparison
