"""Command line entry point.

Subcommands:
  run            execute one experiment config (any kind)
  sweep          execute a federation config's sweep section
  compare        line up finished run directories and report trends
  rf             print the receptive field table of a model description
  theorem-check  run the gradient-decomposition Monte-Carlo check

Exit codes: 0 success, 2 configuration problems, 3 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .arch import build_cnn, receptive_field
from .config import (DecompositionExperiment, FederationExperiment, load_experiment,
                     parse_layer_list, parse_model)
from .errors import ConfigError, FedSimLabError
from .runner import resolve_output_root, run_experiment, write_comparison

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsimlab",
        description="Federated-learning simulation lab with divergence instrumentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment config")
    run_p.add_argument("config", help="path to the experiment JSON file")
    run_p.add_argument("--output", default=None,
                       help="output root directory (default: $FEDSIMLAB_OUTPUT_ROOT or ./runs)")

    sweep_p = sub.add_parser("sweep", help="run a config's sweep section")
    sweep_p.add_argument("config", help="path to a federation JSON file with a sweep section")
    sweep_p.add_argument("--output", default=None,
                         help="output root directory (default: $FEDSIMLAB_OUTPUT_ROOT or ./runs)")

    cmp_p = sub.add_parser("compare", help="compare finished run directories")
    cmp_p.add_argument("dirs", nargs="+", help="two or more finished run directories")
    cmp_p.add_argument("--output", default=None,
                       help="output root directory (default: $FEDSIMLAB_OUTPUT_ROOT or ./runs)")
    cmp_p.add_argument("--name", default="comparison",
                       help="report directory name under the output root")

    rf_p = sub.add_parser("rf", help="receptive field table for a model description")
    rf_p.add_argument("model", help="JSON file holding a layer list or builder settings")

    thm_p = sub.add_parser("theorem-check", help="gradient-decomposition Monte-Carlo check")
    thm_p.add_argument("config", help="path to a theorem_check JSON file")
    thm_p.add_argument("--output", default=None,
                       help="output root directory (default: $FEDSIMLAB_OUTPUT_ROOT or ./runs)")
    return parser


def _load_rf_layers(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"model file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})")
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    if "layers" in obj and "builder" not in obj:
        extras = set(obj) - {"layers"}
        if extras:
            raise ConfigError(f"unknown field(s): {', '.join(sorted(extras))}")
        return parse_layer_list(obj["layers"], "layers")
    model_cfg = parse_model(obj, "")
    if model_cfg.builder == "layers":
        return model_cfg.layers
    # builder settings carry no spatial sizes; any valid canvas works for rf
    probe = build_cnn((1, 256, 256), 10, depth_blocks=model_cfg.depth_blocks,
                      base_width=model_cfg.base_width,
                      width_multiplier=model_cfg.width_multiplier,
                      schedule=model_cfg.schedule, stem=model_cfg.stem,
                      stem_pool=model_cfg.stem_pool, residual=model_cfg.residual)
    return probe.layers


def _cmd_rf(args) -> int:
    rows = receptive_field(list(_load_rf_layers(args.model)))
    if not rows:
        print("no sliding layers; receptive field stays 1x1")
        return EXIT_OK
    print(f"{'layer':<14} {'kind':<8} {'kernel':>6} {'stride':>6} {'rf':>6} {'jump':>6}")
    for row in rows:
        print(f"{row.name:<14} {row.kind:<8} {row.kernel:>6} {row.stride:>6} "
              f"{row.rf:>6} {row.jump:>6}")
    print(f"final receptive field: {rows[-1].rf} pixels")
    return EXIT_OK


def _cmd_run(args, want: str) -> int:
    exp = load_experiment(args.config)
    if want == "sweep":
        if not isinstance(exp, FederationExperiment) or exp.sweep is None:
            raise ConfigError("sweep: config must be kind federation with a sweep section")
    if want == "theorem-check" and not isinstance(exp, DecompositionExperiment):
        raise ConfigError("kind: theorem-check expects a theorem_check config")
    outdir = run_experiment(exp, resolve_output_root(args.output))
    print(f"wrote {outdir}")
    if isinstance(exp, FederationExperiment) and exp.sweep is not None:
        with open(os.path.join(outdir, "comparison.json"), encoding="utf-8") as fh:
            comparison = json.load(fh)
        print(f"axis: {comparison['axis']}")
        trends = comparison.get("trends") or {}
        for key in ("divergence_strictly_decreasing", "accuracy_non_decreasing",
                    "gap_strictly_increasing"):
            if key in trends:
                print(f"{key.replace('_', ' ')}: {trends[key]} seeds")
        return EXIT_OK
    with open(os.path.join(outdir, "summary.json"), encoding="utf-8") as fh:
        summary = json.load(fh)
    if exp.kind == "federation":
        print(f"best test accuracy: {summary['best_test_accuracy']}")
        print(f"final round divergence: {summary['final_round_divergence']:.6g}")
        print(f"rounds to {summary['threshold']:.2f} accuracy: {summary['rounds_to_threshold']}")
    elif exp.kind == "accumulation":
        print(f"deep model scatter decreasing with depth: {summary['deep_rho_negative']} seeds")
        print(f"first conv scatters less in the shallow model: "
              f"{summary['first_conv_shallow_below_deep']} seeds")
    elif exp.kind == "theorem_check":
        print(f"identity holds: {summary['identity_holds']} "
              f"(max rel error {summary['max_identity_rel_error']:.3g})")
        print(f"cross term within 3 stderr of zero: {summary['cross_term_within_3_stderr']}")
        print(f"deviation grows toward the input: {summary['monotone']}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    outdir = os.path.join(resolve_output_root(args.output), args.name)
    comparison = write_comparison(args.dirs, outdir)
    print(f"wrote {outdir}")
    print(f"{'experiment':<40} {'seed':>4} {'axis value':>12} {'final div':>12} {'best acc':>10}")
    for row in comparison["rows"]:
        acc = "-" if row["best_test_accuracy"] is None else f"{row['best_test_accuracy']:.4f}"
        axis_value = "-" if row["axis_value"] is None else str(row["axis_value"])
        print(f"{row['experiment_id']:<40} {str(row['seed']):>4} {axis_value:>12} "
              f"{row['final_round_divergence']:>12.6g} {acc:>10}")
    if comparison["axis"] is None:
        print("no single differing config axis; per-run metrics only")
    else:
        print(f"axis: {comparison['axis']}")
        trends = comparison["trends"]
        for key in ("divergence_strictly_decreasing", "accuracy_non_decreasing",
                    "gap_strictly_increasing"):
            if trends and key in trends:
                print(f"{key.replace('_', ' ')}: {trends[key]} seeds")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "rf":
            return _cmd_rf(args)
        if args.command == "compare":
            return _cmd_compare(args)
        return _cmd_run(args, want=args.command)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedSimLabError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # keep the contract: runtime failures exit 3
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
