"""dimmix command line: train / eval / analyze / bench.

Machine-readable results go to stdout and files in --out; human summaries go to stderr.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .data import ExperimentConfig, apply_overrides, config_to_text, load_checkpoint, load_config, read_checkpoint
from .errors import ConfigError, DataFormatError, DimensionError, NumericError, ScheduleError
from .mixing import build_mixing_graph, check_complete_mixing, cost_report, reach_matrix
from .patch_mixer import PatchOnlyMixer
from .train import VectorClassifier, bench, build_model, dtype_of, evaluate, load_datasets, train
from .tensor import make_rng, split_rng

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MATRIX_PLOT_LIMIT = 1024

log = logging.getLogger("dimmix")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base if base is not None else ExperimentConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    cfg = apply_overrides(cfg, _parse_sets(args.set or []))
    if args.seed is not None:
        cfg = apply_overrides(cfg, {"seed": str(args.seed)})
    return cfg.validate()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    from .plotting import plot_training_curves

    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg))
    result = train(cfg, out)
    rows = result["rows"]
    if rows:
        plot_training_curves(rows, out / "curves.png")
    summary = {
        "epochs": len(rows),
        "final_test_acc": rows[-1]["test_acc"] if rows else None,
        "best_test_acc": result["best_test_acc"] if rows else None,
        "params": result["model"].num_params(),
        "metrics": str(result["metrics"]),
        "checkpoint": str(out / "final.ckpt"),
    }
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    if rows:
        _say(f"trained {cfg.family} for {len(rows)} epochs: test acc {rows[-1]['test_acc']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    _, stored = read_checkpoint(ckpt)
    cfg = resolve_config(args, stored)
    model = build_model(cfg, split_rng(make_rng(cfg.seed), 2)[0])
    load_checkpoint(ckpt, model)
    _, test = load_datasets(cfg)
    acc = evaluate(model, test, dtype=dtype_of(cfg))
    result = {"checkpoint": str(ckpt), "test_acc": acc, "n_test": len(test)}
    print(json.dumps(result, sort_keys=True))
    _say(f"test accuracy {acc:.4f} on {len(test)} samples")
    return EXIT_OK


def analyze_model(cfg: ExperimentConfig, measure: bool = True) -> tuple[dict, list[int] | None, object]:
    model = build_model(cfg, make_rng(cfg.seed))
    target = model.mixer if isinstance(model, VectorClassifier) else model
    report: dict = {"family": cfg.family}
    counts = None
    graph = None
    try:
        graph = build_mixing_graph(target)
    except ScheduleError as e:
        report["mixing"] = {"complete": None, "reason": str(e)}
    if graph is not None:
        mix = check_complete_mixing(graph)
        counts = mix.per_input_reach_counts
        report["mixing"] = {"num_dims": graph.num_dims, "num_stages": graph.num_layers, **mix.to_dict()}
    if isinstance(model, PatchOnlyMixer):
        report["mixing"]["effective_block"] = model.schedule.effective_block
        report["mixing"]["coprime"] = model.schedule.coprime
    cost = cost_report(model, batch=1, measure=measure, seed=cfg.seed)
    report["cost"] = {k: cost[k] for k in ("params", "params_walk", "macs", "permutation_count")}
    if measure:
        report["cost"]["macs_measured"] = cost["macs_measured"]
        report["cost"]["macs_by_scope"] = cost["macs_by_scope"]
    return report, counts, graph


def cmd_analyze(args) -> int:
    from .plotting import plot_reach_counts, plot_reach_matrix

    cfg = resolve_config(args)
    out = Path(args.out)
    report, counts, graph = analyze_model(cfg, measure=not args.no_measure)
    _write_json(out / "analysis.json", report)
    if counts is not None:
        with open(out / "reach.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["input", "outputs_reached"])
            w.writerows(enumerate(counts))
        plot_reach_counts(counts, graph.num_dims, out / "reach_counts.png")
        if graph.num_dims <= MATRIX_PLOT_LIMIT:
            plot_reach_matrix(reach_matrix(graph), out / "reach_matrix.png", cfg.family)
    print(json.dumps(report, sort_keys=True))
    mix = report["mixing"]
    if mix.get("complete") is None:
        _say(f"mixing: not analyzable ({mix['reason']})")
    else:
        _say(f"complete: {str(mix['complete']).lower()} (reach {mix['min_reach']}..{mix['max_reach']} of {mix['num_dims']})")
    _say(f"params {report['cost']['params']}, MACs {report['cost']['macs']}, permutations {report['cost']['permutation_count']}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .plotting import plot_bench

    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = bench(cfg, args.steps)
    fields = list(rows[0]) if rows else []
    with open(out / "bench.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    if rows:
        plot_bench(rows, out / "bench.png")
    w = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    for r in rows:
        _say(f"{r['family']:>14} patch {r['patch_size']} S={r['seq_len']}: {r['step_ms']:.2f} ms/step, peak {r['peak_mib']:.1f} MiB")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dimmix", description="Dimension-mixer models: train, evaluate, analyze, benchmark.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="config file of key = value lines")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="train a model; writes metrics.csv and checkpoints")
    common(p, "runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("checkpoint")
    common(p, "runs/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="mixing completeness and cost report")
    common(p, "runs/analyze")
    p.add_argument("--no-measure", action="store_true", help="skip the measured forward pass")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="per-step time and peak memory, dense vs butterfly attention")
    common(p, "runs/bench")
    p.add_argument("--steps", type=int, help="steps to average (default: bench_steps)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScheduleError, DimensionError) as e:
        _say(f"config error: {e}")
        return EXIT_CONFIG
    except (DataFormatError, OSError) as e:
        _say(f"data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        _say(f"numeric failure: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
