"""Command-line entry point: ``selective-fusion <command> ...``.

Exit codes: 0 on success, 1 for configuration or input parsing errors,
2 for runtime and numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from importlib import resources
from pathlib import Path

from selective_fusion.boxfusion import FusionConfig, fuse
from selective_fusion.engine import (
    TEST_STREAM,
    LogSource,
    RunTrace,
    SimulatedSource,
    branch_selection_stats,
    gate_training_data,
    SuiteConfig,
    run_experiment,
    stream_rng,
    write_comparison_csv,
    write_selection_csv,
)
from selective_fusion.errors import (
    ConfigError,
    InvalidInputError,
    InvalidModelError,
    ParseError,
    SchemaError,
    SelectiveFusionError,
)
from selective_fusion.estimation import load_wls_config, run_wls_demo, write_subset_csv
from selective_fusion.gating import GateHyperParams, LossWeights, train_gate
from selective_fusion.scenario import (
    CLASSES,
    DEFAULT_BRANCHES,
    GeneratorConfig,
    default_branch_set,
    write_detection_log,
)
from selective_fusion.scoring import write_reports_csv, write_reports_json

CONFIG_DIR_ENV = "SELECTIVE_FUSION_CONFIG_DIR"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

_INPUT_ERRORS = (ConfigError, ParseError, SchemaError, InvalidInputError, InvalidModelError, json.JSONDecodeError)


def config_dir() -> Path:
    """Directory searched for bare config names; the env var overrides the packaged defaults."""
    env = os.environ.get(CONFIG_DIR_ENV)
    if env:
        return Path(env)
    return Path(str(resources.files("selective_fusion") / "data"))


def resolve_config(name) -> Path:
    """Use ``name`` as a path if it exists, else look it up in :func:`config_dir`."""
    p = Path(name)
    if p.exists():
        return p
    candidate = config_dir() / name
    if candidate.exists():
        return candidate
    raise ConfigError(f"config {name!r} not found (also looked in {config_dir()})")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _branch_names() -> dict:
    return {bid: name for bid, name, _ in DEFAULT_BRANCHES}


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(args) -> int:
    data = _read_json(resolve_config(args.config))
    n_scenes = args.n_scenes if args.n_scenes is not None else int(data.get("n_scenes", 100))
    if n_scenes < 0:
        raise ConfigError("n_scenes must be >= 0")
    gen = GeneratorConfig.from_dict(data)
    branches = default_branch_set(gen.knowledge)
    source = SimulatedSource(gen, branches, args.seed, n_scenes, TEST_STREAM)
    entries = []
    for sid in source.scene_ids():
        entries.append((source.scene(sid), {b: source.run_branch(sid, b) for b in source.branch_ids}))
    n = write_detection_log(args.out, entries, source.branch_ids)
    print(f"wrote {n} branch records for {n_scenes} scenes to {args.out}")
    return EXIT_OK


def _fusion_config(args) -> FusionConfig:
    data = _read_json(resolve_config(args.fusion_config)) if args.fusion_config else {}
    for key in ("algorithm", "iou_threshold", "skip_box_threshold", "sigma"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    return FusionConfig.from_dict(data)


def cmd_fuse(args) -> int:
    cfg = _fusion_config(args)
    source = LogSource.from_path(args.log)
    bids = _parse_ints(args.branches) if args.branches else list(source.branch_ids)
    rows = []
    for sid in source.scene_ids():
        fused = fuse({b: source.run_branch(sid, b).detections for b in bids}, cfg)
        rows.extend((sid, d) for d in fused)
    if args.format == "json":
        out = [dict(d.to_dict(), scene=sid, branch=d.branch) for sid, d in rows]
        Path(args.out).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    else:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scene", "label", "score", "x1", "y1", "x2", "y2", "branch"])
            for sid, d in rows:
                w.writerow([sid, d.label, repr(d.score)] + [repr(v) for v in d.box.as_list()] + [d.branch])
    print(f"fused {len(rows)} detections with {cfg.algorithm} into {args.out}")
    return EXIT_OK


def cmd_train_gate(args) -> int:
    source = LogSource.from_path(args.log)
    if not source.scene_ids():
        raise ConfigError("log has no scenes to train on")
    lw = LossWeights(args.miss_weight, args.fp_weight)
    X, Y = gate_training_data(source, lw)
    hp = GateHyperParams(
        hidden_dim=args.hidden,
        epochs=args.epochs,
        learning_rate=args.lr,
        init_scale=args.init_scale,
        attention=args.attention,
        n_blocks=args.blocks if args.attention else 1,
    )
    rng = stream_rng(args.seed)
    n_val = int(round(args.holdout * len(X)))
    if n_val >= len(X):
        raise ConfigError("holdout leaves no training samples")
    perm = rng.permutation(len(X))
    val, tr = perm[:n_val], perm[n_val:]
    validation = (X[val], Y[val]) if n_val else None
    res = train_gate((X[tr], Y[tr]), hp, rng, source.branch_ids, validation=validation)
    res.gate.save(args.out)
    curve = args.curve or str(Path(args.out).with_suffix(".curve.csv"))
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mae", "holdout_mae"])
        for i, mae in enumerate(res.history):
            w.writerow([i, f"{mae:.10g}", f"{res.val_history[i]:.10g}" if res.val_history else ""])
    msg = f"train MAE {res.history[-1]:.4f}"
    if res.val_history:
        msg += f", held-out MAE {res.val_history[-1]:.4f}"
    print(f"{msg}; gate written to {args.out}, curve to {curve}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    path = resolve_config(args.suite)
    data = _read_json(path)
    if args.log:
        data["scene_source"] = {"log": str(Path(args.log).resolve())}
    suite = SuiteConfig.from_dict(data, base_dir=path.parent)
    if args.seed is not None:
        suite.seeds = tuple(range(args.seed, args.seed + len(suite.seeds)))
    if args.n_seeds is not None:
        suite.seeds = tuple(range(suite.seeds[0], suite.seeds[0] + args.n_seeds))
    if args.n_scenes is not None:
        suite.n_scenes = args.n_scenes
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(suite, keep_traces=args.traces)
    write_comparison_csv(result, out / "comparison.csv")
    if args.format == "json":
        (out / "comparison.json").write_text(json.dumps(result.comparison(), indent=1, sort_keys=True) + "\n")
        write_reports_json(result.reports, out / "reports.json")
    else:
        write_reports_csv(result.reports, CLASSES, out / "reports.csv")
    write_selection_csv(branch_selection_stats(result.traces), out / "selection.csv", _branch_names())
    if args.traces:
        with open(out / "traces.jsonl", "w") as fh:
            for t in result.traces:
                fh.write(t.to_json() + "\n")
    print(f"evaluated {len(suite.configurations)} configurations over {len(result.reports)} runs into {out}")
    return EXIT_OK


def cmd_selection_stats(args) -> int:
    traces = []
    with open(args.traces) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                traces.append(RunTrace.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), lineno) from exc
    if not traces:
        raise ConfigError("no traces found")
    contexts = args.contexts.split(",") if args.contexts else None
    stats = branch_selection_stats(traces, contexts)
    if args.format == "json":
        out = [{"gate": g, "k": k, "rates": {str(b): r for b, r in rates.items()}} for (g, k), rates in sorted(stats.items())]
        Path(args.out).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    else:
        write_selection_csv(stats, args.out, _branch_names())
    print(f"selection rates for {len(stats)} (gate, k) groups written to {args.out}")
    return EXIT_OK


def cmd_wls_demo(args) -> int:
    cfg = load_wls_config(resolve_config(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.trials is not None:
        cfg["trials"] = args.trials
    results = run_wls_demo(cfg)
    if args.format == "json":
        out = [
            {"subset_id": r.subset_id, "sensors": list(r.subset), "mean_squared_error": r.mean_squared_error,
             "std_error": r.std_error, "declared_trace": r.analytic_mse}
            for r in results
        ]
        Path(args.out).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    else:
        write_subset_csv(results, args.out)
    for r in results:
        print(f"{r.subset_id:>12s}  mse {r.mean_squared_error:.4f} +/- {r.std_error:.4f}")
    return EXIT_OK


def _parse_ints(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selective-fusion", description="Simulate, gate, fuse and score multi-sensor detections.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a detection log from a generator config")
    s.add_argument("config", help="generator config JSON (path or name in the config dir)")
    s.add_argument("out", help="output detection log (JSON lines)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n-scenes", type=int, help="override the config's scene count")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fuse", help="fuse the branch detections of every logged scene")
    s.add_argument("log")
    s.add_argument("out")
    s.add_argument("--fusion-config", help="fusion config JSON")
    s.add_argument("--algorithm", choices=["nms", "soft_nms", "wbf"])
    s.add_argument("--iou-threshold", dest="iou_threshold", type=float)
    s.add_argument("--skip-box-threshold", dest="skip_box_threshold", type=float)
    s.add_argument("--sigma", type=float)
    s.add_argument("--branches", help="comma-separated branch ids (default: all in the log)")
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("train-gate", help="train a learned gate on logged branch losses")
    s.add_argument("log")
    s.add_argument("out", help="gate JSON")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--curve", help="per-epoch MAE CSV (default: next to the gate file)")
    defaults = GateHyperParams()
    s.add_argument("--epochs", type=int, default=defaults.epochs)
    s.add_argument("--hidden", type=int, default=defaults.hidden_dim)
    s.add_argument("--lr", type=float, default=defaults.learning_rate)
    s.add_argument("--init-scale", type=float, default=defaults.init_scale)
    s.add_argument("--attention", action="store_true", help="pool modality blocks with softmax attention")
    s.add_argument("--blocks", type=int, default=4, help="modality blocks for attention")
    s.add_argument("--holdout", type=float, default=0.2, help="fraction of scenes held out")
    s.add_argument("--miss-weight", type=float, default=LossWeights().miss)
    s.add_argument("--fp-weight", type=float, default=LossWeights().false_positive)
    s.set_defaults(func=cmd_train_gate)

    s = sub.add_parser("evaluate", help="run a suite and write reports")
    s.add_argument("suite", help="suite config JSON (path or name in the config dir)")
    s.add_argument("out_dir")
    s.add_argument("--log", help="replay this detection log instead of simulating")
    s.add_argument("--seed", type=int, help="first master seed (overrides the suite)")
    s.add_argument("--n-seeds", type=int)
    s.add_argument("--n-scenes", type=int)
    s.add_argument("--traces", action="store_true", help="also write run traces (JSON lines)")
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("selection-stats", help="branch selection rates from saved traces")
    s.add_argument("traces", help="traces.jsonl written by evaluate --traces")
    s.add_argument("out")
    s.add_argument("--contexts", help="comma-separated context labels to restrict to")
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.set_defaults(func=cmd_selection_stats)

    s = sub.add_parser("wls-demo", help="compare sensor subsets under misspecified noise")
    s.add_argument("config", nargs="?", default="wls_demo.json")
    s.add_argument("out")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--trials", type=int)
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.set_defaults(func=cmd_wls_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SelectiveFusionError, ArithmeticError, OSError, ValueError, LookupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
