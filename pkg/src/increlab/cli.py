"""Command-line harness: benchmark construction, training, ablations, sweeps.

Subcommands: build-tasks, train, ablate, sweep, relabel-stats.  Exit codes:
0 success, 1 runtime error, 2 usage or configuration error.  Every report
embeds the fully resolved configuration and seeds; timestamps live in a
meta.json sidecar so identical inputs produce byte-identical reports.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import (
    TaskStream,
    build_task_stream,
    load_task_stream,
    read_conll,
    save_task_stream,
    task_statistics,
    validate_task_stream,
)
from .errors import ConfigurationError, IncrelabError
from .protocol import DEFAULT_FLAT_CONFIG, RunConfig, run_stream

ABLATION_ARMS: dict[str, dict[str, object]] = {
    "full-proto": {"train.mode": "entity-aware", "relabel.strategy": "proto"},
    "full-nn": {"train.mode": "entity-aware", "relabel.strategy": "nn"},
    "no-relabel": {"train.mode": "entity-aware", "relabel.strategy": "none"},
    "normal-scl": {"train.mode": "normal-scl", "relabel.strategy": "proto"},
    "normal-scl-no-O": {"train.mode": "normal-scl-no-O", "relabel.strategy": "proto"},
    "normal-scl-no-relabel": {"train.mode": "normal-scl", "relabel.strategy": "none"},
}

SWEEP_PARAMETERS = ("beta", "entity-threshold-index", "tau")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_out_dir(path: str | Path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigurationError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out: Path, argv: Sequence[str], started: float) -> None:
    meta = {
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "duration_s": time.monotonic() - started,
        "argv": list(argv),
    }
    _write_json(out / "meta.json", meta)


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _load_config(config_path: str | None, overrides: Sequence[str]) -> RunConfig:
    flat = dict(DEFAULT_FLAT_CONFIG)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        loaded = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must hold a flat JSON object")
        unknown = [k for k in loaded if k not in DEFAULT_FLAT_CONFIG]
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        flat.update(loaded)
    for text in overrides:
        key, value = _parse_override(text)
        if key not in DEFAULT_FLAT_CONFIG:
            raise ConfigurationError(f"unknown config key in override: {key!r}")
        flat[key] = value
    return RunConfig.from_flat(flat)


def _execute_run(config: RunConfig, stream: TaskStream, out: Path) -> dict:
    report = run_stream(stream, config)
    steps_dir = out / "steps"
    steps_dir.mkdir(exist_ok=True)
    slim_steps = []
    for step in report["steps"]:
        idx = step["step"]
        lines = [json.dumps(_jsonable(rec), sort_keys=True) for rec in step["epoch_logs"]]
        (steps_dir / f"step{idx:02d}.epochs.jsonl").write_text(
            "\n".join(lines) + "\n", encoding="utf-8"
        )
        confusion = step["metrics"]
        csv_lines = ["gold\\pred," + ",".join(confusion["group_labels"])]
        for label, row in zip(confusion["group_labels"], confusion["confusion"]):
            csv_lines.append(label + "," + ",".join(str(c) for c in row))
        (steps_dir / f"step{idx:02d}.confusion.csv").write_text(
            "\n".join(csv_lines) + "\n", encoding="utf-8"
        )
        if step["relabel"] is not None:
            _write_json(steps_dir / f"step{idx:02d}.relabel.json", step["relabel"])
        slim = {k: v for k, v in step.items() if k != "epoch_logs"}
        slim_steps.append(slim)
    report = dict(report)
    report["steps"] = slim_steps
    _write_json(out / "run.json", report)
    return report


def cmd_build_tasks(args: argparse.Namespace) -> int:
    started = time.monotonic()
    corpus = read_conll(args.corpus)
    class_order = None
    if args.class_order is not None:
        order_path = Path(args.class_order)
        if not order_path.is_file():
            raise ConfigurationError(f"class order file not found: {order_path}")
        class_order = json.loads(order_path.read_text(encoding="utf-8"))
        if not isinstance(class_order, list):
            raise ConfigurationError("class order file must hold a JSON list of class names")
    out = _prepare_out_dir(args.out, args.force)
    stream = build_task_stream(
        corpus,
        args.task_count,
        args.classes_per_task,
        seed=args.seed,
        class_order=class_order,
        dev_fraction=args.dev_fraction,
        test_fraction=args.test_fraction,
        cumulative_dev=args.cumulative_dev,
    )
    problems = validate_task_stream(stream)
    for problem in problems:
        print(f"warning: {problem}", file=sys.stderr)
    manifest = save_task_stream(stream, out)
    print(f"{'task':<6}{'train':>8}{'dev':>8}{'test':>8}  classes")
    for row in task_statistics(stream):
        print(
            f"{row['task']:<6}{row['train']:>8}{row['dev']:>8}{row['test']:>8}  "
            + ", ".join(row["classes"])
        )
    print(f"manifest written to {manifest}")
    _write_meta(out, sys.argv[1:], started)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = time.monotonic()
    config = _load_config(args.config, args.set or [])
    stream = load_task_stream(args.manifest)
    out = _prepare_out_dir(args.out, args.force)
    report = _execute_run(config, stream, out)
    for step in report["steps"]:
        m = step["metrics"]
        print(
            f"step {step['step']}: token micro-F1 {m['token_micro_f1']:.4f}  "
            f"macro-F1 {m['token_macro_f1']:.4f}  span micro-F1 {m['span_micro_f1']:.4f}"
        )
    print(f"report written to {out / 'run.json'}")
    _write_meta(out, sys.argv[1:], started)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    started = time.monotonic()
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    if not arms:
        raise ConfigurationError("no ablation arms given")
    unknown = [a for a in arms if a not in ABLATION_ARMS]
    if unknown:
        raise ConfigurationError(f"unknown arms {unknown}; choose from {sorted(ABLATION_ARMS)}")
    base = _load_config(args.config, args.set or [])
    stream = load_task_stream(args.manifest)
    out = _prepare_out_dir(args.out, args.force)
    table: dict[str, dict[str, list[float]]] = {}
    for arm in arms:
        flat = base.to_flat()
        flat.update(ABLATION_ARMS[arm])
        config = RunConfig.from_flat(flat)
        arm_dir = out / "arms" / arm
        arm_dir.mkdir(parents=True, exist_ok=True)
        report = _execute_run(config, stream, arm_dir)
        table[arm] = {
            "token_micro_f1": [s["metrics"]["token_micro_f1"] for s in report["steps"]],
            "token_macro_f1": [s["metrics"]["token_macro_f1"] for s in report["steps"]],
            "span_micro_f1": [s["metrics"]["span_micro_f1"] for s in report["steps"]],
        }
    _write_json(out / "ablation.json", {"config": base.to_flat(), "arms": table})
    steps = len(next(iter(table.values()))["token_micro_f1"])
    lines = ["step," + ",".join(f"{arm}_micro,{arm}_macro" for arm in arms)]
    for s in range(steps):
        cells = []
        for arm in arms:
            cells.append(f"{table[arm]['token_micro_f1'][s]:.6f}")
            cells.append(f"{table[arm]['token_macro_f1'][s]:.6f}")
        lines.append(f"{s}," + ",".join(cells))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for arm in arms:
        final = table[arm]["token_micro_f1"][-1]
        print(f"{arm}: final-step token micro-F1 {final:.4f}")
    _write_meta(out, sys.argv[1:], started)
    return 0


def _sweep_overrides(parameter: str, value: str) -> dict[str, object]:
    if parameter == "tau":
        return {"train.tau": float(value)}
    if parameter == "entity-threshold-index":
        return {"threshold.fraction": float(value)}
    if parameter == "beta":
        parts = [p.strip() for p in value.split(",")]
        if len(parts) == 1:
            return {"relabel.beta_fixed": float(parts[0])}
        if len(parts) == 2:
            return {
                "relabel.beta_fixed": None,
                "relabel.beta_base": float(parts[0]),
                "relabel.beta_slope": float(parts[1]),
            }
        raise ConfigurationError(f"cannot parse beta value {value!r}")
    raise ConfigurationError(f"unsupported sweep parameter {parameter!r}")


def cmd_sweep(args: argparse.Namespace) -> int:
    started = time.monotonic()
    values = [v.strip() for v in args.values.split(";") if v.strip()]
    if not values:
        raise ConfigurationError("no sweep values given")
    base = _load_config(args.config, args.set or [])
    stream = load_task_stream(args.manifest)
    out = _prepare_out_dir(args.out, args.force)
    rows = []
    for value in values:
        flat = base.to_flat()
        flat.update(_sweep_overrides(args.parameter, value))
        config = RunConfig.from_flat(flat)
        label = value.replace(",", "_").replace(" ", "")
        run_dir = out / "values" / label
        run_dir.mkdir(parents=True, exist_ok=True)
        report = _execute_run(config, stream, run_dir)
        final = report["steps"][-1]["metrics"]
        rows.append(
            {
                "value": value,
                "final_token_micro_f1": final["token_micro_f1"],
                "final_token_macro_f1": final["token_macro_f1"],
                "final_span_micro_f1": final["span_micro_f1"],
            }
        )
    _write_json(out / "sweep.json", {"parameter": args.parameter, "rows": rows, "config": base.to_flat()})
    lines = ["value,final_token_micro_f1,final_token_macro_f1,final_span_micro_f1"]
    for row in rows:
        lines.append(
            f"\"{row['value']}\",{row['final_token_micro_f1']:.6f},"
            f"{row['final_token_macro_f1']:.6f},{row['final_span_micro_f1']:.6f}"
        )
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for row in rows:
        print(f"{args.parameter}={row['value']}: final token micro-F1 {row['final_token_micro_f1']:.4f}")
    _write_meta(out, sys.argv[1:], started)
    return 0


def cmd_relabel_stats(args: argparse.Namespace) -> int:
    run_path = Path(args.run)
    if run_path.is_dir():
        run_path = run_path / "run.json"
    if not run_path.is_file():
        raise ConfigurationError(f"run report not found: {run_path}")
    report = json.loads(run_path.read_text(encoding="utf-8"))
    rows = []
    for step in report.get("steps", []):
        block = step.get("relabel")
        if not block or "stats" not in block:
            continue
        stats = block["stats"]
        rows.append(
            {
                "step": step["step"],
                "strategy": block["strategy"],
                "relabeled": stats["relabeled"],
                "precision": stats["precision"],
                "recall": stats["recall"],
                "micro_f1": stats["micro_f1"],
            }
        )
    if not rows:
        print("run contains no relabeling statistics")
        return 0
    print(f"{'step':<6}{'strategy':<10}{'relabeled':>10}{'precision':>11}{'recall':>9}{'micro-f1':>10}")
    for row in rows:
        print(
            f"{row['step']:<6}{row['strategy']:<10}{row['relabeled']:>10}"
            f"{row['precision']:>11.4f}{row['recall']:>9.4f}{row['micro_f1']:>10.4f}"
        )
    if args.csv is not None:
        lines = ["step,strategy,relabeled,precision,recall,micro_f1"]
        for row in rows:
            lines.append(
                f"{row['step']},{row['strategy']},{row['relabeled']},"
                f"{row['precision']:.6f},{row['recall']:.6f},{row['micro_f1']:.6f}"
            )
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="increlab", description="Class-incremental sequence labeling laboratory"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-tasks", help="split a corpus into an incremental task stream")
    p.add_argument("corpus", help="CoNLL-style TSV corpus (surface<TAB>label)")
    p.add_argument("--out", required=True, help="output directory for manifest and splits")
    p.add_argument("--task-count", type=int, required=True)
    p.add_argument("--classes-per-task", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class-order", help="JSON file with an explicit class order")
    p.add_argument("--dev-fraction", type=float, default=0.15)
    p.add_argument("--test-fraction", type=float, default=0.15)
    p.add_argument("--cumulative-dev", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_build_tasks)

    p = sub.add_parser("train", help="run the incremental protocol over a manifest")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run several ablation arms with shared seeds")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--arms", required=True, help=f"comma list from {sorted(ABLATION_ARMS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep one hyperparameter with shared seeds")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--parameter", required=True, choices=SWEEP_PARAMETERS)
    p.add_argument(
        "--values",
        required=True,
        help="semicolon-separated values; beta accepts 'x' (fixed) or 'base,slope'",
    )
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("relabel-stats", help="re-derive relabeling tables from a saved run")
    p.add_argument("--run", required=True, help="run directory or run.json path")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_relabel_stats)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IncrelabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
