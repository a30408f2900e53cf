"""Command-line entry points: scenario preparation, single training runs,
multi-seed benchmarks with cell caching, and report/figure emission.

Exit codes: 0 success, 1 failure, 2 usage error (argparse), 3 degraded run
(empty pseudo-label fallback).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import datasets, models, pipeline
from .evaluation import (BenchmarkTable, EvaluationError, RunResult,
                         read_results_csv, write_results_csv)
from .pipeline import METHODS, TrainConfig

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DEGRADED = 3

SEED_OFFSET_ENV = "PUDA_SEED_OFFSET"


def seed_offset() -> int:
    return int(os.environ.get(SEED_OFFSET_ENV, "0"))


def _positive_fraction(value: str) -> float:
    c = float(value)
    if not 0.0 < c <= 1.0:
        raise argparse.ArgumentTypeError(f"label frequency must lie in (0, 1], got {c}")
    return c


def _parse_seeds(spec: str) -> list:
    """'0,1,2' or '0:10' (half-open range)."""
    if ":" in spec:
        lo, hi = spec.split(":")
        return list(range(int(lo), int(hi)))
    return [int(s) for s in spec.split(",") if s != ""]


def _load_train_config(path, seed: int) -> TrainConfig:
    overrides = {}
    if path:
        overrides = json.loads(Path(path).read_text())
    overrides["seed"] = seed
    base = TrainConfig().to_dict()
    unknown = set(overrides) - set(base)
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    base.update(overrides)
    return TrainConfig.from_dict(base)


# ---------------------------------------------------------------------------
# prepare

def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        spec_dict = json.loads(Path(args.synthetic).read_text())
        spec = datasets.SyntheticShiftSpec.from_dict(spec_dict)
        manifest = datasets.synthetic_manifest(spec, c=args.c, seed=args.seed,
                                               name=args.name)
    else:
        if not (args.source_root and args.target_root
                and args.positive_class and args.negative_class):
            print("prepare: need --synthetic or all of --source-root/--target-root/"
                  "--positive-class/--negative-class", file=sys.stderr)
            return EXIT_FAILURE
        size = None
        if args.image_size:
            w, h = args.image_size.split("x")
            size = (int(w), int(h))
        manifest = datasets.folder_manifest(
            args.source_root, args.target_root, args.positive_class,
            args.negative_class, c=args.c, seed=args.seed, image_size=size,
            mode=args.mode, name=args.name)
    try:
        scenario = datasets.scenario_from_manifest(manifest)
    except datasets.ScenarioError as exc:
        print(f"prepare: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    manifest["class_prior"] = scenario.class_prior
    datasets.save_manifest(out / "scenario.json", manifest)
    _write_splits(out / "splits.npz", scenario)
    print(f"wrote {out / 'scenario.json'} "
          f"(pi={scenario.class_prior:.4f}, "
          f"labeled positives={len(scenario.target_positive)})")
    return EXIT_OK


def _write_splits(path, scenario):
    arrays = {}
    for pool in ("source", "target_positive", "target_unlabeled"):
        examples = getattr(scenario, pool)
        arrays[f"{pool}_ids"] = np.array([ex.id for ex in examples])
        arrays[f"{pool}_features"] = np.stack([ex.features for ex in examples])
        arrays[f"{pool}_labels"] = np.array([ex.true_label for ex in examples])
        arrays[f"{pool}_s"] = np.array([ex.s for ex in examples])
    np.savez(path, **arrays)


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    manifest_path = Path(args.scenario)
    if not manifest_path.exists():
        print(f"train: scenario manifest not found: {manifest_path}", file=sys.stderr)
        return EXIT_FAILURE
    manifest = datasets.load_manifest(manifest_path)
    seed = args.seed + seed_offset()
    config = _load_train_config(args.config, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        status, result = _run_single(manifest, args.method, args.c, seed, config, out)
    except pipeline.TrainingDivergedError as exc:
        print(f"train: diverged: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (datasets.ScenarioError, ValueError) as exc:
        print(f"train: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"{args.method}: accuracy={result.accuracy:.4f} "
          f"balanced={result.balanced_accuracy:.4f} status={status}")
    return EXIT_DEGRADED if status == "degraded" else EXIT_OK


def _run_single(manifest, method, c_override, seed, config, out) -> tuple:
    """Train one (method, c, seed) cell and write its artifacts under out/."""
    manifest = dict(manifest)
    if c_override is not None:
        manifest["c"] = c_override
    scenario = datasets.scenario_from_manifest(manifest, label_seed=seed)
    status = "success"
    if method == "pu_da":
        artifacts = pipeline.run_pu_da(scenario, config)
        status = artifacts.status
        predictor = artifacts.predictor
        artifacts.candidates.export_csv(out / "d_c.csv")
        artifacts.pseudo.export_csv(out / "d_pseudo.csv")
        _write_loss_trace(out / "loss_trace.csv", artifacts.loss_trace)
        _write_thresholds(out / "thresholds.csv", artifacts.thresholds_trace)
        _write_selector_trace(out / "selector_trace.csv", artifacts.selector_trace)
        to_save = {"encoder": artifacts.bundle.encoder, "head": artifacts.bundle.head,
                   "decoder": artifacts.bundle.decoder}
        if artifacts.final is not None:
            to_save["final"] = artifacts.final
        models.save_model(out / "model.pt", to_save, artifacts.bundle.arch)
    elif method in pipeline.BASELINES:
        step1 = pipeline.run_step1(scenario, config, variant=method)
        predictor = pipeline.Predictor.from_encoder_head(step1.bundle.encoder,
                                                         step1.bundle.head)
        _write_loss_trace(out / "loss_trace.csv", step1.loss_trace)
        models.save_model(out / "model.pt",
                          {"encoder": step1.bundle.encoder, "head": step1.bundle.head},
                          step1.bundle.arch)
    else:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    result = pipeline.evaluate_predictor(predictor, scenario, method, seed)
    run_manifest = {
        "method": method, "seed": seed, "status": status,
        "scenario": manifest, "config": config.to_dict(),
        "data_fingerprint": _scenario_fingerprint(scenario),
    }
    (out / "run_manifest.json").write_text(
        json.dumps(run_manifest, indent=2, sort_keys=True) + "\n")
    (out / "metrics.json").write_text(
        json.dumps({**asdict(result), "status": status}, indent=2, sort_keys=True) + "\n")
    return status, result


def _scenario_fingerprint(scenario) -> str:
    h = hashlib.sha256()
    for pool in (scenario.source, scenario.target_positive, scenario.target_unlabeled):
        for ex in pool:
            h.update(np.ascontiguousarray(ex.features).tobytes())
            h.update(f"{ex.id}:{ex.s}".encode())
    return h.hexdigest()[:16]


def _write_loss_trace(path, trace):
    keys = sorted({k for row in trace for k in row})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(trace)


def _write_thresholds(path, thresholds):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "t_pos", "t_neg"])
        for th in thresholds:
            writer.writerow([th.epoch, f"{th.t_pos:.17g}", f"{th.t_neg:.17g}"])


def _write_selector_trace(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "harvested",
                                                "precision", "recall"])
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# benchmark

def cmd_benchmark(args) -> int:
    manifest_path = Path(args.scenario)
    if not manifest_path.exists():
        print(f"benchmark: scenario manifest not found: {manifest_path}", file=sys.stderr)
        return EXIT_FAILURE
    manifest = datasets.load_manifest(manifest_path)
    methods = [m for part in args.method for m in part.split(",")]
    for m in methods:
        if m not in METHODS:
            print(f"benchmark: unknown method {m!r}", file=sys.stderr)
            return EXIT_FAILURE
    cs = args.c if args.c else [manifest["c"]]
    seeds = [s + seed_offset() for s in _parse_seeds(args.seeds)]
    out = Path(args.out)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)

    results, failures = [], []
    for method in methods:
        for c in cs:
            for seed in seeds:
                config = _load_train_config(args.config, seed)
                cell_id = _cell_hash(manifest, method, c, seed, config)
                cell_dir = cells_dir / cell_id
                result_path = cell_dir / "result.json"
                if args.resume and result_path.exists():
                    payload = json.loads(result_path.read_text())
                else:
                    cell_dir.mkdir(parents=True, exist_ok=True)
                    try:
                        status, result = _run_single(manifest, method, c, seed,
                                                     config, cell_dir)
                        payload = {**asdict(result), "status": status}
                    except Exception as exc:  # record, keep sweeping
                        payload = {"method": method, "c": c, "seed": seed,
                                   "status": "failure", "error": str(exc)}
                    result_path.write_text(json.dumps(payload, indent=2,
                                                      sort_keys=True) + "\n")
                if payload.get("status") == "failure":
                    failures.append(payload)
                else:
                    results.append(RunResult(
                        method=payload["method"], scenario=payload["scenario"],
                        c=payload["c"], seed=payload["seed"],
                        accuracy=payload["accuracy"],
                        balanced_accuracy=payload["balanced_accuracy"],
                        n_eval=payload["n_eval"]))
    write_results_csv(out / "results.csv", results)
    _emit_tables(out, results, failures)
    print(f"benchmark: {len(results)} runs ok, {len(failures)} failed; "
          f"tables under {out}")
    return EXIT_OK if not failures else EXIT_FAILURE


def _cell_hash(manifest, method, c, seed, config) -> str:
    payload = json.dumps({"manifest": manifest, "method": method, "c": c,
                          "seed": seed, "config": config.to_dict()},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _emit_tables(out, results, failures):
    lines = []
    if results:
        table = BenchmarkTable(results)
        table.to_csv(out / "table.csv")
        try:
            lines.append(table.to_text())
        except EvaluationError as exc:
            lines.append(f"summary unavailable: {exc}\n")
    if failures:
        lines.append("failed cells:\n")
        for f in failures:
            lines.append(f"  method={f['method']} c={f['c']} seed={f['seed']}: "
                         f"{f.get('error', '?')}\n")
    (out / "table.txt").write_text("".join(lines))


# ---------------------------------------------------------------------------
# report

def cmd_report(args) -> int:
    results_dir = Path(args.results)
    results_csv = results_dir / "results.csv"
    if not results_csv.exists():
        print(f"report: no results.csv under {results_dir}", file=sys.stderr)
        return EXIT_FAILURE
    results = read_results_csv(results_csv)
    if not results:
        print("report: results.csv is empty", file=sys.stderr)
        return EXIT_FAILURE

    from . import reporting

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    written += reporting.plot_accuracy_vs_c(results, out, metric="accuracy")
    written += reporting.plot_accuracy_vs_c(results, out, metric="balanced_accuracy")
    for trace_csv in sorted(results_dir.glob("cells/*/selector_trace.csv")):
        rows = _read_selector_trace(trace_csv)
        if rows:
            name = f"selector_quality_{trace_csv.parent.name}.png"
            written.append(reporting.plot_selector_quality(rows, out / name))
    summary = out / "summary.txt"
    try:
        summary.write_text(BenchmarkTable(results).to_text())
        written.append(summary)
    except EvaluationError as exc:
        summary.write_text(f"summary unavailable: {exc}\n")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _read_selector_trace(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({"epoch": int(row["epoch"]),
                         "harvested": int(row["harvested"]),
                         "precision": float(row["precision"]),
                         "recall": float(row["recall"])})
    return rows


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="puda",
        description="Positive-unlabeled domain adaptation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a scenario manifest and splits")
    p.add_argument("--synthetic", help="JSON file with a synthetic shift spec")
    p.add_argument("--source-root")
    p.add_argument("--target-root")
    p.add_argument("--positive-class")
    p.add_argument("--negative-class")
    p.add_argument("--image-size", help="WxH, e.g. 16x16")
    p.add_argument("--mode", default="L", choices=["L", "RGB"])
    p.add_argument("--name", default="scenario")
    p.add_argument("--c", type=_positive_fraction, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run one method on one scenario")
    p.add_argument("--scenario", required=True, help="scenario manifest path")
    p.add_argument("--method", required=True, choices=list(METHODS))
    p.add_argument("--c", type=_positive_fraction, default=None,
                   help="override the manifest's label frequency")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file with TrainConfig overrides")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="sweep methods x c x seeds")
    p.add_argument("--scenario", required=True)
    p.add_argument("--method", action="append", required=True,
                   help="method name; repeat or comma-separate")
    p.add_argument("--c", type=_positive_fraction, action="append",
                   help="label frequency; repeat for several")
    p.add_argument("--seeds", default="0:5", help="'0,1,2' or '0:20'")
    p.add_argument("--config", help="JSON file with TrainConfig overrides")
    p.add_argument("--resume", action="store_true",
                   help="reuse completed cells from a previous sweep")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", help="render plots and summary from a benchmark")
    p.add_argument("--results", required=True, help="benchmark output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
