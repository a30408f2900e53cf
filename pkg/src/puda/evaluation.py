"""Metrics and the multi-seed aggregation protocol.

Per-run accuracy and balanced accuracy, sample mean/std over seeds, Welch
two-sided significance between methods, and the cross-scenario summary score
(one point for the best method per cell, shared on statistical tie, half a
point for the runner-up).
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps


class EvaluationError(ValueError):
    """Raised on malformed metric inputs."""


@dataclass
class RunResult:
    method: str
    scenario: str
    c: float
    seed: int
    accuracy: float
    balanced_accuracy: float
    n_eval: int


def accuracy(predictions, truths) -> float:
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if predictions.shape != truths.shape:
        raise EvaluationError("accuracy: length mismatch")
    if predictions.size == 0:
        raise EvaluationError("accuracy: empty inputs")
    return float(np.mean(predictions == truths))


def balanced_accuracy(predictions, truths) -> float:
    """(TPR + TNR) / 2; requires both classes in the truths."""
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if predictions.shape != truths.shape:
        raise EvaluationError("balanced_accuracy: length mismatch")
    pos = truths == 1
    neg = truths == 0
    if not pos.any() or not neg.any():
        raise EvaluationError("balanced_accuracy: truths contain a single class")
    tpr = float(np.mean(predictions[pos] == 1))
    tnr = float(np.mean(predictions[neg] == 0))
    return 0.5 * (tpr + tnr)


def aggregate(values) -> tuple:
    """Sample mean and sample standard deviation (n-1 denominator)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise EvaluationError("aggregate: need at least 2 runs")
    if np.ptp(values) == 0.0:  # exactly tied runs: std is 0, not rounding noise
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1))


def significance(mean_a: float, std_a: float, n_a: int,
                 mean_b: float, std_b: float, n_b: int) -> float:
    """Two-sided Welch t-test p-value from summary statistics.

    Degenerate case: both variances zero and equal means gives p = 1
    (defined tie); zero variances with different means gives p = 0.
    """
    if n_a < 2 or n_b < 2:
        raise EvaluationError("significance: need n >= 2 in both samples")
    if std_a < 0 or std_b < 0:
        raise EvaluationError("significance: negative standard deviation")
    va = std_a ** 2 / n_a
    vb = std_b ** 2 / n_b
    if va + vb == 0.0:
        return 1.0 if mean_a == mean_b else 0.0
    t = (mean_a - mean_b) / np.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (n_a - 1) + vb ** 2 / (n_b - 1))
    return float(2.0 * sps.t.sf(abs(t), df))


@dataclass
class MethodStats:
    method: str
    mean: float
    std: float
    n: int


def summary_score(cells: dict, p_threshold: float = 0.05) -> dict:
    """Per-method summary score over a mapping cell -> list of MethodStats.

    Per cell: the best mean earns 1 point, as does every method not
    significantly different from it (Welch p >= p_threshold); among the
    methods left without a point, the best mean earns 0.5.
    """
    totals: dict = defaultdict(float)
    for key, row in cells.items():
        if len(row) < 2:
            raise EvaluationError(f"summary_score: cell {key} has fewer than 2 methods")
        ranked = sorted(row, key=lambda msd: msd.mean, reverse=True)
        best = ranked[0]
        winners = [best.method]
        for other in ranked[1:]:
            p = significance(best.mean, best.std, best.n, other.mean, other.std, other.n)
            if p >= p_threshold:
                winners.append(other.method)
        for method in winners:
            totals[method] += 1.0
        runners_up = [msd for msd in ranked if msd.method not in winners]
        if runners_up:
            totals[runners_up[0].method] += 0.5
        for msd in row:
            totals.setdefault(msd.method, 0.0)
    return dict(totals)


class BenchmarkTable:
    """Aggregated mean/std per (method, scenario, c) plus summary scores."""

    def __init__(self, results, metric: str = "accuracy"):
        self.metric = metric
        self.results = list(results)
        grouped = defaultdict(list)
        for r in self.results:
            grouped[(r.method, r.scenario, r.c)].append(getattr(r, metric))
        self.aggregates = {}
        for key, values in grouped.items():
            mean, std = aggregate(values)
            self.aggregates[key] = (mean, std, len(values))

    def methods(self):
        return sorted({r.method for r in self.results})

    def cells(self) -> dict:
        """(scenario, c) -> list of MethodStats; raises listing missing cells."""
        out = defaultdict(list)
        keys = sorted({(r.scenario, r.c) for r in self.results})
        missing = []
        for scenario, c in keys:
            for method in self.methods():
                agg = self.aggregates.get((method, scenario, c))
                if agg is None:
                    missing.append((method, scenario, c))
                    continue
                mean, std, n = agg
                out[(scenario, c)].append(MethodStats(method, mean, std, n))
        if missing:
            raise EvaluationError(f"missing benchmark cells: {missing}")
        return dict(out)

    def summary_scores(self, p_threshold: float = 0.05) -> dict:
        return summary_score(self.cells(), p_threshold=p_threshold)

    def to_text(self) -> str:
        """Human-readable aligned table with one row per (scenario, c)."""
        methods = self.methods()
        scores = self.summary_scores()
        header = ["scenario", "c"] + methods
        rows = [header]
        for (scenario, c), row in sorted(self.cells().items()):
            stats_by_method = {msd.method: msd for msd in row}
            cells = [scenario, f"{c:g}"]
            for m in methods:
                msd = stats_by_method[m]
                cells.append(f"{100 * msd.mean:.2f}±{100 * msd.std:.1f}")
            rows.append(cells)
        rows.append(["summary", ""] + [f"{scores[m]:g}" for m in methods])
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
                 for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "scenario", "c", "mean", "std", "n_runs"])
            for (method, scenario, c), (mean, std, n) in sorted(self.aggregates.items()):
                writer.writerow([method, scenario, f"{c:.17g}",
                                 f"{mean:.17g}", f"{std:.17g}", n])


def write_results_csv(path, results):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "scenario", "c", "seed", "accuracy",
                         "balanced_accuracy", "n_eval"])
        for r in results:
            writer.writerow([r.method, r.scenario, f"{r.c:.17g}", r.seed,
                             f"{r.accuracy:.17g}", f"{r.balanced_accuracy:.17g}",
                             r.n_eval])


def read_results_csv(path):
    results = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            results.append(RunResult(
                method=row["method"], scenario=row["scenario"], c=float(row["c"]),
                seed=int(row["seed"]), accuracy=float(row["accuracy"]),
                balanced_accuracy=float(row["balanced_accuracy"]),
                n_eval=int(row["n_eval"])))
    return results
