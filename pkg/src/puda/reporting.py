"""Figure rendering for benchmark outputs. File output only; plots land next
to the delimited results they were computed from."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import aggregate


def plot_accuracy_vs_c(results, out_dir, metric: str = "accuracy") -> list:
    """One line plot per scenario: metric vs label frequency, one line per
    method with multi-seed error bars. Returns the written paths."""
    out_dir = Path(out_dir)
    by_scenario = defaultdict(lambda: defaultdict(list))
    for r in results:
        by_scenario[r.scenario][(r.method, r.c)].append(getattr(r, metric))
    paths = []
    for scenario, groups in sorted(by_scenario.items()):
        methods = sorted({m for m, _ in groups})
        fig, ax = plt.subplots(figsize=(5.5, 4))
        for method in methods:
            cs = sorted(c for m, c in groups if m == method)
            means, stds = [], []
            for c in cs:
                values = groups[(method, c)]
                if len(values) >= 2:
                    mean, std = aggregate(values)
                else:
                    mean, std = values[0], 0.0
                means.append(mean)
                stds.append(std)
            ax.errorbar(cs, means, yerr=stds, marker="o", capsize=3, label=method)
        ax.set_xlabel("label frequency c")
        ax.set_ylabel(metric.replace("_", " "))
        ax.set_title(scenario)
        ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{metric}_vs_c_{_slug(scenario)}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_selector_quality(trace_rows, out_path) -> Path:
    """Harvest precision and recall per epoch for one run."""
    out_path = Path(out_path)
    epochs = [row["epoch"] for row in trace_rows]
    precision = [row["precision"] for row in trace_rows]
    recall = [row["recall"] for row in trace_rows]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(epochs, precision, marker="o", label="precision")
    ax.plot(epochs, recall, marker="s", label="recall")
    ax.set_xlabel("epoch")
    ax.set_ylabel("harvest quality")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "-" for ch in name)
