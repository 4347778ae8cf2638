"""Figure rendering for the report-producing commands.

Each reporting command writes a delimited text file as the primary output
and, when figures are enabled, a PNG alongside it with the same stem.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _parse_kv_line(line: str) -> dict[str, str]:
    out = {}
    for tok in line.split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            out[k] = v
    return out


def save_training_curves(metric_lines: list[str], path: Path):
    """Loss/accuracy per epoch for the train and test splits."""
    series: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for line in metric_lines:
        kv = _parse_kv_line(line)
        if "split" not in kv:
            continue
        epoch = int(kv["epoch"])
        for metric in ("loss", "acc"):
            if metric in kv:
                series.setdefault((kv["split"], metric), []).append((epoch, float(kv[metric])))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for (split, metric), points in sorted(series.items()):
        ax = axes[0] if metric == "loss" else axes[1]
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker="o", markersize=3, label=split)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("top-1 accuracy")
    for ax in axes:
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_figure(results: list[dict], path: Path):
    """Median latency per case: float reference vs packed vs scaled baseline."""
    cases = [r["case"] for r in results]
    keys = [("float_ref_median_s", "float conv (reference)"),
            ("bitconv_median_s", "xnor+popcount"),
            ("scaled_median_s", "xnor+popcount + channel scales")]
    x = range(len(cases))
    width = 0.27
    fig, ax = plt.subplots(figsize=(7, 3.4))
    for i, (key, label) in enumerate(keys):
        ax.bar([xi + (i - 1) * width for xi in x], [r[key] * 1e3 for r in results],
               width=width, label=label)
    ax.set_xticks(list(x))
    ax.set_xticklabels(cases, fontsize=8)
    ax.set_ylabel("median latency (ms)")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_stats_figure(stats: dict, path: Path):
    """Per-layer saturation/mismatch fractions and mean positive fraction."""
    import numpy as np

    layers = list(stats)
    sat = [stats[l].saturation for l in layers]
    mis = [stats[l].mismatch for l in layers]
    pos = [float(np.mean(stats[l].fraction_positive)) for l in layers]
    x = range(len(layers))
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * len(layers) + 2), 3.4))
    ax.bar([xi - 0.22 for xi in x], sat, width=0.22, label="|v| > 1 (saturation)")
    ax.bar(x, mis, width=0.22, label="|v| < 1 (mismatch)")
    ax.bar([xi + 0.22 for xi in x], pos, width=0.22, label="mean fraction positive")
    ax.set_xticks(list(x))
    ax.set_xticklabels(layers, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
