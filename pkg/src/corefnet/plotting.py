"""Figures written next to the text reports (Agg backend, PNG files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_training_curve(log, path, title="training"):
    """Mean train loss (left axis) and dev link F1 (right axis) per epoch."""
    epochs = [r.epoch for r in log]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(epochs, [r.train_loss for r in log], color="tab:blue", marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    ax.set_yscale("log")
    twin = ax.twinx()
    twin.plot(epochs, [r.dev_f1 for r in log], color="tab:red", marker="s", ms=3)
    twin.set_ylabel("dev link F1", color="tab:red")
    twin.set_ylim(0.0, 1.02)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_ablation(rows, path):
    """Grouped bars of link P/R/F1 per ablation variant."""
    rows = [r for r in rows if r.report is not None]
    names = [r.method for r in rows]
    width = 0.26
    fig, ax = plt.subplots(figsize=(max(5, 1.5 * len(rows)), 3.8))
    for k, (label, key) in enumerate((("F1", "link_f1"), ("Precision", "link_precision"),
                                      ("Recall", "link_recall"))):
        xs = [i + (k - 1) * width for i in range(len(rows))]
        ax.bar(xs, [100 * getattr(r.report, key) for r in rows], width, label=label)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=15, ha="right")
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_benchmark(results: dict, path):
    """Tokens/second per model as a min..max range around the median."""
    names = list(results)
    med = [results[n].median for n in names]
    lo = [m - results[n].min for n, m in zip(names, med)]
    hi = [results[n].max - m for n, m in zip(names, med)]
    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(names)), 3.4))
    ax.bar(names, med, yerr=[lo, hi], capsize=6, color="tab:green")
    ax.set_ylabel("tokens / second")
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_stage_timings(timings: dict, path):
    """Horizontal bars of mean per-stage milliseconds."""
    stages = list(timings)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.barh(stages, [timings[s] for s in stages], color="tab:purple")
    ax.invert_yaxis()
    ax.set_xlabel("ms per document")
    return _save(fig, path)
