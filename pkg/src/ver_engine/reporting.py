"""Report rendering: delimited output plus matplotlib figures.

Every CLI report path emits machine-readable JSON/CSV next to PNG figures
rendered with the Agg backend, and a plain-text table on stdout.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_json(obj: dict, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_csv(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return "(empty)"
    columns = list(columns or rows[0].keys())

    def fmt(v) -> str:
        if isinstance(v, float):
            return f"{v:.4f}"
        if v is None:
            return "-"
        return str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    header = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    sep = "  ".join("-" * w for w in widths)
    body = "\n".join("  ".join(x.ljust(w) for x, w in zip(row, widths)) for row in cells)
    return f"{header}\n{sep}\n{body}"


def plot_training_curves(history: Sequence[dict], path: str | Path) -> None:
    steps = [r["step"] for r in history if "loss" in r]
    loss = [r["loss"] for r in history if "loss" in r]
    lr = [r["lr"] for r in history if "loss" in r]
    repl = [r["replacement_rate"] for r in history if "loss" in r]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].plot(steps, loss)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[1].plot(steps, lr)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("learning rate")
    axes[2].plot(steps, repl)
    axes[2].set_xlabel("step")
    axes[2].set_ylabel("replacement rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_recall_curve(recall: dict[int, float], path: str | Path) -> None:
    ks = sorted(recall)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(ks, [recall[k] for k in ks], marker="o")
    ax.set_xlabel("K")
    ax.set_ylabel("recall@K")
    ax.set_ylim(0, 1.05)
    ax.set_xscale("log")
    ax.set_xticks(ks)
    ax.set_xticklabels([str(k) for k in ks])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_latency(latencies_ms: Sequence[float], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.hist(latencies_ms, bins=min(40, max(5, len(latencies_ms) // 5)))
    ax.set_xlabel("query latency (ms)")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(rows: Sequence[dict], path: str | Path) -> None:
    """Grouped bars of overall top-1 (mean over seeds) per configuration."""
    by_name: dict[str, list[float]] = {}
    for r in rows:
        by_name.setdefault(r["name"], []).append(r["top1_overall"])
    names = list(by_name)
    means = [sum(v) / len(v) for v in by_name.values()]
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(names)), 3.4))
    ax.bar(range(len(names)), means)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=25, ha="right")
    ax.set_ylabel("top-1 (overall)")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
