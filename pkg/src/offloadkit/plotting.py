"""Figures for CLI reports. Rendered headless with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GIB = 2**30
MODE_STYLE = {"baseline": dict(color="tab:red", marker="s"), "optimized": dict(color="tab:blue", marker="o")}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(rows: Sequence, limit_bytes: float, path) -> Path:
    """Peak GiB against context length or batch size, one line per mode."""
    kind = rows[0].sweep
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode in sorted({r.mode for r in rows}):
        sel = [r for r in rows if r.mode == mode]
        x = [r.context_length if kind == "context" else r.batch_size for r in sel]
        ax.plot(x, [r.peak_gib for r in sel], label=mode, **MODE_STYLE.get(mode, {}))
    if limit_bytes != float("inf"):
        ax.axhline(limit_bytes / GIB, color="k", ls="--", lw=1, label="limit")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("context length (tokens)" if kind == "context" else "batch size")
    ax.set_ylabel("peak host memory (GiB)")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_breakdown(breakdowns: dict, path) -> Path:
    """Stacked bars of peak components per mode."""
    parts = ["param_pool", "pinned_overhead", "grad_flat_buffer", "overflow_transient", "misc_static",
             "activation_checkpoints"]
    fig, ax = plt.subplots(figsize=(5, 4))
    modes = list(breakdowns)
    bottom = [0.0] * len(modes)
    for part in parts:
        vals = [getattr(breakdowns[m], part) / GIB for m in modes]
        ax.bar(modes, vals, bottom=bottom, label=part.replace("_", " "))
        bottom = [b + v for b, v in zip(bottom, vals)]
    for i, m in enumerate(modes):
        ax.text(i, bottom[i], f"{breakdowns[m].peak_total / GIB:.2f}", ha="center", va="bottom")
    ax.set_ylabel("GiB")
    ax.legend(fontsize=7, loc="upper right")
    return _save(fig, path)


def plot_latency(sizes: Sequence[int], series: dict[str, Sequence[float]], path, xlabel: str, ylabel: str = "latency (ms)") -> Path:
    """Log-log latency curves keyed by label."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in series.items():
        ax.plot(sizes, ys, marker="o", label=label)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    return _save(fig, path)


def plot_pool(stats: dict, path) -> Path:
    """Capacity vs peak live bytes for each pool mode."""
    modes = list(stats)
    fig, ax = plt.subplots(figsize=(5, 4))
    xs = range(len(modes))
    ax.bar([x - 0.2 for x in xs], [stats[m]["capacity_bytes"] / GIB for m in modes], width=0.4, label="capacity")
    ax.bar([x + 0.2 for x in xs], [stats[m]["peak_live_bytes"] / GIB for m in modes], width=0.4, label="peak live")
    ax.set_xticks(list(xs), modes)
    ax.set_ylabel("GiB")
    ax.legend()
    return _save(fig, path)
