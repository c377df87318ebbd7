"""Static PNG plots for training histories, sweeps and pruning diagnostics."""

import logging
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger("slim_distill.plots")


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    logger.info(f"Wrote plot {path}")
    return path


def plot_history(histories: Mapping[str, Sequence[dict]], metric: str, path: Path) -> Path:
    """One line per stage of ``metric`` against epoch; stages are drawn end to end."""
    fig, ax = plt.subplots(figsize=(8, 5))
    offset = 0
    for stage, history in histories.items():
        points = [(offset + h["epoch"], h[metric]) for h in history if metric in h]
        if points:
            xs, ys = zip(*points)
            ax.plot(xs, ys, marker="o", markersize=3, label=stage)
        offset += len(history)
    ax.set_xlabel("Epoch")
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} per epoch")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="best")
    return _save(fig, path)


def plot_sweep(parameter: str, rows: Sequence[dict], metrics: Sequence[str], path: Path) -> Path:
    """Proxy metric(s) against the swept parameter value."""
    fig, ax = plt.subplots(figsize=(8, 5))
    numeric = all(isinstance(r["value"], (int, float)) for r in rows)
    xs = [r["value"] for r in rows] if numeric else list(range(len(rows)))
    for metric in metrics:
        ys = [r.get(metric, np.nan) for r in rows]
        ax.plot(xs, ys, marker="o", label=metric)
    if not numeric:
        ax.set_xticks(xs, [str(r["value"]) for r in rows])
    ax.set_xlabel(parameter)
    ax.set_ylabel("metric")
    ax.set_title(f"Effect of {parameter}")
    ax.legend(loc="best")
    return _save(fig, path)


def plot_ratio_sweep(rows: Sequence[dict], metric: str, path: Path) -> Path:
    """Metric and relative MACs against pruning ratio, on twin axes."""
    x = np.array([r["value"] for r in rows])
    y1 = np.array([r.get(metric, np.nan) for r in rows])
    macs = np.array([r["macs"] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(8, 6))
    ax.set_xlabel("Pruning ratio")
    ax.set_ylabel(metric)
    ax.plot(x, y1, marker="o", label=metric)
    ax2 = ax.twinx()
    ax2.set_ylabel("MACs (relative to base)")
    ax2.plot(x, macs / rows[0]["base_macs"], marker="o", color="tab:orange", label="MACs")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax2.legend(lines + lines2, labels + labels2, loc="best")
    ax.set_title(f"{metric} and MACs against pruning ratio")
    return _save(fig, path)


def plot_gamma_hist(before: Sequence[float], after: Sequence[float], path: Path, bins: int = 50) -> Path:
    fig, ax = plt.subplots(figsize=(8, 5))
    values = np.abs(np.concatenate([np.asarray(before, dtype=float), np.asarray(after, dtype=float)]))
    edges = np.linspace(0, max(values.max(initial=0.0), 1e-6), bins + 1)
    ax.hist(np.abs(before), bins=edges, alpha=0.6, label="before sparse training")
    ax.hist(np.abs(after), bins=edges, alpha=0.6, label="after sparse training")
    ax.set_xlabel("|gamma|")
    ax.set_ylabel("channels")
    ax.legend(loc="best")
    return _save(fig, path)


def plot_channel_widths(original: Mapping[str, int], kept: Mapping[str, int], path: Path) -> Path:
    layers = list(original)
    x = np.arange(len(layers))
    fig, ax = plt.subplots(figsize=(max(8, 0.5 * len(layers)), 5))
    ax.bar(x - 0.2, [original[k] for k in layers], width=0.4, label="base")
    ax.bar(x + 0.2, [kept.get(k, original[k]) for k in layers], width=0.4, label="pruned")
    ax.set_xticks(x, layers, rotation=60, ha="right")
    ax.set_ylabel("channels")
    ax.set_title("Channels per layer")
    ax.legend(loc="best")
    return _save(fig, path)
