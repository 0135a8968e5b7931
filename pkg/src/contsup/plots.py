"""Figures rendered from run records only; identical records give identical PNG bytes."""

from __future__ import annotations

import os
import statistics
from collections import defaultdict
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ConfigError  # noqa: E402

PLOT_KINDS = ("error_vs_K", "error_vs_memory", "info_curve", "adapter_weight_heatmap")

_PNG_META = {"Software": None}


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def _ok(records):
    return [r for r in records if r.status == "ok" and r.final_test_error is not None]


def _mode(r) -> str:
    return r.config["context"]


def _grouped(records, x_of):
    """mode -> sorted [(x, mean error %, n)] averaging seeds at equal x."""
    acc = defaultdict(lambda: defaultdict(list))
    for r in _ok(records):
        acc[_mode(r)][x_of(r)].append(100.0 * r.final_test_error)
    return {m: [(x, statistics.fmean(v), len(v)) for x, v in sorted(pts.items())] for m, pts in sorted(acc.items())}


def error_vs_K(records, path: str) -> dict:
    """Test error against module count, one polyline per context mode. Returns the plotted series."""
    series = _grouped(records, lambda r: r.config["K"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode, pts in series.items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("K (modules)")
    ax.set_ylabel("test error (%)")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    return series


def error_vs_memory(records, path: str) -> dict:
    """Test error against analytic peak training memory; each mode's points linked in K order."""
    acc = defaultdict(lambda: defaultdict(list))
    for r in _ok(records):
        if r.memory:
            acc[_mode(r)][(r.config["K"], r.memory["peak_training_bytes"])].append(100.0 * r.final_test_error)
    series = {
        m: [(mem / 2**20, statistics.fmean(v), K) for (K, mem), v in sorted(pts.items())] for m, pts in sorted(acc.items())
    }
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode, pts in series.items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
        for x, y, K in pts:
            ax.annotate(f"K={K}", (x, y), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("peak training memory (MiB, analytic)")
    ax.set_ylabel("test error (%)")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    return series


def info_curve(records, path: str) -> dict:
    """Probe estimate of I(h, y) against module depth, one line per run."""
    series = {}
    for r in records:
        if not r.info_curve:
            continue
        label = f"{_mode(r)} s{r.seed}"
        series[label] = [(e["module_index"], e["estimate_nats"]) for e in r.info_curve]
    if not series:
        raise ConfigError("no record carries an info curve (run probe-info first)")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, pts in sorted(series.items()):
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("module l")
    ax.set_ylabel("I(h_l, y) estimate (nats)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
    return series


def adapter_weight_heatmap(record, path: str) -> np.ndarray:
    """Mean |w| of each (source, destination) adapter; blank where no adapter exists."""
    if not record.adapter_weights:
        raise ConfigError("record has no adapter weights")
    grid = np.array([[np.nan if v is None else v for v in row] for row in record.adapter_weights], dtype=float)
    if np.all(np.isnan(grid)):
        raise ConfigError(f"run {record.run_dir} has no context adapters")
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(np.ma.masked_invalid(grid), cmap="viridis", origin="upper")
    ax.set_xlabel("destination module")
    ax.set_ylabel("source feature (0 = input)")
    fig.colorbar(im, ax=ax, label="mean |w|")
    fig.tight_layout()
    _save(fig, path)
    return grid


def plot(records: Sequence, kind: str, out_dir: str) -> list[str]:
    """Render ``kind`` into ``out_dir``; heatmaps produce one file per record with adapters."""
    if kind not in PLOT_KINDS:
        raise ConfigError(f"plot kind must be one of {PLOT_KINDS}")
    if kind == "adapter_weight_heatmap":
        paths = []
        for r in records:
            if r.adapter_weights and any(v is not None for row in r.adapter_weights for v in row):
                p = os.path.join(out_dir, f"adapter_weights_{os.path.basename(r.run_dir)}.png")
                adapter_weight_heatmap(r, p)
                paths.append(p)
        return paths
    path = os.path.join(out_dir, f"{kind}.png")
    {"error_vs_K": error_vs_K, "error_vs_memory": error_vs_memory, "info_curve": info_curve}[kind](records, path)
    return [path]
