"""Metric-vs-SNR figures from a report, with error bars over seeds."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import LEARNED_METHODS  # noqa: E402
from .errors import PlotError  # noqa: E402

LABELS = {
    "cosc": "Co-SC",
    "cosc_nofusion": "Co-SC w/o fusion",
    "dls": "DL-S",
    "digital": "JPEG+LDPC+BPSK",
    "softcast": "SoftCast",
}
FIGURES = (
    ("feature_mse", "Feature MSE", "mse_vs_snr.png", LEARNED_METHODS),
    ("rank1", "Rank-1 accuracy", "rank1_vs_snr.png", None),
    ("mAP", "mAP", "map_vs_snr.png", None),
)


def missing_cells(rows, methods=None, snr_grid=None, seeds=None) -> list[tuple]:
    methods = methods or sorted({r["method"] for r in rows})
    snr_grid = snr_grid or sorted({float(r["snr_db"]) for r in rows})
    seeds = seeds or sorted({int(r["seed"]) for r in rows})
    have = {(r["method"], float(r["snr_db"]), int(r["seed"])) for r in rows}
    return [(m, float(s), int(k)) for m in methods for s in snr_grid for k in seeds
            if (m, float(s), int(k)) not in have]


def plot_report(rows, out_dir, methods=None, snr_grid=None, seeds=None) -> list[Path]:
    """Write the MSE, rank-1 and mAP curves; raises PlotError on an empty or incomplete report.

    The MSE figure covers the learned methods only and is skipped when none are present.
    """
    rows = list(rows)
    if not rows:
        raise PlotError("report is empty")
    gaps = missing_cells(rows, methods, snr_grid, seeds)
    if gaps:
        raise PlotError(f"report is missing {len(gaps)} (method, snr, seed) cells: {gaps[:10]}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = methods or [m for m in LABELS if any(r["method"] == m for r in rows)]
    grid = sorted({float(r["snr_db"]) for r in rows})
    paths = []
    for key, ylabel, fname, only in FIGURES:
        shown = [m for m in methods if only is None or m in only]
        if not shown:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.6))
        for m in shown:
            mean, std = [], []
            for s in grid:
                vals = np.array([float(r[key]) for r in rows if r["method"] == m and float(r["snr_db"]) == s],
                                dtype=float)
                vals = vals[np.isfinite(vals)]
                mean.append(vals.mean() if vals.size else np.nan)
                std.append(vals.std() if vals.size else np.nan)
            ax.errorbar(grid, mean, yerr=std, marker="o", capsize=3, label=LABELS.get(m, m))
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel(ylabel)
        ax.set_xlim(min(grid) - 1, max(grid) + 1)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / fname
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
