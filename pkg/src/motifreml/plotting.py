"""Figures written next to the tabular outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

# no timestamps or version strings, so reruns give identical files
_META = {"png": {"Software": None}, "pdf": {"CreationDate": None, "Producer": None}}


def _save(fig, path):
    path = Path(path)
    fig.savefig(path, dpi=110, bbox_inches="tight",
                metadata=_META.get(path.suffix.lstrip("."), None))
    plt.close(fig)
    return path


def plot_activities(mean: np.ndarray, zscores, motif_ids: Sequence[str],
                    group_labels: Sequence[str], path, max_motifs: int = 40):
    """Heatmaps of group activities and their z-scores for the most variable motifs."""
    m, g = mean.shape
    spread = mean.max(axis=1) - mean.min(axis=1) if g > 1 else np.abs(mean[:, 0])
    order = np.argsort(-spread, kind="stable")[:max_motifs]
    panels = [("activity", mean[order], "RdBu_r")]
    if zscores is not None:
        panels.append(("z-score", np.asarray(zscores)[order], "PuOr_r"))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 + 1.6 * g * len(panels),
                                                      1.5 + 0.22 * order.size),
                             squeeze=False)
    for ax, (title, M, cmap) in zip(axes[0], panels):
        lim = np.nanmax(np.abs(M)) or 1.0
        im = ax.imshow(M, aspect="auto", cmap=cmap, vmin=-lim, vmax=lim)
        ax.set_xticks(range(g), labels=list(group_labels), rotation=45, ha="right")
        ax.set_yticks(range(order.size), labels=[motif_ids[i] for i in order], fontsize=7)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.8)
    return _save(fig, path)


def plot_metrics(table: pd.DataFrame, knob: str, path, method_col: str = "method"):
    """Seed-averaged metrics against a swept generator knob, one line per method."""
    metrics = [c for c in ("pcc_holdout", "pcc_U", "pcc_U_centered", "mape_sigma",
                           "mape_nu", "pcc_K") if c in table and table[c].notna().any()]
    if not metrics:
        raise ValueError("no metric columns to plot")
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.0), squeeze=False)
    methods = table[method_col].unique() if method_col in table else [None]
    for ax, metric in zip(axes[0], metrics):
        for meth in methods:
            sub = table if meth is None else table[table[method_col] == meth]
            agg = sub.groupby(knob)[metric].agg(["mean", "std"]).dropna(subset=["mean"])
            if agg.empty:
                continue
            ax.errorbar(agg.index, agg["mean"], yerr=agg["std"].fillna(0), marker="o",
                        capsize=2, label=meth)
        ax.set_xlabel(knob)
        ax.set_title(metric)
        if np.all(np.asarray(table[knob], dtype=float) > 0):
            ax.set_xscale("log")
    if methods[0] is not None:
        axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
