"""Figures written next to the delimited reports."""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from prefilter_rerank.calibration import CalibrationReport  # noqa: E402
from prefilter_rerank.metrics import MetricReport  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# Stripping the "Software" tag keeps PNG bytes stable across matplotlib builds.
_PNG_META = {"Software": None}


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return os.fspath(path)


def plot_calibration(report: CalibrationReport, path) -> str:
    """Precision, recall and F1 against the threshold, selection marked."""
    ts = [r.threshold for r in report.rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(ts, [r.precision for r in report.rows], marker=".", label="precision")
        ax.plot(ts, [r.recall for r in report.rows], marker=".", label="recall")
        ax.plot(ts, [r.f1 for r in report.rows], marker="o", lw=2, label="F1")
        ax.axvline(report.selected.value, color="k", ls="--", lw=1)
        ax.annotate(f"t={report.selected.value:g}", (report.selected.value, 1.02),
                    ha="center", va="bottom", fontsize=8)
        ax.set_xlim(-0.02, 1.02)
        ax.set_ylim(0, 1.1)
        ax.set_xlabel("threshold")
        ax.set_ylabel("score")
        ax.legend(loc="best", frameon=False)
        return _save(fig, path)


def plot_retention(
    thresholds: Sequence[float], retained: Sequence[int], total: int, path,
    selected: float | None = None,
) -> str:
    """Passages kept (N') as the threshold rises, against the input size N."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.step(thresholds, retained, where="post", label="retained (N')")
        ax.axhline(total, color="grey", ls=":", lw=1, label="input (N)")
        if selected is not None:
            ax.axvline(selected, color="k", ls="--", lw=1)
        ax.set_xlabel("threshold")
        ax.set_ylabel("passages")
        ax.set_ylim(0, max(total, 1) * 1.05)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_ndcg_comparison(reports: Mapping[str, MetricReport], path) -> str:
    """Per-query nDCG bars for each run, plus the mean."""
    names = list(reports)
    qids = sorted({q for r in reports.values() for q in r.per_query})
    labels = qids + ["mean"]
    width = 0.8 / max(len(names), 1)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(4.5, 0.35 * len(labels) * max(len(names), 1)), 3.0))
        for i, name in enumerate(names):
            r = reports[name]
            vals = [r.per_query.get(q, 0.0) for q in qids] + [r.mean or 0.0]
            xs = [j + (i - (len(names) - 1) / 2) * width for j in range(len(labels))]
            ax.bar(xs, vals, width=width, label=name)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=60, ha="right")
        k = next(iter(reports.values())).k if reports else 10
        ax.set_ylabel(f"nDCG@{k}")
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, loc="lower center", bbox_to_anchor=(0.5, 1.0),
                  ncol=max(len(reports), 1))
        return _save(fig, path)
