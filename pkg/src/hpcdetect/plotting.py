"""Figures written next to the CSV reports.

Every function takes already-computed results and a destination path; none of
them compute anything the CSVs do not already contain.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MODES, ReportRow, roc  # noqa: E402
from .trace_model import StageLabel  # noqa: E402

STAGE_COLORS = {"rop": "tab:gray", "stage1": "tab:red", "stage2": "tab:blue"}

_RC = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def save_figure(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_roc_curves(curves: Mapping[str, tuple[np.ndarray, np.ndarray, float]],
                    path: str | Path, title: str = "") -> Path:
    """``curves`` maps a legend label to (fpr, tpr, auc)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 4.2))
        for label, (fpr, tpr, a) in curves.items():
            stage = label.split()[-1]
            ax.plot(fpr, tpr, label=f"{label} (AUC {a:.3f})",
                    color=STAGE_COLORS.get(stage))
        ax.plot([0, 1], [0, 1], ls=":", color="k", lw=0.8)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        return save_figure(fig, path)


def plot_auc_bars(rows: Sequence[ReportRow], path: str | Path) -> Path:
    sets = sorted({r.set for r in rows})
    combos = [(m, s.token) for m in MODES for s in (StageLabel.ROP, StageLabel.STAGE1, StageLabel.STAGE2)
              if any(r.mode == m and r.stage == s.token for r in rows)]
    lookup = {(r.set, r.mode, r.stage): r.auc for r in rows}
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(sets), 3.6))
        width = 0.8 / max(1, len(combos))
        x = np.arange(len(sets))
        for i, (mode, stage) in enumerate(combos):
            vals = [lookup.get((s, mode, stage), np.nan) for s in sets]
            ax.bar(x + i * width - 0.4 + width / 2, vals, width,
                   color=STAGE_COLORS[stage], alpha=1.0 if mode == "temporal" else 0.45,
                   label=f"{mode} {stage}")
        ax.set_xticks(x)
        ax.set_xticklabels(sets)
        ax.set_ylim(0, 1.0)
        ax.set_ylabel("AUC")
        ax.legend(ncol=2, loc="lower right")
        return save_figure(fig, path)


def experiment_figures(out_dir: str | Path, runs, report: Sequence[ReportRow]) -> list[Path]:
    out_dir = Path(out_dir)
    paths = [plot_auc_bars(report, out_dir / "auc_by_set.png")]
    for mode in MODES:
        for r in [r for r in runs if r.mode == mode]:
            curves = {}
            for stage in (StageLabel.ROP, StageLabel.STAGE1, StageLabel.STAGE2):
                mal = r.stage_scores(stage)
                if mal.size:
                    res = roc(r.clean_scores, mal)
                    curves[f"{r.events.label} {stage.token}"] = (res.fpr, res.tpr, res.auc)
            if curves:
                paths.append(plot_roc_curves(
                    curves, out_dir / f"roc_{r.events.label}_{mode}.png",
                    title=f"{r.events.label} {mode} (N={r.n})"))
    return paths


def plot_padding_sweep(rows, scores: Mapping[int, np.ndarray], path: str | Path,
                       segment_name: str = "") -> Path:
    """Box plots of target-stage anomaly scores per pad count, AUC on a twin axis."""
    counts = [r.count for r in rows]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(4.5, 0.55 * len(counts) + 2), 3.8))
        data = [scores[c] for c in counts] if scores else None
        pos = np.arange(len(counts))
        if data:
            ax.boxplot(data, positions=pos, widths=0.6, whis=1.5,
                       medianprops={"color": "tab:red"}, flierprops={"marker": "+", "markersize": 3})
        else:
            ax.plot(pos, [r.median for r in rows], "o-", color="tab:red")
        ax.set_xticks(pos)
        ax.set_xticklabels([str(c) for c in counts], rotation=45)
        ax.set_xlabel(f"inserted segments{f' ({segment_name})' if segment_name else ''}")
        ax.set_ylabel("anomaly score")
        ax2 = ax.twinx()
        ax2.plot(pos, [r.auc for r in rows], "s--", color="k", ms=3, label="AUC")
        ax2.set_ylabel("AUC")
        ax2.grid(False)
        ax2.legend(loc="upper right")
        return save_figure(fig, path)


def plot_granularity(rows, path: str | Path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.8, 3.6))
        for stage in ("rop", "stage1", "stage2"):
            pts = sorted((r.epoch_instructions, r.auc) for r in rows if r.stage == stage)
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, "o-", color=STAGE_COLORS[stage], label=stage)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("instructions per epoch")
        ax.set_ylabel("AUC")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower left")
        return save_figure(fig, path)
