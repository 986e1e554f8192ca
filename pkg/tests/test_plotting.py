import numpy as np

from hpcdetect.evaluation import ReportRow, roc
from hpcdetect.mimicry import SweepRow
from hpcdetect.pipeline import GranularityRow
from hpcdetect.plotting import plot_auc_bars, plot_granularity, plot_padding_sweep, plot_roc_curves

PNG = b"\x89PNG\r\n\x1a\n"


def _is_png(path):
    return path.read_bytes()[:8] == PNG


def test_roc_and_bars(tmp_path):
    r = roc([0.1, 0.2, 0.3], [0.25, 0.4])
    p = plot_roc_curves({"AM-1 stage1": (r.fpr, r.tpr, r.auc)}, tmp_path / "sub" / "roc.png", "t")
    assert _is_png(p)
    rows = [ReportRow("A-0", "stage1", "temporal", 0.9), ReportRow("A-0", "rop", "nontemporal", 0.6),
            ReportRow("M-1", "stage1", "temporal", 0.8)]
    assert _is_png(plot_auc_bars(rows, tmp_path / "bars.png"))


def test_padding_and_granularity(tmp_path):
    rows = [SweepRow(c, 0.0, m, 0.1, a) for c, m, a in ((0, 0.3, 0.99), (10, 0.1, 0.8), (20, 0.4, 0.95))]
    scores = {r.count: np.random.default_rng(r.count).normal(r.median, 0.05, 20) for r in rows}
    assert _is_png(plot_padding_sweep(rows, scores, tmp_path / "pad.png", "seg"))
    assert _is_png(plot_padding_sweep(rows, {}, tmp_path / "pad2.png"))
    g = [GranularityRow(s, st, a) for s in (64000, 512000) for st, a in (("stage1", 0.9), ("rop", 0.6))]
    assert _is_png(plot_granularity(g, tmp_path / "g.png"))
