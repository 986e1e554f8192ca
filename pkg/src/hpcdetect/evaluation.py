"""ROC curves, AUC, operating points and exploit-level alerting."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .trace_model import StageLabel

MODES = ("nontemporal", "temporal")


def fmt(x: float) -> str:
    """Shortest round-trip float text; keeps report CSVs byte-stable."""
    return repr(float(x))


@dataclass(frozen=True)
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc(clean_scores: Sequence[float], mal_scores: Sequence[float]) -> RocResult:
    """ROC of anomaly scores (higher means more anomalous).

    Thresholds sweep every distinct score from high to low. Equal scores form
    a single step, drawn as a diagonal segment, so the trapezoid area equals
    P(mal > clean) + P(mal == clean) / 2.
    """
    clean = np.asarray(clean_scores, dtype=float).ravel()
    mal = np.asarray(mal_scores, dtype=float).ravel()
    if clean.size == 0 or mal.size == 0:
        raise ValueError("both score lists must be non-empty")
    scores = np.concatenate([mal, clean])
    is_mal = np.concatenate([np.ones(mal.size), np.zeros(clean.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_mal = scores[order], is_mal[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.diff(scores) != 0)
    ends = np.append(ends, scores.size - 1)
    tp = np.cumsum(is_mal)[ends]
    fp = (ends + 1) - tp
    tpr = np.concatenate([[0.0], tp / mal.size])
    fpr = np.concatenate([[0.0], fp / clean.size])
    thresholds = np.concatenate([[np.inf], scores[ends]])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(fpr, tpr, thresholds, auc)


def auc(clean_scores, mal_scores) -> float:
    return roc(clean_scores, mal_scores).auc


def tpr_at_fpr(result: RocResult, fpr_budget: float) -> tuple[float, float]:
    """Best TPR reachable without exceeding ``fpr_budget``, and its threshold."""
    if not 0.0 <= fpr_budget <= 1.0:
        raise ValueError("fpr_budget must lie in [0, 1]")
    ok = np.flatnonzero(result.fpr <= fpr_budget + 1e-15)
    best = ok[np.argmax(result.tpr[ok])]
    return float(result.tpr[best]), float(result.thresholds[best])


@dataclass(frozen=True)
class DetectionPolicy:
    threshold: float
    window: int = 20
    min_flagged: int = 3

    def __post_init__(self):
        if not 1 <= self.min_flagged <= self.window:
            raise ValueError("need 1 <= min_flagged <= window")


@dataclass(frozen=True)
class Alert:
    start: int  # first epoch position, inclusive
    end: int  # exclusive
    flagged: int


def detect_exploit(scores: Sequence[float], policy: DetectionPolicy) -> list[Alert]:
    """Alert on any window of ``policy.window`` epochs holding at least
    ``policy.min_flagged`` scores above the threshold; overlapping alerts merge."""
    flags = np.asarray(scores, dtype=float) > policy.threshold
    n = flags.size
    if n == 0:
        return []
    w = min(policy.window, n)
    csum = np.concatenate([[0], np.cumsum(flags)])
    counts = csum[w:] - csum[:-w]
    hits = np.flatnonzero(counts >= policy.min_flagged)
    alerts: list[Alert] = []
    for s in hits:
        e = s + w
        if alerts and s < alerts[-1].end:
            prev = alerts[-1]
            alerts[-1] = Alert(prev.start, e, 0)
        else:
            alerts.append(Alert(int(s), int(e), 0))
    return [Alert(a.start, a.end, int(flags[a.start:a.end].sum())) for a in alerts]


def alert_probability(p: float, window: int, k: int) -> float:
    """P(at least k of ``window`` independent epochs flagged), per-epoch rate p."""
    below = sum(math.comb(window, i) * p ** i * (1 - p) ** (window - i) for i in range(k))
    return 1.0 - below


@dataclass(frozen=True)
class ReportRow:
    set: str
    stage: str
    mode: str
    auc: float


ScorePair = tuple[Sequence[float], Sequence[float]]


def compare_models(runs: Mapping[str, Mapping[tuple[str, str], ScorePair]]) -> list[ReportRow]:
    """AUC per (event set, stage, mode) from clean/malicious score lists."""
    rows = []
    for label, per in runs.items():
        for (stage, mode), (clean, mal) in per.items():
            if mode not in MODES:
                raise ValueError(f"unknown mode {mode!r}")
            rows.append(ReportRow(label, stage, mode, auc(clean, mal)))
    stage_rank = {s.token: int(s) for s in StageLabel}
    rows.sort(key=lambda r: (r.set, MODES.index(r.mode), stage_rank.get(r.stage, 99)))
    return rows


# -- CSV formats --------------------------------------------------------------

def write_report(rows: Iterable[ReportRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "stage", "mode", "auc"])
        for r in rows:
            w.writerow([r.set, r.stage, r.mode, fmt(r.auc)])


def read_report(path: str | Path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        return [ReportRow(r["set"], r["stage"], r["mode"], float(r["auc"]))
                for r in csv.DictReader(fh)]


def write_scores(labels: Sequence[int], scores: Sequence[float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "stage", "score"])
        for i, (y, s) in enumerate(zip(labels, scores)):
            w.writerow([i, StageLabel(int(y)).token, fmt(s)])


def read_scores(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (stage labels, scores)."""
    labels, scores = [], []
    with open(path, newline="") as fh:
        for n, r in enumerate(csv.DictReader(fh), start=2):
            try:
                labels.append(int(StageLabel.parse(r["stage"])))
                scores.append(float(r["score"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {n}: {exc}") from None
    return np.asarray(labels, dtype=int), np.asarray(scores, dtype=float)


def write_roc(result: RocResult, path: str | Path, prefix: Mapping[str, str] | None = None,
              append: bool = False) -> None:
    prefix = dict(prefix or {})
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow([*prefix, "fpr", "tpr", "threshold"])
        for f, t, th in zip(result.fpr, result.tpr, result.thresholds):
            w.writerow([*prefix.values(), fmt(f), fmt(t), fmt(th)])


def stage_rows(labels: np.ndarray, scores: np.ndarray) -> dict[str, ScorePair]:
    """Split one scores table into (clean, stage) pairs for every stage present."""
    clean = scores[labels == int(StageLabel.CLEAN)]
    out = {}
    for stage in (StageLabel.ROP, StageLabel.STAGE1, StageLabel.STAGE2):
        mal = scores[labels == int(stage)]
        if mal.size and clean.size:
            out[stage.token] = (clean, mal)
    return out
