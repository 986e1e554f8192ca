"""Fisher-score event ranking and feature-vector extraction."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .preprocess import TransformParams, transform_trace
from .trace_model import (
    ARCHITECTURAL,
    Category,
    EventKind,
    EventSet,
    StageLabel,
    Trace,
)


class EventCategory(enum.Enum):
    ARCHITECTURAL = "architectural"
    MICROARCHITECTURAL = "microarchitectural"
    BOTH = "both"

    @property
    def code(self) -> str:
        return {"architectural": "A", "microarchitectural": "M", "both": "AM"}[self.value]

    def admits(self, kind: EventKind) -> bool:
        if self is EventCategory.BOTH:
            return True
        if self is EventCategory.ARCHITECTURAL:
            return kind in ARCHITECTURAL
        # derived ratios are built from microarchitectural miss counts
        return kind.category in (Category.MICROARCHITECTURAL, Category.DERIVED)

    @classmethod
    def parse(cls, text: str) -> "EventCategory":
        text = text.lower()
        for c in cls:
            if text in (c.value, c.code.lower()):
                return c
        raise ValueError(f"unknown category {text!r}")


def f_score(clean_values: Sequence[float], mal_values: Sequence[float]) -> float:
    """Two-class Fisher score.

    ``((mean_mal - mean)^2 + (mean_clean - mean)^2) / (var_mal + var_clean)``
    with ``mean`` the pooled mean and unbiased within-class variances. Returns
    ``inf`` when both classes are constant but separated, and 0 when both are
    constant and equal.
    """
    a = np.asarray(clean_values, dtype=float)
    b = np.asarray(mal_values, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each class needs at least 2 values")
    grand = np.concatenate([a, b]).mean()
    num = (a.mean() - grand) ** 2 + (b.mean() - grand) ** 2
    den = a.var(ddof=1) + b.var(ddof=1)
    if den == 0.0:
        return math.inf if num > 0.0 else 0.0
    return float(num / den)


@dataclass(frozen=True)
class FScoreRanking:
    stage: StageLabel
    category: EventCategory
    ranked: tuple[tuple[EventKind, float], ...]

    @property
    def events(self) -> tuple[EventKind, ...]:
        return tuple(e for e, _ in self.ranked)

    def rows(self) -> list[tuple[str, str, int, str, float]]:
        return [(self.stage.token, self.category.value, i + 1, e.value, f)
                for i, (e, f) in enumerate(self.ranked)]


def rank_events(clean: Trace, staged: Trace, stage: StageLabel,
                category: EventCategory | str = EventCategory.BOTH,
                params: TransformParams | None = None) -> FScoreRanking:
    """Rank candidate events by how well they separate ``stage`` samples from clean ones.

    Values are compared after the power transform when ``params`` covers the
    event (derived ratios are ranked on their raw value otherwise).
    """
    stage = StageLabel(stage)
    if isinstance(category, str):
        category = EventCategory.parse(category)
    mask = staged.stages == int(stage)
    if mask.sum() < 2:
        raise ValueError(f"staged trace has fewer than 2 {stage.token} samples")
    candidates = [
        e for e in clean.available_events()
        if category.admits(e) and e in staged.available_events()
    ]
    scored = []
    for kind in candidates:
        c = clean.column(kind).astype(float)
        m = staged.column(kind).astype(float)[mask]
        if params is not None and kind in params:
            c, m = params[kind].apply(c), params[kind].apply(m)
        scored.append((kind, f_score(c, m)))
    scored.sort(key=lambda t: (-t[1], t[0].value))
    return FScoreRanking(stage, category, tuple(scored))


def select_event_set(ranking: FScoreRanking, k: int = 4) -> EventSet:
    """Top ``k`` measurable events; derived ratios are skipped."""
    chosen = [e for e in ranking.events if not e.is_derived][:k]
    if len(chosen) < k:
        raise ValueError(f"ranking has only {len(chosen)} non-derived events, need {k}")
    stage_index = int(ranking.stage) - 1
    if stage_index < 0:
        raise ValueError("rankings are made for exploit stages, not clean")
    return EventSet(f"{ranking.category.code}-{stage_index}", tuple(chosen))


@dataclass(frozen=True)
class TemporalConfig:
    group_n: int = 4
    window_stride: int = 1

    def __post_init__(self):
        if self.group_n < 1 or self.window_stride < 1:
            raise ValueError("group_n and window_stride must be >= 1")

    def dim(self, n_events: int = 4) -> int:
        return n_events * self.group_n


@dataclass(frozen=True)
class Vectors:
    """Feature matrix with one stage label per row."""

    X: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[np.ndarray, StageLabel]]:
        for x, y in zip(self.X, self.labels):
            yield x, StageLabel(int(y))

    def of(self, stage: StageLabel) -> np.ndarray:
        return self.X[self.labels == int(stage)]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def extract_nontemporal(trace: Trace, events: EventSet, params: TransformParams) -> Vectors:
    return Vectors(transform_trace(trace, params, events), trace.stages.copy())


def window_labels(stages: np.ndarray, n: int, stride: int = 1) -> np.ndarray:
    """Most severe stage per window; ROP-only windows count as clean when n > 1."""
    worst = sliding_window_view(stages, n)[::stride].max(axis=1)
    if n > 1:
        worst = np.where(worst == int(StageLabel.ROP), int(StageLabel.CLEAN), worst)
    return worst


def extract_temporal(trace: Trace, events: EventSet, params: TransformParams,
                     cfg: TemporalConfig = TemporalConfig()) -> Vectors:
    """Sliding windows of ``group_n`` epochs, features laid out event-major."""
    n = cfg.group_n
    if len(trace) < n:
        raise ValueError(f"trace of {len(trace)} samples is shorter than window {n}")
    base = transform_trace(trace, params, events)
    # (windows, events, n) is already event-major
    win = sliding_window_view(base, n, axis=0)[::cfg.window_stride]
    X = np.ascontiguousarray(win.reshape(win.shape[0], -1))
    return Vectors(X, window_labels(trace.stages, n, cfg.window_stride))


def n_windows(length: int, n: int, stride: int = 1) -> int:
    return (length - n) // stride + 1
