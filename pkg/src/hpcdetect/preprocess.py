"""Min-max scaling followed by a per-event power transform.

For event i::

    normalized_i = clip((raw_i - min_i) / (max_i - min_i), 0, 1) ** lambda_i

with ``lambda_i`` chosen on training data so the training median lands on
``target_median``. Parameters are fitted once and reused unchanged for every
later trace.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .trace_model import EventKind, EventSet, Sample, Trace, derived_value


class DegenerateColumnError(ValueError):
    pass


@dataclass(frozen=True)
class EventParams:
    min: float
    max: float
    lam: float

    def __post_init__(self):
        if not self.max > self.min:
            raise ValueError(f"max ({self.max}) must exceed min ({self.min})")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")

    def apply(self, raw) -> np.ndarray:
        x = (np.asarray(raw, dtype=float) - self.min) / (self.max - self.min)
        return np.clip(x, 0.0, 1.0) ** self.lam


@dataclass(frozen=True)
class TransformParams:
    events: Mapping[EventKind, EventParams]
    target_median: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "events", {EventKind(k): v for k, v in self.events.items()})

    def __getitem__(self, kind: EventKind) -> EventParams:
        try:
            return self.events[EventKind(kind)]
        except KeyError:
            raise KeyError(f"no fitted transform for {EventKind(kind).value}") from None

    def __contains__(self, kind) -> bool:
        return EventKind(kind) in self.events

    def to_json(self) -> dict:
        return {
            "target_median": self.target_median,
            "events": {
                k.value: {"min": p.min, "max": p.max, "lambda": p.lam}
                for k, p in self.events.items()
            },
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "TransformParams":
        return cls(
            {EventKind.parse(k): EventParams(float(v["min"]), float(v["max"]), float(v["lambda"]))
             for k, v in doc["events"].items()},
            float(doc.get("target_median", 0.5)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TransformParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def _columns(training, events) -> dict[EventKind, np.ndarray]:
    if isinstance(training, Trace):
        kinds = events if events is not None else training.event_columns
        return {EventKind(k): training.column(k).astype(float) for k in kinds}
    if isinstance(training, Mapping):
        return {EventKind(k): np.asarray(v, dtype=float) for k, v in training.items()
                if events is None or EventKind(k) in set(events)}
    # a collection of traces
    traces = list(training)
    kinds = events if events is not None else traces[0].event_columns
    return {EventKind(k): np.concatenate([t.column(k).astype(float) for t in traces]) for k in kinds}


def fit_minmax(training, events: Iterable[EventKind] | None = None) -> dict[EventKind, tuple[float, float]]:
    """Per-event (min, max) of training values.

    ``training`` may be a Trace, a list of Traces or a mapping of event to values.
    """
    out = {}
    for kind, values in _columns(training, None if events is None else list(events)).items():
        if values.size == 0:
            raise DegenerateColumnError(f"{kind.value}: no training values")
        lo, hi = float(values.min()), float(values.max())
        if not hi > lo:
            raise DegenerateColumnError(f"{kind.value}: constant column ({lo:g})")
        out[kind] = (lo, hi)
    return out


def fit_lambda(values: Sequence[float], lo: float, hi: float, target_median: float = 0.5) -> float:
    m = (float(np.median(values)) - lo) / (hi - lo)
    if not 0.0 < m < 1.0:
        raise DegenerateColumnError(f"normalized median {m:g} is not strictly inside (0, 1)")
    if not 0.0 < target_median < 1.0:
        raise ValueError("target_median must lie in (0, 1)")
    return math.log(target_median) / math.log(m)


def fit_transform(training, events: Iterable[EventKind] | None = None,
                  target_median: float = 0.5, skip_degenerate: bool = False) -> TransformParams:
    """Fit min, max and lambda for each event.

    With ``skip_degenerate`` events whose column is constant or whose median sits
    on an extreme are left out instead of raising; used for derived ratios,
    which are only ranked, never modeled.
    """
    cols = _columns(training, None if events is None else list(events))
    params = {}
    for kind, values in cols.items():
        try:
            (lo, hi), = fit_minmax({kind: values}).values()
            lam = fit_lambda(values, lo, hi, target_median)
        except DegenerateColumnError as exc:
            if skip_degenerate:
                continue
            raise DegenerateColumnError(f"{kind.value}: {exc}") from None
        params[kind] = EventParams(lo, hi, lam)
    return TransformParams(params, target_median)


def transform(sample: Sample, params: TransformParams, events: EventSet | Sequence[EventKind]) -> np.ndarray:
    kinds = events.events if isinstance(events, EventSet) else tuple(events)
    out = np.empty(len(kinds))
    for i, k in enumerate(kinds):
        p = params[k]
        raw = derived_value(sample, k) if k.is_derived else sample.counts[k]
        out[i] = p.apply(raw)
    return out


def transform_trace(trace: Trace, params: TransformParams,
                    events: EventSet | Sequence[EventKind]) -> np.ndarray:
    """Vectorized :func:`transform` over every sample; shape (len(trace), len(events))."""
    kinds = events.events if isinstance(events, EventSet) else tuple(events)
    if not kinds:
        return np.zeros((len(trace), 0))
    return np.column_stack([params[k].apply(trace.column(k)) for k in kinds])
