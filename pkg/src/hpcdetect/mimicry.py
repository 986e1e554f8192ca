"""No-op padding mimicry attack and the model randomization defense.

Padding works at the event-count level: each inserted segment instance adds
fixed deltas to the epoch it lands in. Segments are placed uniformly at random
over the target stage's epochs (loops are assumed avoided). Padding also costs
instructions; once the added instructions fill whole epochs the stage is
stretched by that many epochs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .detector import OcSvmModel
from .evaluation import auc, fmt
from .features import TemporalConfig, extract_nontemporal, extract_temporal
from .preprocess import TransformParams
from .trace_model import EventKind, EventSet, StageLabel, Trace


@dataclass(frozen=True)
class NoopSegment:
    name: str
    event_deltas: Mapping[EventKind, int]
    instructions: int

    def __post_init__(self):
        deltas = {EventKind.parse(str(k)): int(v) for k, v in self.event_deltas.items()}
        if any(v < 0 for v in deltas.values()):
            raise ValueError("segment deltas must be non-negative")
        if not any(deltas.values()):
            raise ValueError("a segment must change at least one event")
        if any(k.is_derived for k in deltas):
            raise ValueError("segment deltas apply to measured events only")
        if self.instructions < 1:
            raise ValueError("segment instruction cost must be >= 1")
        object.__setattr__(self, "event_deltas", deltas)

    def to_json(self) -> dict:
        return {"name": self.name, "instructions": self.instructions,
                "deltas": {k.value: v for k, v in self.event_deltas.items()}}

    @classmethod
    def from_json(cls, doc: Mapping) -> "NoopSegment":
        return cls(doc["name"], doc["deltas"], int(doc["instructions"]))

    @classmethod
    def load(cls, path: str | Path) -> "NoopSegment":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PaddingSweep:
    segment: NoopSegment
    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if not counts or counts[0] != 0:
            raise ValueError("a sweep starts at count 0")
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError("sweep counts must be strictly ascending")
        object.__setattr__(self, "counts", counts)


def _blocks(stages: np.ndarray, stage: int) -> list[tuple[int, int]]:
    """Contiguous [start, end) runs of ``stage``."""
    hit = np.concatenate([[False], stages == stage, [False]])
    edges = np.flatnonzero(np.diff(hit.astype(np.int8)))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def apply_padding(trace: Trace, segment: NoopSegment, count: int,
                  target_stage: StageLabel = StageLabel.STAGE1, seed=0) -> Trace:
    """Pad every execution (contiguous block) of ``target_stage`` with ``count`` segments."""
    if count < 0:
        raise ValueError("count must be >= 0")
    stage = int(target_stage)
    blocks = _blocks(trace.stages, stage)
    if not blocks:
        raise ValueError(f"trace has no {StageLabel(stage).token} samples")
    if count == 0:
        return trace

    cols = trace.event_columns
    delta = np.array([segment.event_deltas.get(e, 0) for e in cols], dtype=np.int64)
    missing = [k.value for k in segment.event_deltas if k not in cols]
    if missing:
        raise ValueError(f"segment touches events the trace lacks: {missing}")
    spill = (count * segment.instructions) // trace.epoch_instructions
    rng = np.random.default_rng(seed)

    counts = trace.matrix().copy()
    epochs, pids, stages = trace.epochs, trace.pids, trace.stages
    parts_c, parts_e, parts_p, parts_s = [], [], [], []
    shift = 0
    prev = 0
    for start, end in blocks:
        per_epoch = np.bincount(rng.integers(start, end, size=count) - start, minlength=end - start)
        counts[start:end] += per_epoch[:, None] * delta[None, :]
        parts_c.append(counts[prev:end])
        parts_e.append(epochs[prev:end] + shift)
        parts_p.append(pids[prev:end])
        parts_s.append(stages[prev:end])
        if spill:
            # the stretched stage keeps its padded per-epoch profile
            fill = np.rint(counts[start:end].mean(axis=0)).astype(np.int64)
            last = epochs[end - 1] + shift
            parts_c.append(np.tile(fill, (spill, 1)))
            parts_e.append(last + 1 + np.arange(spill))
            parts_p.append(np.full(spill, pids[end - 1]))
            parts_s.append(np.full(spill, stage))
            shift += spill
        prev = end
    parts_c.append(counts[prev:])
    parts_e.append(epochs[prev:] + shift)
    parts_p.append(pids[prev:])
    parts_s.append(stages[prev:])
    return Trace.from_arrays(
        np.concatenate(parts_e), np.concatenate(parts_p), np.concatenate(parts_s),
        np.concatenate(parts_c), cols, trace.epoch_instructions)


@dataclass(frozen=True)
class PaddingContext:
    """Everything a sweep needs besides the model."""

    params: TransformParams
    events: EventSet
    temporal: TemporalConfig
    clean_scores: np.ndarray
    exploit_trace: Trace
    target_stage: StageLabel = StageLabel.STAGE1
    seed: int = 0

    def vectors(self, trace: Trace):
        if self.temporal.group_n == 1:
            return extract_nontemporal(trace, self.events, self.params)
        return extract_temporal(trace, self.events, self.params, self.temporal)


@dataclass(frozen=True)
class SweepRow:
    count: int
    q1: float
    median: float
    q3: float
    auc: float


def sweep_padding(model: OcSvmModel, context: PaddingContext, sweep: PaddingSweep,
                  keep_scores: dict | None = None) -> list[SweepRow]:
    """Score the target stage at each pad count.

    When ``keep_scores`` is a dict it receives count -> stage scores, for box plots.
    """
    rows = []
    for count in sweep.counts:
        padded = apply_padding(context.exploit_trace, sweep.segment, count,
                               context.target_stage, seed=[context.seed, count])
        vec = context.vectors(padded)
        scores = model.anomaly_scores(vec.of(context.target_stage))
        if scores.size == 0:
            raise ValueError(f"no {context.target_stage.token} vectors at count {count}")
        q1, med, q3 = np.percentile(scores, [25, 50, 75])
        rows.append(SweepRow(count, float(q1), float(med), float(q3),
                             auc(context.clean_scores, scores)))
        if keep_scores is not None:
            keep_scores[count] = scores
    return rows


def tipping_point(rows: Sequence[SweepRow]) -> SweepRow | None:
    """Interior count with the lowest median score, if it beats both ends."""
    if len(rows) < 3:
        return None
    inner = min(rows[1:-1], key=lambda r: r.median)
    if inner.median < rows[0].median and rows[-1].median > inner.median:
        return inner
    return None


def write_sweep(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("count,q1,median,q3,auc\n")
        for r in rows:
            fh.write(f"{r.count},{fmt(r.q1)},{fmt(r.median)},{fmt(r.q3)},{fmt(r.auc)}\n")


def read_sweep(path: str | Path) -> list[SweepRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "count,q1,median,q3,auc":
        raise ValueError(f"{path}: not a padding sweep file")
    out = []
    for line in lines[1:]:
        c, q1, m, q3, a = line.split(",")
        out.append(SweepRow(int(c), float(q1), float(m), float(q3), float(a)))
    return out


# -- randomization defense ----------------------------------------------------

def ensemble_diversity(pool_size: int, events_per_model: int = 4, temporal_choices: int = 1) -> int:
    """Number of distinct models: C(pool, events_per_model) * temporal_choices."""
    if events_per_model < 1 or pool_size < events_per_model:
        raise ValueError("need 1 <= events_per_model <= pool_size")
    if temporal_choices < 1:
        raise ValueError("temporal_choices must be >= 1")
    return math.comb(pool_size, events_per_model) * temporal_choices


def randomize_model(ensemble: Sequence, seed: int, step: int | None = None):
    """Pick one ensemble member.

    Without ``step`` this is a uniform draw keyed by ``seed``. With ``step`` it
    follows a rotation schedule: every block of ``len(ensemble)`` consecutive
    steps visits each member once, in an order fixed by ``seed``.
    """
    if not ensemble:
        raise ValueError("empty ensemble")
    n = len(ensemble)
    if step is None:
        return ensemble[int(np.random.default_rng(seed).integers(n))]
    if step < 0:
        raise ValueError("step must be >= 0")
    order = np.random.default_rng([seed, step // n]).permutation(n)
    return ensemble[int(order[step % n])]
