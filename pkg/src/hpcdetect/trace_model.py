"""Event kinds, exploit stages, samples and traces.

Everything here is an immutable value object. Numeric consumers should use
:meth:`Trace.matrix` rather than iterating samples; the matrix is built once
and cached on the trace.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

DEFAULT_EPOCH_INSTRUCTIONS = 512_000


class Category(enum.Enum):
    ARCHITECTURAL = "architectural"
    MICROARCHITECTURAL = "microarchitectural"
    DERIVED = "derived"


class EventKind(str, enum.Enum):
    # architectural
    Load = "Load"
    Store = "Store"
    Arith = "Arith"
    Br = "Br"
    Call = "Call"
    Call_D = "Call_D"
    Call_ID = "Call_ID"
    Ret = "Ret"
    # microarchitectural
    Llc = "Llc"
    Mis_Llc = "Mis_Llc"
    Misp_Br = "Misp_Br"
    Misp_Ret = "Misp_Ret"
    Misp_Call = "Misp_Call"
    Misp_Br_C = "Misp_Br_C"
    Mis_Icache = "Mis_Icache"
    Mis_Itlb = "Mis_Itlb"
    Mis_Dtlbl = "Mis_Dtlbl"
    Mis_Dtlbs = "Mis_Dtlbs"
    Stlb_Hit = "Stlb_Hit"
    # derived ratios, never measured directly
    PctMis_Llc = "PctMis_Llc"
    PctMisp_Br = "PctMisp_Br"
    PctMisp_Ret = "PctMisp_Ret"

    def __str__(self) -> str:
        return self.value

    @property
    def category(self) -> Category:
        return _CATEGORY[self]

    @property
    def is_derived(self) -> bool:
        return self in DERIVED_PARTS

    @classmethod
    def parse(cls, name: str) -> "EventKind":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown event kind {name!r}") from None


ARCHITECTURAL = (
    EventKind.Load, EventKind.Store, EventKind.Arith, EventKind.Br,
    EventKind.Call, EventKind.Call_D, EventKind.Call_ID, EventKind.Ret,
)
MICROARCHITECTURAL = (
    EventKind.Llc, EventKind.Mis_Llc, EventKind.Misp_Br, EventKind.Misp_Ret,
    EventKind.Misp_Call, EventKind.Misp_Br_C, EventKind.Mis_Icache,
    EventKind.Mis_Itlb, EventKind.Mis_Dtlbl, EventKind.Mis_Dtlbs,
    EventKind.Stlb_Hit,
)
# derived kind -> (numerator, denominator)
DERIVED_PARTS: Mapping[EventKind, tuple[EventKind, EventKind]] = MappingProxyType({
    EventKind.PctMis_Llc: (EventKind.Mis_Llc, EventKind.Llc),
    EventKind.PctMisp_Br: (EventKind.Misp_Br, EventKind.Br),
    EventKind.PctMisp_Ret: (EventKind.Misp_Ret, EventKind.Ret),
})
BASE_EVENTS = ARCHITECTURAL + MICROARCHITECTURAL
DERIVED = tuple(DERIVED_PARTS)

_CATEGORY = {
    **{e: Category.ARCHITECTURAL for e in ARCHITECTURAL},
    **{e: Category.MICROARCHITECTURAL for e in MICROARCHITECTURAL},
    **{e: Category.DERIVED for e in DERIVED},
}


class StageLabel(enum.IntEnum):
    """Exploit stage of a sample. The integer order is the severity order."""

    CLEAN = 0
    ROP = 1
    STAGE1 = 2
    STAGE2 = 3

    @property
    def token(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, token: str) -> "StageLabel":
        try:
            return cls[token.upper()]
        except KeyError:
            raise ValueError(
                f"unknown stage {token!r}; expected one of clean, rop, stage1, stage2"
            ) from None


@dataclass(frozen=True)
class Sample:
    epoch_index: int
    pid: int
    stage: StageLabel
    counts: Mapping[EventKind, int]

    def __post_init__(self):
        object.__setattr__(self, "counts", MappingProxyType(dict(self.counts)))


@dataclass(frozen=True)
class EventSet:
    label: str
    events: tuple[EventKind, ...]

    def __post_init__(self):
        events = tuple(EventKind.parse(str(e)) for e in self.events)
        if len(events) != 4:
            raise ValueError(f"an event set holds exactly 4 events, got {len(events)}")
        if len(set(events)) != 4:
            raise ValueError(f"duplicate events in set {self.label!r}")
        derived = [e for e in events if e.is_derived]
        if derived:
            raise ValueError(f"derived events cannot be monitored: {derived}")
        object.__setattr__(self, "events", events)

    def __str__(self) -> str:
        return f"{self.label}{{{','.join(e.value for e in self.events)}}}"


@dataclass(frozen=True)
class Trace:
    """Ordered samples of one or more processes at a fixed sampling granularity."""

    samples: tuple[Sample, ...]
    event_columns: tuple[EventKind, ...]
    epoch_instructions: int = DEFAULT_EPOCH_INSTRUCTIONS

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(
            self, "event_columns", tuple(EventKind.parse(str(e)) for e in self.event_columns)
        )

    @classmethod
    def from_arrays(
        cls,
        epochs: Sequence[int],
        pids: Sequence[int],
        stages: Sequence[int],
        counts: np.ndarray,
        columns: Sequence[EventKind],
        epoch_instructions: int = DEFAULT_EPOCH_INSTRUCTIONS,
    ) -> "Trace":
        counts = np.asarray(counts, dtype=np.int64)
        columns = tuple(columns)
        samples = tuple(
            Sample(int(e), int(p), StageLabel(int(s)), dict(zip(columns, map(int, row))))
            for e, p, s, row in zip(epochs, pids, stages, counts)
        )
        trace = cls(samples, columns, epoch_instructions)
        # the caller already has the matrix; seed the cache
        trace.__dict__["_base_matrix"] = counts.reshape(len(samples), len(columns))
        return trace

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    @cached_property
    def _base_matrix(self) -> np.ndarray:
        out = np.zeros((len(self.samples), len(self.event_columns)), dtype=np.int64)
        for i, s in enumerate(self.samples):
            for j, e in enumerate(self.event_columns):
                out[i, j] = s.counts[e]
        return out

    @cached_property
    def stages(self) -> np.ndarray:
        return np.array([int(s.stage) for s in self.samples], dtype=np.int64)

    @cached_property
    def pids(self) -> np.ndarray:
        return np.array([s.pid for s in self.samples], dtype=np.int64)

    @cached_property
    def epochs(self) -> np.ndarray:
        return np.array([s.epoch_index for s in self.samples], dtype=np.int64)

    def column(self, kind: EventKind) -> np.ndarray:
        """Values of one event for every sample; derived kinds are computed as ratios."""
        kind = EventKind(kind)
        if kind.is_derived:
            num, den = DERIVED_PARTS[kind]
            for part in (num, den):
                if part not in self.event_columns:
                    raise KeyError(f"{kind.value} needs {part.value}, which the trace lacks")
            return _ratio(self.column(num).astype(float), self.column(den).astype(float))
        try:
            j = self.event_columns.index(kind)
        except ValueError:
            raise KeyError(f"trace has no {kind.value} column") from None
        return self._base_matrix[:, j]

    def matrix(self, kinds: Iterable[EventKind] | None = None) -> np.ndarray:
        if kinds is None:
            return self._base_matrix
        return np.column_stack([self.column(k).astype(float) for k in kinds])

    def available_events(self) -> tuple[EventKind, ...]:
        """Base columns plus every derived kind whose constituents are present."""
        derived = tuple(
            d for d, parts in DERIVED_PARTS.items()
            if all(p in self.event_columns for p in parts)
        )
        return self.event_columns + derived

    def replace_samples(self, samples: Iterable[Sample]) -> "Trace":
        return Trace(tuple(samples), self.event_columns, self.epoch_instructions)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=float)
    np.divide(num, den, out=out, where=den != 0)
    return out


def derived_value(sample: Sample, kind: EventKind) -> float:
    """Ratio of a derived event's two constituents; zero when the denominator is zero."""
    kind = EventKind(kind)
    if not kind.is_derived:
        raise ValueError(f"{kind.value} is not a derived event")
    num, den = DERIVED_PARTS[kind]
    for part in (num, den):
        if part not in sample.counts:
            raise KeyError(f"{kind.value} needs {part.value}, which the sample lacks")
    d = sample.counts[den]
    return sample.counts[num] / d if d else 0.0


@dataclass(frozen=True)
class Violation:
    index: int
    kind: str
    message: str

    def __str__(self) -> str:
        return f"sample {self.index}: {self.kind}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def __str__(self) -> str:
        return "\n".join(map(str, self.violations)) or "ok"


def validate_trace(trace: Trace) -> ValidationReport:
    out = []
    columns = set(trace.event_columns)
    for e in trace.event_columns:
        if e.is_derived:
            out.append(Violation(-1, "columns", f"derived event {e.value} in column set"))
    if len(columns) != len(trace.event_columns):
        out.append(Violation(-1, "columns", "duplicate event columns"))
    if trace.epoch_instructions < 1:
        out.append(Violation(-1, "metadata", "epoch_instructions must be positive"))
    prev = None
    for i, s in enumerate(trace.samples):
        if s.epoch_index < 0:
            out.append(Violation(i, "epoch", f"negative epoch index {s.epoch_index}"))
        if prev is not None and s.epoch_index <= prev:
            out.append(Violation(
                i, "monotonicity", f"epoch {s.epoch_index} does not follow {prev}"))
        prev = s.epoch_index
        keys = set(s.counts)
        if keys != columns:
            missing = sorted(k.value for k in columns - keys)
            extra = sorted(k.value for k in keys - columns)
            out.append(Violation(
                i, "columns", f"missing {missing} extra {extra}" if extra else f"missing {missing}"))
        for k, v in s.counts.items():
            if v < 0:
                out.append(Violation(i, "count", f"{k} is negative ({v})"))
    return ValidationReport(tuple(out))


def filter_by_pid(trace: Trace, pid: int) -> Trace:
    return trace.replace_samples(s for s in trace.samples if s.pid == pid)


def concat_traces(traces: Sequence[Trace]) -> Trace:
    """Join traces end to end, renumbering epochs so indices stay increasing."""
    if not traces:
        raise ValueError("nothing to concatenate")
    first = traces[0]
    samples = []
    offset = 0
    for t in traces:
        if t.event_columns != first.event_columns or t.epoch_instructions != first.epoch_instructions:
            raise ValueError("traces differ in columns or granularity")
        for s in t.samples:
            samples.append(Sample(offset + s.epoch_index, s.pid, s.stage, s.counts))
        if t.samples:
            offset += t.samples[-1].epoch_index + 1
    return Trace(tuple(samples), first.event_columns, first.epoch_instructions)
