"""Synthetic per-epoch event-count traces.

Benign counts are gamma distributed per event (positively skewed, median
below mean), with optional linear coupling between pairs of events. An
injected exploit writes one ROP epoch, a block of Stage1 epochs and a block of
Stage2 epochs over an existing benign trace.

Gamma scale parameters are quoted for a reference epoch of 512 000
instructions and scale linearly with the requested epoch size.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .trace_model import (
    DEFAULT_EPOCH_INSTRUCTIONS,
    EventKind,
    StageLabel,
    Trace,
)

REFERENCE_INSTRUCTIONS = DEFAULT_EPOCH_INSTRUCTIONS

# Stage1 duration offset per downloader variant (Table 1 style variability).
VARIANT_OFFSETS = {"reverse_tcp": 0, "reverse_http": 2, "bind_tcp": -2}

Factor = Union[float, Mapping[EventKind, float]]


def sub_seed(seed: int, name: str) -> np.random.SeedSequence:
    """Named child seed so each stage of a pipeline is independently reproducible."""
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class GammaParams:
    k: float
    theta: float

    @property
    def mean(self) -> float:
        return self.k * self.theta


@dataclass(frozen=True)
class BenignProfile:
    events: Mapping[EventKind, GammaParams]
    correlations: tuple[tuple[EventKind, EventKind, float], ...] = ()

    def __post_init__(self):
        events = {EventKind.parse(str(e)): p for e, p in self.events.items()}
        for e, p in events.items():
            if e.is_derived:
                raise ValueError(f"derived event {e.value} cannot be generated")
            if not (p.k > 0 and p.theta > 0):
                raise ValueError(f"{e.value}: gamma k and theta must be positive")
        corr = []
        for a, b, w in self.correlations:
            a, b = EventKind.parse(str(a)), EventKind.parse(str(b))
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"mixing weight for ({a.value},{b.value}) outside [0,1]")
            for e in (a, b):
                if e not in events:
                    raise ValueError(f"correlated event {e.value} has no distribution")
            corr.append((a, b, float(w)))
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "correlations", tuple(corr))

    @property
    def columns(self) -> tuple[EventKind, ...]:
        return tuple(self.events)

    def scaled(self, factor: float) -> "BenignProfile":
        return BenignProfile(
            {e: GammaParams(p.k, p.theta * factor) for e, p in self.events.items()},
            self.correlations,
        )


@dataclass(frozen=True)
class ExploitProfile:
    rop_instructions: int = 2182
    stage1_epochs: int = 6
    stage2_epochs: int = 12
    stage1_suppression: Factor = 0.3
    stage2_shift: Factor = 0.7
    variant: str = "reverse_tcp"
    # per-instruction event rates of pure ROP gadget execution; events not
    # listed keep the host's own counts in the ROP draw
    rop_rates: Mapping[EventKind, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.rop_instructions < 1:
            raise ValueError("rop_instructions must be >= 1")
        if self.stage1_epochs < 1 or self.stage2_epochs < 0:
            raise ValueError("stage1_epochs must be >= 1 and stage2_epochs >= 0")
        if self.variant not in VARIANT_OFFSETS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("stage1_suppression", "stage2_shift"):
            value = getattr(self, name)
            if isinstance(value, Mapping):
                value = {EventKind.parse(str(k)): float(v) for k, v in value.items()}
                vals = list(value.values())
                object.__setattr__(self, name, value)
            else:
                vals = [float(value)]
            if any(v <= 0 for v in vals):
                raise ValueError(f"{name} factors must be positive")
            if name == "stage1_suppression" and any(v > 1 for v in vals):
                raise ValueError("stage1_suppression factors must lie in (0, 1]")
        object.__setattr__(
            self, "rop_rates", {EventKind.parse(str(k)): float(v) for k, v in self.rop_rates.items()})

    @property
    def effective_stage1_epochs(self) -> int:
        return max(1, self.stage1_epochs + VARIANT_OFFSETS[self.variant])

    @property
    def total_epochs(self) -> int:
        return 1 + self.effective_stage1_epochs + self.stage2_epochs

    def rop_weight(self, epoch_instructions: int) -> float:
        return min(1.0, self.rop_instructions / epoch_instructions)

    def at_granularity(self, epoch_instructions: int) -> "ExploitProfile":
        """Same exploit observed at another epoch size: stage lengths shrink or grow."""
        ratio = REFERENCE_INSTRUCTIONS / epoch_instructions
        return replace(
            self,
            stage1_epochs=max(1, round(self.stage1_epochs * ratio)),
            stage2_epochs=max(1, round(self.stage2_epochs * ratio)),
        )


@dataclass(frozen=True)
class NoiseConfig:
    context_switch_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.context_switch_fraction < 1.0:
            raise ValueError("context_switch_fraction must lie in [0, 1)")


def _factor(f: Factor, kind: EventKind) -> float:
    if isinstance(f, Mapping):
        return f.get(kind, 1.0)
    return float(f)


def draw_counts(profile: BenignProfile, n: int, epoch_instructions: int,
                rng: np.random.Generator, columns: Sequence[EventKind] | None = None) -> np.ndarray:
    """Float count matrix (n x columns) before rounding."""
    columns = tuple(columns) if columns is not None else profile.columns
    scale = epoch_instructions / REFERENCE_INSTRUCTIONS
    missing = [c.value for c in columns if c not in profile.events]
    if missing:
        raise ValueError(f"profile has no distribution for {missing}")
    draws = {e: rng.gamma(p.k, p.theta * scale, size=n) for e, p in profile.events.items()}
    for a, b, w in profile.correlations:
        ratio = profile.events[b].mean / profile.events[a].mean
        draws[b] = (1.0 - w) * draws[b] + w * ratio * draws[a]
    return np.column_stack([draws[c] for c in columns]) if columns else np.zeros((n, 0))


def gen_benign(profile: BenignProfile, n_epochs: int,
               epoch_instructions: int = DEFAULT_EPOCH_INSTRUCTIONS, seed=0,
               pid: int = 1000, first_epoch: int = 0) -> Trace:
    if n_epochs < 1:
        raise ValueError("n_epochs must be >= 1")
    if epoch_instructions < 1:
        raise ValueError("epoch_instructions must be positive")
    counts = np.rint(draw_counts(profile, n_epochs, epoch_instructions, _rng(seed)))
    return Trace.from_arrays(
        np.arange(first_epoch, first_epoch + n_epochs),
        np.full(n_epochs, pid),
        np.zeros(n_epochs, dtype=int),
        counts.astype(np.int64),
        profile.columns,
        epoch_instructions,
    )


def inject_exploit(trace: Trace, profile: ExploitProfile, start_epoch: int, seed=0) -> Trace:
    """Overwrite samples ``start_epoch ..`` (positions, not epoch indices) with exploit stages."""
    n1 = profile.effective_stage1_epochs
    total = profile.total_epochs
    if start_epoch < 0 or start_epoch + total > len(trace):
        raise ValueError(
            f"exploit of {total} epochs at {start_epoch} overruns trace of {len(trace)}")
    rng = _rng(seed)
    cols = trace.event_columns
    counts = trace.matrix().astype(float).copy()
    stages = trace.stages.copy()

    w = profile.rop_weight(trace.epoch_instructions)
    own = counts[start_epoch]
    rop = own.copy()
    for j, e in enumerate(cols):
        if e in profile.rop_rates:
            rop[j] = rng.poisson(profile.rop_rates[e] * trace.epoch_instructions)
    counts[start_epoch] = (1.0 - w) * own + w * rop
    stages[start_epoch] = StageLabel.ROP

    s1 = slice(start_epoch + 1, start_epoch + 1 + n1)
    s2 = slice(s1.stop, s1.stop + profile.stage2_epochs)
    counts[s1] *= np.array([_factor(profile.stage1_suppression, e) for e in cols])
    counts[s2] *= np.array([_factor(profile.stage2_shift, e) for e in cols])
    stages[s1] = StageLabel.STAGE1
    stages[s2] = StageLabel.STAGE2

    window = slice(start_epoch, s2.stop)
    out = trace.matrix().copy()
    out[window] = np.rint(counts[window]).astype(np.int64)
    return Trace.from_arrays(trace.epochs, trace.pids, stages, out, cols, trace.epoch_instructions)


def mix_context_noise(trace: Trace, noise: NoiseConfig, foreign: BenignProfile, seed=0) -> Trace:
    f = noise.context_switch_fraction
    if f == 0.0 or len(trace) == 0:
        return trace
    draw = draw_counts(foreign, len(trace), trace.epoch_instructions, _rng(seed), trace.event_columns)
    mixed = np.rint((1.0 - f) * trace.matrix() + f * draw).astype(np.int64)
    return Trace.from_arrays(
        trace.epochs, trace.pids, trace.stages, mixed, trace.event_columns, trace.epoch_instructions)


# -- default profiles ---------------------------------------------------------

# (mean count per 512K-instruction epoch, gamma shape)
_DEFAULT_EVENTS = {
    EventKind.Load: (120_000, 3.0),
    EventKind.Store: (60_000, 3.5),
    EventKind.Arith: (100_000, 2.5),
    EventKind.Br: (90_000, 3.0),
    EventKind.Call: (12_000, 2.5),
    EventKind.Call_D: (9_000, 2.5),
    EventKind.Call_ID: (3_000, 3.0),
    EventKind.Ret: (12_000, 2.5),
    EventKind.Llc: (4_000, 1.5),
    EventKind.Mis_Llc: (800, 1.2),
    EventKind.Misp_Br: (3_000, 2.0),
    EventKind.Misp_Ret: (400, 3.0),
    EventKind.Misp_Call: (200, 1.5),
    EventKind.Misp_Br_C: (2_500, 2.0),
    EventKind.Mis_Icache: (6_000, 1.5),
    EventKind.Mis_Itlb: (300, 1.2),
    EventKind.Mis_Dtlbl: (1_500, 1.5),
    EventKind.Mis_Dtlbs: (600, 1.5),
    EventKind.Stlb_Hit: (250, 1.5),
}
_DEFAULT_CORRELATIONS = (
    (EventKind.Call, EventKind.Ret, 0.9),
    (EventKind.Call, EventKind.Call_D, 0.7),
    (EventKind.Br, EventKind.Misp_Br, 0.4),
    (EventKind.Misp_Br, EventKind.Misp_Br_C, 0.8),
    (EventKind.Llc, EventKind.Mis_Llc, 0.5),
)
_DEFAULT_ROP_RATES = {
    EventKind.Ret: 0.20,
    EventKind.Misp_Ret: 0.12,
    EventKind.Load: 0.35,
    EventKind.Br: 0.22,
    EventKind.Misp_Br: 0.05,
    EventKind.Misp_Br_C: 0.03,
    EventKind.Mis_Itlb: 0.004,
    EventKind.Mis_Icache: 0.03,
}


def default_benign_profile() -> BenignProfile:
    return BenignProfile(
        {e: GammaParams(k, mean / k) for e, (mean, k) in _DEFAULT_EVENTS.items()},
        _DEFAULT_CORRELATIONS,
    )


def default_foreign_profile() -> BenignProfile:
    """Another process sharing the core: busier and burstier than the monitored one."""
    return BenignProfile(
        {e: GammaParams(1.0, 2.0 * mean) for e, (mean, _) in _DEFAULT_EVENTS.items()})


def default_exploit_profile() -> ExploitProfile:
    return ExploitProfile(rop_rates=dict(_DEFAULT_ROP_RATES))


# -- profile files ------------------------------------------------------------

@dataclass(frozen=True)
class ProfileBundle:
    benign: BenignProfile
    exploit: ExploitProfile
    noise: NoiseConfig
    foreign: BenignProfile


def _benign_from_json(doc: Mapping) -> BenignProfile:
    events = {
        EventKind.parse(name): GammaParams(float(p["k"]), float(p["theta"]))
        for name, p in doc["events"].items()
    }
    corr = tuple((a, b, float(w)) for a, b, w in doc.get("correlations", ()))
    return BenignProfile(events, corr)


def _benign_to_json(p: BenignProfile) -> dict:
    return {
        "events": {e.value: {"k": g.k, "theta": g.theta} for e, g in p.events.items()},
        "correlations": [[a.value, b.value, w] for a, b, w in p.correlations],
    }


def _factor_from_json(v) -> Factor:
    if isinstance(v, Mapping):
        return {EventKind.parse(k): float(x) for k, x in v.items()}
    return float(v)


def _factor_to_json(v: Factor):
    if isinstance(v, Mapping):
        return {k.value: x for k, x in v.items()}
    return v


def profile_from_json(doc: Mapping) -> ProfileBundle:
    """Build profiles from the JSON document layout; missing sections take defaults."""
    benign = _benign_from_json(doc) if "events" in doc else default_benign_profile()
    ex = dict(doc.get("exploit", {}))
    base = default_exploit_profile()
    exploit = ExploitProfile(
        rop_instructions=int(ex.get("rop_instructions", base.rop_instructions)),
        stage1_epochs=int(ex.get("stage1_epochs", base.stage1_epochs)),
        stage2_epochs=int(ex.get("stage2_epochs", base.stage2_epochs)),
        stage1_suppression=_factor_from_json(ex.get("stage1_suppression", base.stage1_suppression)),
        stage2_shift=_factor_from_json(ex.get("stage2_shift", base.stage2_shift)),
        variant=ex.get("variant", base.variant),
        rop_rates={EventKind.parse(str(k)): float(v)
                   for k, v in ex.get("rop_rates", {e.value: r for e, r in base.rop_rates.items()}).items()},
    )
    noise = NoiseConfig(float(doc.get("noise", {}).get("context_switch_fraction", 0.0)))
    foreign = _benign_from_json(doc["foreign"]) if "foreign" in doc else default_foreign_profile()
    return ProfileBundle(benign, exploit, noise, foreign)


def profile_to_json(bundle: ProfileBundle) -> dict:
    ex = bundle.exploit
    doc = _benign_to_json(bundle.benign)
    doc["exploit"] = {
        "rop_instructions": ex.rop_instructions,
        "stage1_epochs": ex.stage1_epochs,
        "stage2_epochs": ex.stage2_epochs,
        "stage1_suppression": _factor_to_json(ex.stage1_suppression),
        "stage2_shift": _factor_to_json(ex.stage2_shift),
        "variant": ex.variant,
        "rop_rates": {k.value: v for k, v in ex.rop_rates.items()},
    }
    doc["noise"] = {"context_switch_fraction": bundle.noise.context_switch_fraction}
    doc["foreign"] = _benign_to_json(bundle.foreign)
    return doc


def load_profile(path: str | Path | None) -> ProfileBundle:
    if path is None:
        return profile_from_json({})
    with open(path, encoding="utf-8") as fh:
        return profile_from_json(json.load(fh))


def default_bundle() -> ProfileBundle:
    return profile_from_json({})
