"""End-to-end experiments: synthesize, fit, select, train, score, evaluate.

Partitions are disjoint by construction. The transform and every model are
fitted on the training clean trace only; event selection sees the training
clean trace plus a separate labelled selection trace; the test traces are
touched only for scoring.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .detector import OcSvmModel, TrainConfig, train
from .evaluation import (
    MODES,
    ReportRow,
    compare_models,
    detect_exploit,
    DetectionPolicy,
    fmt,
    roc,
    tpr_at_fpr,
    write_report,
    write_roc,
    write_scores,
)
from .features import (
    EventCategory,
    TemporalConfig,
    Vectors,
    extract_nontemporal,
    extract_temporal,
    rank_events,
    select_event_set,
)
from .preprocess import TransformParams, fit_transform
from .synth import (
    REFERENCE_INSTRUCTIONS,
    NoiseConfig,
    ProfileBundle,
    gen_benign,
    inject_exploit,
    load_profile,
    mix_context_noise,
    profile_from_json,
    sub_seed,
    VARIANT_OFFSETS,
)
from .trace_model import EventSet, StageLabel, Trace
from .tracefile import write_trace

log = logging.getLogger(__name__)

FPR_BUDGET = 0.011


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str = "experiment-out"
    profile: str | None = None
    exploit_profile: str | None = None
    # "auto" selects one set per stage in auto_stages; otherwise a list of
    # {"label": ..., "events": [...]} or bare 4-event lists
    event_sets: Any = "auto"
    auto_stages: tuple[str, ...] = ("rop", "stage1", "stage2")
    category: str = "both"
    temporal_n: int = 4
    nu: float = 0.05
    gamma: float | None = None
    epoch_instructions: int = REFERENCE_INSTRUCTIONS
    train_epochs: int = 2000
    test_epochs: int = 2000
    selection_runs: int = 10
    test_runs: int = 20
    run_epochs: int | None = None
    noise_fraction: float | None = None
    figures: bool = True

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("a seed is required for reproducibility")
        self.auto_stages = tuple(self.auto_stages)
        if self.temporal_n < 1:
            raise ValueError("temporal_n must be >= 1")
        for p in (self.profile, self.exploit_profile):
            if p is not None and not Path(p).is_file():
                raise ValueError(f"profile file not found: {p}")

    @classmethod
    def from_mapping(cls, doc: Mapping, **overrides) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**merged)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        return cls.from_mapping(read_config_doc(path), **overrides)

    def to_json(self) -> dict:
        d = asdict(self)
        d["auto_stages"] = list(self.auto_stages)
        return d


def read_config_doc(path: str | Path) -> dict:
    """Config JSON with profile paths resolved against the file's directory."""
    path = Path(path)
    doc = json.loads(path.read_text())
    for key in ("profile", "exploit_profile"):
        if doc.get(key) and not Path(doc[key]).is_absolute():
            doc[key] = str(path.parent / doc[key])
    return doc


def load_bundle(config: ExperimentConfig) -> ProfileBundle:
    bundle = load_profile(config.profile)
    if config.exploit_profile:
        doc = json.loads(Path(config.exploit_profile).read_text())
        doc = doc.get("exploit", doc)
        exploit = profile_from_json({"exploit": doc}).exploit
        bundle = replace(bundle, exploit=exploit)
    if config.noise_fraction is not None:
        bundle = replace(bundle, noise=NoiseConfig(config.noise_fraction))
    return bundle


@dataclass(frozen=True)
class Dataset:
    train_clean: Trace
    selection: Trace
    test_clean: Trace
    test_exploit: Trace
    # [start, end) sample positions of each injected exploit in test_exploit
    exploit_spans: tuple[tuple[int, int], ...]


def _seed_int(seed: int, name: str) -> int:
    return int(sub_seed(seed, name).generate_state(1)[0])


def exploit_trace(bundle: ProfileBundle, runs: int, run_epochs: int | None,
                  epoch_instructions: int, seed: int, name: str) -> tuple[Trace, list]:
    """Benign trace holding ``runs`` exploit executions, one per run segment.

    Downloader variants rotate across runs so Stage1 lengths vary.
    """
    variants = list(VARIANT_OFFSETS)
    longest = max(replace(bundle.exploit, variant=v).total_epochs for v in variants)
    length = run_epochs or max(30, 3 * longest)
    if length < longest + 2:
        raise ValueError(f"run_epochs={length} cannot hold a {longest}-epoch exploit")
    trace = gen_benign(bundle.benign, runs * length, epoch_instructions,
                       seed=sub_seed(seed, f"{name}/benign"))
    rng = np.random.default_rng(sub_seed(seed, f"{name}/placement"))
    spans = []
    for r in range(runs):
        ex = replace(bundle.exploit, variant=variants[r % len(variants)])
        slack = length - ex.total_epochs
        start = r * length + int(rng.integers(1, slack))
        trace = inject_exploit(trace, ex, start, seed=sub_seed(seed, f"{name}/inject/{r}"))
        spans.append((start, start + ex.total_epochs))
    return trace, spans


def make_dataset(config: ExperimentConfig, bundle: ProfileBundle,
                 epoch_instructions: int | None = None) -> Dataset:
    ei = epoch_instructions or config.epoch_instructions
    s = config.seed
    train_clean = gen_benign(bundle.benign, config.train_epochs, ei, seed=sub_seed(s, "synth/train"))
    test_clean = gen_benign(bundle.benign, config.test_epochs, ei, seed=sub_seed(s, "synth/test"))
    selection, _ = exploit_trace(bundle, config.selection_runs, config.run_epochs, ei, s, "synth/select")
    test_exploit, spans = exploit_trace(bundle, config.test_runs, config.run_epochs, ei, s, "synth/exploit")

    def noisy(t: Trace, name: str) -> Trace:
        return mix_context_noise(t, bundle.noise, bundle.foreign, seed=sub_seed(s, f"noise/{name}"))

    return Dataset(
        noisy(train_clean, "train"), noisy(selection, "select"),
        noisy(test_clean, "test"), noisy(test_exploit, "exploit"), tuple(spans))


def resolve_event_sets(config: ExperimentConfig, data: Dataset,
                       params: TransformParams) -> tuple[list[EventSet], list]:
    if config.event_sets != "auto":
        sets = []
        for i, spec in enumerate(config.event_sets):
            if isinstance(spec, Mapping):
                sets.append(EventSet(spec.get("label", f"S-{i}"), tuple(spec["events"])))
            else:
                sets.append(EventSet(f"S-{i}", tuple(spec)))
        return sets, []
    category = EventCategory.parse(config.category)
    sets, rankings = [], []
    for token in config.auto_stages:
        stage = StageLabel.parse(token)
        ranking = rank_events(data.train_clean, data.selection, stage, category, params)
        rankings.append(ranking)
        sets.append(select_event_set(ranking))
    return sets, rankings


def feature_meta(events: EventSet, n: int) -> dict:
    return {"set": events.label, "events": [e.value for e in events.events], "temporal_n": n}


def features_from_meta(meta: Mapping) -> tuple[EventSet, int]:
    try:
        return EventSet(meta["set"], tuple(meta["events"])), int(meta["temporal_n"])
    except KeyError as exc:
        raise ValueError(f"model lacks feature metadata {exc}") from None


def vectors_for(trace: Trace, events: EventSet, params: TransformParams, n: int) -> Vectors:
    if n == 1:
        return extract_nontemporal(trace, events, params)
    return extract_temporal(trace, events, params, TemporalConfig(n))


@dataclass
class ModelRun:
    events: EventSet
    mode: str
    n: int
    model: OcSvmModel
    clean_scores: np.ndarray
    exploit_labels: np.ndarray
    exploit_scores: np.ndarray

    def stage_scores(self, stage: StageLabel) -> np.ndarray:
        return self.exploit_scores[self.exploit_labels == int(stage)]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    out_dir: Path
    data: Dataset
    params: TransformParams
    event_sets: list[EventSet]
    runs: list[ModelRun]
    report: list[ReportRow]
    rankings: list = field(default_factory=list)

    def auc(self, stage: str, mode: str, set_label: str | None = None) -> float:
        for r in self.report:
            if r.stage == stage and r.mode == mode and (set_label is None or r.set == set_label):
                return r.auc
        raise KeyError((set_label, stage, mode))

    def run(self, set_label: str, mode: str) -> ModelRun:
        for r in self.runs:
            if r.events.label == set_label and r.mode == mode:
                return r
        raise KeyError((set_label, mode))


def _stage(name: str):
    """Context manager tagging exceptions with the pipeline stage."""
    class _Tag:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc
            return False
    return _Tag()


def train_and_score(config: ExperimentConfig, data: Dataset, params: TransformParams,
                    events: EventSet, mode: str) -> ModelRun:
    n = 1 if mode == "nontemporal" else config.temporal_n
    with _stage(f"train {events.label} {mode}"):
        train_vec = vectors_for(data.train_clean, events, params, n)
        model = train(train_vec.X, TrainConfig(
            nu=config.nu, gamma=config.gamma,
            seed=_seed_int(config.seed, f"train/{events.label}/{mode}")))
        model = replace(model, meta=feature_meta(events, n))
    with _stage(f"score {events.label} {mode}"):
        clean = model.anomaly_scores(vectors_for(data.test_clean, events, params, n).X)
        ex = vectors_for(data.test_exploit, events, params, n)
        keep = ex.labels != int(StageLabel.CLEAN)
        ex_scores = model.anomaly_scores(ex.X[keep])
    return ModelRun(events, mode, n, model, clean, ex.labels[keep], ex_scores)


def run_pipeline(config: ExperimentConfig, bundle: ProfileBundle | None = None,
                 epoch_instructions: int | None = None) -> tuple[Dataset, TransformParams,
                                                                list[EventSet], list, list[ModelRun]]:
    """In-memory pipeline shared by :func:`run_experiment` and the sweeps."""
    with _stage("profile"):
        bundle = bundle or load_bundle(config)
    with _stage("synth"):
        data = make_dataset(config, bundle, epoch_instructions)
    with _stage("fit-transform"):
        params = fit_transform(data.train_clean, data.train_clean.available_events(),
                               skip_degenerate=True)
    with _stage("select"):
        sets, rankings = resolve_event_sets(config, data, params)
    runs = [train_and_score(config, data, params, es, mode) for es in sets for mode in MODES]
    return data, params, sets, rankings, runs


def _report_input(runs: Sequence[ModelRun]) -> dict:
    out: dict = {}
    for r in runs:
        per = out.setdefault(r.events.label, {})
        for stage in (StageLabel.ROP, StageLabel.STAGE1, StageLabel.STAGE2):
            mal = r.stage_scores(stage)
            if mal.size:
                per[(stage.token, r.mode)] = (r.clean_scores, mal)
    return out


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    out = Path(config.out_dir)
    started = time.perf_counter()
    data, params, sets, rankings, runs = run_pipeline(config)
    with _stage("eval"):
        report = compare_models(_report_input(runs))
    with _stage("write"):
        _write_outputs(config, out, data, params, sets, rankings, runs, report)
    if config.figures:
        with _stage("figures"):
            from . import plotting
            plotting.experiment_figures(out / "figures", runs, report)
    log.info("experiment finished in %.1fs -> %s", time.perf_counter() - started, out)
    return ExperimentResult(config, out, data, params, sets, runs, report, rankings)


def _detections(run: ModelRun, data: Dataset, params: TransformParams) -> dict:
    """Exploit-level alerting at the per-epoch operating point with 1.1% FPR."""
    mal = run.exploit_scores
    _, threshold = tpr_at_fpr(roc(run.clean_scores, mal), FPR_BUDGET)
    n = run.n
    # rescore the whole exploit trace in order, clean epochs included
    full = run.model.anomaly_scores(
        vectors_for(data.test_exploit, run.events, params, n).X)
    policy = DetectionPolicy(threshold)
    alerts = detect_exploit(full, policy)
    hit = 0
    for a, b in data.exploit_spans:
        # window index i covers samples i .. i+n-1
        if any(al.start <= b - 1 and al.end + n - 1 > a for al in alerts):
            hit += 1
    false_alerts = len(detect_exploit(run.clean_scores, policy))
    return {"threshold": threshold, "runs": len(data.exploit_spans), "detected": hit,
            "clean_alerts": false_alerts}


def _write_outputs(config, out: Path, data: Dataset, params: TransformParams,
                   sets, rankings, runs: Sequence[ModelRun], report) -> None:
    for sub in ("traces", "models", "scores"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    files = {
        "traces/train_clean.csv": data.train_clean,
        "traces/selection.csv": data.selection,
        "traces/test_clean.csv": data.test_clean,
        "traces/test_exploit.csv": data.test_exploit,
    }
    for name, trace in files.items():
        write_trace(trace, out / name)
    params.save(out / "params.json")

    if rankings:
        with open(out / "ranking.csv", "w") as fh:
            fh.write("stage,category,rank,event,f_score\n")
            for rk in rankings:
                for stage, cat, i, ev, f in rk.rows():
                    fh.write(f"{stage},{cat},{i},{ev},{fmt(f)}\n")

    roc_path = out / "roc.csv"
    first = True
    detections = []
    with open(out / "operating_points.csv", "w") as op:
        op.write("set,stage,mode,fpr_budget,tpr,threshold\n")
        for r in runs:
            tag = f"{r.events.label}_{r.mode}"
            r.model.save(out / "models" / f"{tag}.json")
            labels = np.concatenate([np.zeros(r.clean_scores.size, dtype=int), r.exploit_labels])
            scores = np.concatenate([r.clean_scores, r.exploit_scores])
            write_scores(labels, scores, out / "scores" / f"{tag}.csv")
            for stage in (StageLabel.ROP, StageLabel.STAGE1, StageLabel.STAGE2):
                mal = r.stage_scores(stage)
                if not mal.size:
                    continue
                res = roc(r.clean_scores, mal)
                write_roc(res, roc_path, {"set": r.events.label, "mode": r.mode,
                                          "stage": stage.token}, append=not first)
                first = False
                tpr, th = tpr_at_fpr(res, FPR_BUDGET)
                op.write(f"{r.events.label},{stage.token},{r.mode},{FPR_BUDGET},{fmt(tpr)},{fmt(th)}\n")
            detections.append((r, _detections(r, data, params)))

    with open(out / "detections.csv", "w") as fh:
        fh.write("set,mode,threshold,runs,detected,clean_alerts\n")
        for r, d in detections:
            fh.write(f"{r.events.label},{r.mode},{fmt(d['threshold'])},{d['runs']},"
                     f"{d['detected']},{d['clean_alerts']}\n")

    write_report(report, out / "report.csv")
    manifest = {
        "config": config.to_json(),
        "event_sets": [{"label": s.label, "events": [e.value for e in s.events]} for s in sets],
        "partitions": {
            "fit": ["traces/train_clean.csv"],
            "selection": ["traces/train_clean.csv", "traces/selection.csv"],
            "test": ["traces/test_clean.csv", "traces/test_exploit.csv"],
        },
        "train_test_separated": True,
        "seeds": {name: _seed_int(config.seed, name) for name in
                  ("synth/train", "synth/test", "synth/select", "synth/exploit")},
        "files": sorted(str(p.relative_to(out)) for p in out.rglob("*")
                        if p.is_file() and p.suffix in (".csv", ".json")),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- granularity ----------------------------------------------------------------

@dataclass(frozen=True)
class GranularityRow:
    epoch_instructions: int
    stage: str
    auc: float


def granularity_sweep(config: ExperimentConfig, epoch_sizes: Sequence[int],
                      base_noise: float = 0.1) -> list[GranularityRow]:
    """Rerun the pipeline at several epoch sizes.

    Context-switch noise grows in proportion to the epoch size, starting from
    ``base_noise`` at 512K instructions (or the configured/profile fraction
    when that is non-zero). ROP is scored with the non-temporal model, Stage1
    and Stage2 with the temporal one.
    """
    sizes = [int(s) for s in epoch_sizes]
    if len(sizes) < 1 or any(s < 1 for s in sizes):
        raise ValueError("need positive epoch sizes")
    bundle = load_bundle(config)
    f0 = bundle.noise.context_switch_fraction or base_noise
    rows = []
    cfg = config
    if config.event_sets == "auto":
        cfg = replace(config, auto_stages=("stage1",))
    for size in sizes:
        f = min(0.95, f0 * size / REFERENCE_INSTRUCTIONS)
        b = replace(bundle, exploit=bundle.exploit.at_granularity(size), noise=NoiseConfig(f))
        _, _, sets, _, runs = run_pipeline(cfg, b, size)
        label = sets[0].label
        by_mode = {r.mode: r for r in runs if r.events.label == label}
        for stage, mode in (("rop", "nontemporal"), ("stage1", "temporal"), ("stage2", "temporal")):
            r = by_mode[mode]
            mal = r.stage_scores(StageLabel.parse(stage))
            if mal.size:
                rows.append(GranularityRow(size, stage, roc(r.clean_scores, mal).auc))
    return rows


def write_granularity(rows: Sequence[GranularityRow], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch_instructions,stage,auc\n")
        for r in rows:
            fh.write(f"{r.epoch_instructions},{r.stage},{fmt(r.auc)}\n")


def read_granularity(path: str | Path) -> list[GranularityRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "epoch_instructions,stage,auc":
        raise ValueError(f"{path}: not a granularity sweep file")
    out = []
    for line in lines[1:]:
        ei, stage, a = line.split(",")
        out.append(GranularityRow(int(ei), stage, float(a)))
    return out
