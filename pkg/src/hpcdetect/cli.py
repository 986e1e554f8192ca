"""Command-line entry point: ``hpcdetect <subcommand> ...``.

Each subcommand reads and writes the plain file formats of the library
(trace CSV, params JSON, model JSON, vectors/scores/report CSV), so the
individual steps of an experiment can be run and inspected one by one.
"""
from __future__ import annotations

import argparse
import csv
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import OcSvmModel, TrainConfig, train
from .evaluation import (
    MODES,
    compare_models,
    fmt,
    read_scores,
    roc,
    stage_rows,
    write_report,
    write_roc,
    write_scores,
)
from .features import TemporalConfig, Vectors, rank_events, select_event_set
from .mimicry import NoopSegment, PaddingContext, PaddingSweep, sweep_padding, tipping_point, write_sweep
from .pipeline import (
    ExperimentConfig,
    StageError,
    exploit_trace,
    feature_meta,
    features_from_meta,
    granularity_sweep,
    read_config_doc,
    run_experiment,
    vectors_for,
    write_granularity,
)
from .preprocess import TransformParams, fit_transform
from .recorder import Recorder, RecorderConfig
from .synth import NoiseConfig, gen_benign, inject_exploit, load_profile, mix_context_noise, sub_seed
from .trace_model import EventSet, StageLabel, Trace, concat_traces
from .tracefile import read_trace, write_trace

log = logging.getLogger("hpcdetect")

DEFAULT_SIZES = "64000,128000,256000,512000,1024000"


# -- small parsers --------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _gamma(text: str) -> float | None:
    if text == "auto":
        return None
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"gamma must be a number or 'auto', got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("gamma must be positive")
    return value


def _event_set(text: str) -> EventSet:
    """``Load,Store,Br,Call`` or ``LABEL:Load,Store,Br,Call``."""
    label, _, events = text.rpartition(":")
    try:
        return EventSet(label or "custom", tuple(e.strip() for e in events.split(",")))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _read_traces(paths: Sequence[str]) -> Trace:
    traces = [read_trace(p) for p in paths]
    return traces[0] if len(traces) == 1 else concat_traces(traces)


def write_vectors(vec: Vectors, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "stage", *(f"x{i}" for i in range(vec.dim))])
        for i, (x, y) in enumerate(vec):
            w.writerow([i, y.token, *(fmt(v) for v in x)])


def read_vectors(path: str | Path) -> Vectors:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["index", "stage"]:
        raise ValueError(f"{path}: not a vectors file")
    dim = len(rows[0]) - 2
    X = np.array([[float(v) for v in r[2:]] for r in rows[1:]], dtype=float).reshape(-1, dim)
    labels = np.array([int(StageLabel.parse(r[1])) for r in rows[1:]], dtype=int)
    return Vectors(X, labels)


def _features(args, model: OcSvmModel | None = None) -> tuple[EventSet, int]:
    """Event set and window size from flags, else from the model's metadata."""
    if getattr(args, "events", None) is not None:
        return args.events, args.n if args.n is not None else 1
    if model is not None and model.meta:
        events, n = features_from_meta(model.meta)
        return events, args.n if getattr(args, "n", None) is not None else n
    raise ValueError("--events is required (the model carries no feature metadata)")


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> None:
    bundle = load_profile(args.profile)
    ei = args.epoch_instructions
    if args.exploit_runs:
        trace, spans = exploit_trace(bundle, args.exploit_runs, args.run_epochs, ei, args.seed, "cli/exploit")
        log.info("injected %d exploits at %s", len(spans), spans)
    else:
        trace = gen_benign(bundle.benign, args.epochs, ei, seed=sub_seed(args.seed, "cli/benign"),
                           pid=args.pid)
        for i, at in enumerate(args.inject_at or ()):
            trace = inject_exploit(trace, bundle.exploit, at, seed=sub_seed(args.seed, f"cli/inject/{i}"))
    noise = bundle.noise if args.noise is None else NoiseConfig(args.noise)
    trace = mix_context_noise(trace, noise, bundle.foreign, seed=sub_seed(args.seed, "cli/noise"))
    write_trace(trace, args.out)
    print(f"wrote {len(trace)} samples to {args.out}")


def cmd_record(args) -> None:
    cfg = RecorderConfig(args.listen, args.out, args.max_connections, args.epoch_instructions)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    rec = Recorder(cfg).start()
    host, port = rec.address
    print(f"recording on {host}:{port} -> {args.out}", flush=True)
    stop.wait(args.duration)
    path = rec.stop()
    print(f"persisted {rec.records_received} records to {path}")


def cmd_fit_transform(args) -> None:
    trace = _read_traces(args.train)
    params = fit_transform(trace, trace.available_events(), args.target_median, skip_degenerate=True)
    params.save(args.out)
    print(f"fitted {len(params.events)} events -> {args.out}")


def cmd_select(args) -> None:
    params = TransformParams.load(args.params) if args.params else None
    ranking = rank_events(_read_traces(args.clean), _read_traces(args.staged),
                          StageLabel.parse(args.stage), args.category, params)
    es = select_event_set(ranking, args.k)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("stage,category,rank,event,f_score\n")
            for stage, cat, i, ev, f in ranking.rows():
                fh.write(f"{stage},{cat},{i},{ev},{fmt(f)}\n")
    print(f"{es.label}:{','.join(e.value for e in es.events)}")


def cmd_extract(args) -> None:
    params = TransformParams.load(args.params)
    vec = vectors_for(_read_traces(args.trace), args.events, params, args.n or 1)
    write_vectors(vec, args.out)
    print(f"wrote {len(vec)} vectors of dimension {vec.dim} to {args.out}")


def cmd_train(args) -> None:
    cfg = TrainConfig(nu=args.nu, gamma=args.gamma, seed=args.seed)
    if args.vectors:
        vec = read_vectors(args.vectors)
        X, meta = vec.of(StageLabel.CLEAN), {}
    else:
        if not (args.trace and args.params and args.events):
            raise ValueError("give --vectors, or --trace with --params and --events")
        n = args.n or 1
        vec = vectors_for(_read_traces(args.trace), args.events, TransformParams.load(args.params), n)
        X, meta = vec.of(StageLabel.CLEAN), feature_meta(args.events, n)
    model = train(X, cfg)
    OcSvmModel(model.support_vectors, model.alphas, model.rho, model.gamma, model.nu,
               model.dim, meta).save(args.out)
    print(f"trained on {len(X)} vectors: {len(model.alphas)} support vectors, rho={model.rho:.6g}")


def cmd_score(args) -> None:
    model = OcSvmModel.load(args.model)
    if args.vectors:
        vec = read_vectors(args.vectors)
    else:
        if not (args.trace and args.params):
            raise ValueError("give --vectors, or --trace with --params")
        events, n = _features(args, model)
        vec = vectors_for(_read_traces(args.trace), events, TransformParams.load(args.params), n)
    write_scores(vec.labels, model.anomaly_scores(vec.X), args.out)
    print(f"scored {len(vec)} vectors -> {args.out}")


def _split_scores(path: str, clean_path: str | None):
    labels, scores = read_scores(path)
    if clean_path:
        cl, cs = read_scores(clean_path)
        mal = labels != int(StageLabel.CLEAN)
        labels = np.concatenate([cl[cl == int(StageLabel.CLEAN)], labels[mal]])
        scores = np.concatenate([cs[cl == int(StageLabel.CLEAN)], scores[mal]])
    pairs = stage_rows(labels, scores)
    if not pairs:
        raise ValueError(f"{path}: need both clean and exploit-stage scores")
    return pairs


def _set_mode(path: str, set_label: str | None, mode: str | None) -> tuple[str, str]:
    stem = Path(path).stem
    guess_set, _, guess_mode = stem.rpartition("_")
    if guess_mode not in MODES:
        guess_set, guess_mode = stem, "temporal"
    return set_label or guess_set, mode or guess_mode


def cmd_eval(args) -> None:
    runs: dict = {}
    for path in args.scores:
        label, mode = _set_mode(path, args.set if len(args.scores) == 1 else None, args.mode)
        per = runs.setdefault(label, {})
        for stage, pair in _split_scores(path, args.clean_scores).items():
            per[(stage, mode)] = pair
    rows = compare_models(runs)
    write_report(rows, args.out)
    for r in rows:
        print(f"{r.set:8s} {r.mode:12s} {r.stage:7s} AUC={r.auc:.4f}")


def cmd_roc(args) -> None:
    pairs = _split_scores(args.scores, args.clean_scores)
    stages = [args.stage] if args.stage else list(pairs)
    curves = {}
    for i, stage in enumerate(stages):
        if stage not in pairs:
            raise ValueError(f"no {stage} scores in {args.scores}")
        res = roc(*pairs[stage])
        write_roc(res, args.out, {"stage": stage}, append=i > 0)
        curves[f"{Path(args.scores).stem} {stage}"] = (res.fpr, res.tpr, res.auc)
        print(f"{stage}: AUC={res.auc:.4f} ({len(res.fpr)} points)")
    if args.figure:
        from .plotting import plot_roc_curves
        plot_roc_curves(curves, args.figure)


def cmd_mimicry(args) -> None:
    model = OcSvmModel.load(args.model)
    exp = Path(args.experiment) if args.experiment else None
    params_path = args.params or (exp / "params.json" if exp else None)
    trace_path = args.trace or (exp / "traces" / "test_exploit.csv" if exp else None)
    clean_path = args.clean or (exp / "traces" / "test_clean.csv" if exp else None)
    if not (params_path and trace_path and clean_path):
        raise ValueError("give --experiment DIR, or all of --params, --trace and --clean")
    params = TransformParams.load(params_path)
    events, n = _features(args, model)
    clean_scores = model.anomaly_scores(vectors_for(read_trace(clean_path), events, params, n).X)
    context = PaddingContext(params, events, TemporalConfig(n), clean_scores,
                             read_trace(trace_path), StageLabel.parse(args.stage), args.seed)
    segment = NoopSegment.load(args.segment)
    keep: dict = {}
    rows = sweep_padding(model, context, PaddingSweep(segment, args.counts), keep_scores=keep)
    write_sweep(rows, args.out)
    for r in rows:
        print(f"count={r.count:7d} median={r.median:+.5f} AUC={r.auc:.4f}")
    tp = tipping_point(rows)
    print(f"tipping point: {tp.count if tp else 'none'}")
    if args.figure:
        from .plotting import plot_padding_sweep
        plot_padding_sweep(rows, keep, args.figure, segment.name)


def _experiment_config(args) -> ExperimentConfig:
    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "profile": args.profile,
        "exploit_profile": args.exploit_profile,
        "temporal_n": args.temporal_n,
        "nu": args.nu,
        "gamma": args.gamma,
        "epoch_instructions": args.epoch_instructions,
        "train_epochs": args.train_epochs,
        "test_epochs": args.test_epochs,
        "category": args.category,
        "noise_fraction": args.noise,
    }
    if args.event_sets:
        overrides["event_sets"] = [
            {"label": es.label, "events": [e.value for e in es.events]} for es in args.event_sets]
    if args.no_figures:
        overrides["figures"] = False
    doc = read_config_doc(args.config) if args.config else {}
    if overrides["seed"] is None and doc.get("seed") is None:
        raise ValueError("a seed is required: pass --seed or set it in the config file")
    return ExperimentConfig.from_mapping(doc, **overrides)


def cmd_experiment(args) -> None:
    result = run_experiment(_experiment_config(args))
    for s in result.event_sets:
        print(s)
    for r in result.report:
        print(f"{r.set:8s} {r.mode:12s} {r.stage:7s} AUC={r.auc:.4f}")
    print(f"outputs in {result.out_dir}")


def cmd_granularity(args) -> None:
    config = _experiment_config(args)
    rows = granularity_sweep(config, args.sizes, args.base_noise)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_granularity(rows, out / "granularity.csv")
    if config.figures:
        from .plotting import plot_granularity
        plot_granularity(rows, out / "granularity.png")
    for r in rows:
        print(f"{r.epoch_instructions:8d} {r.stage:7s} AUC={r.auc:.4f}")


# -- argument parser ------------------------------------------------------------

def _experiment_flags(p: argparse.ArgumentParser, default_out: str) -> None:
    p.add_argument("--config", help="experiment JSON; flags override its keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default from config, else {default_out})")
    p.add_argument("--profile", help="benign/exploit/noise profile JSON")
    p.add_argument("--exploit-profile", help="profile JSON whose exploit section overrides --profile's")
    p.add_argument("--event-sets", type=_event_set, nargs="+",
                   help="fixed sets as LABEL:E1,E2,E3,E4 (default: auto selection)")
    p.add_argument("--category", choices=["architectural", "microarchitectural", "both"])
    p.add_argument("--temporal-n", type=int)
    p.add_argument("--nu", type=float)
    p.add_argument("--gamma", type=_gamma)
    p.add_argument("--epoch-instructions", type=int)
    p.add_argument("--train-epochs", type=int)
    p.add_argument("--test-epochs", type=int)
    p.add_argument("--noise", type=float, help="context-switch fraction for every trace")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(default_out=default_out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hpcdetect",
        description="Anomaly-based exploit detection from hardware performance counter traces.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic trace")
    p.add_argument("--profile")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=2000, help="benign epochs (ignored with --exploit-runs)")
    p.add_argument("--inject-at", type=_int_list,
                   help="comma-separated epoch positions to inject the exploit at")
    p.add_argument("--exploit-runs", type=int, default=0,
                   help="generate this many fixed-length runs, one exploit each (ignores --epochs)")
    p.add_argument("--run-epochs", type=int, help="epochs per exploit run")
    p.add_argument("--epoch-instructions", type=int, default=512_000)
    p.add_argument("--pid", type=int, default=1000)
    p.add_argument("--noise", type=float, help="context-switch fraction (default: profile)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("record", help="receive counter records over TCP and persist a trace")
    p.add_argument("--listen", default="127.0.0.1:5140", help="host:port (port 0 picks one)")
    p.add_argument("--out", required=True)
    p.add_argument("--max-connections", "--max-conn", type=int, default=4)
    p.add_argument("--epoch-instructions", type=int, default=512_000)
    p.add_argument("--duration", type=float, help="stop after this many seconds (default: until SIGINT)")
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("fit-transform", help="fit min/max/lambda on clean training traces")
    p.add_argument("--train", "--in", dest="train", nargs="+", required=True)
    p.add_argument("--target-median", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_transform)

    p = sub.add_parser("select", help="rank events by F-score and pick a 4-event set")
    p.add_argument("--clean", nargs="+", required=True)
    p.add_argument("--staged", nargs="+", required=True, help="labelled traces holding the stage")
    p.add_argument("--params", help="rank transformed values (recommended)")
    p.add_argument("--stage", default="stage1", choices=["rop", "stage1", "stage2"])
    p.add_argument("--category", default="both", choices=["architectural", "microarchitectural", "both"])
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--out", help="ranking CSV")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("extract", help="build feature vectors from a trace")
    p.add_argument("--trace", nargs="+", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--events", type=_event_set, required=True)
    p.add_argument("--n", type=int, default=1, help="epochs per vector (1 = non-temporal)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a one-class SVM on clean vectors")
    p.add_argument("--vectors", "--in", dest="vectors")
    p.add_argument("--trace", nargs="+")
    p.add_argument("--params")
    p.add_argument("--events", type=_event_set)
    p.add_argument("--n", type=int)
    p.add_argument("--nu", type=float, default=0.05)
    p.add_argument("--gamma", type=_gamma, help="RBF width, or 'auto' for 1/d (default)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="anomaly scores for vectors or a trace")
    p.add_argument("--model", required=True)
    p.add_argument("--vectors", "--in", dest="vectors")
    p.add_argument("--trace", nargs="+")
    p.add_argument("--params")
    p.add_argument("--events", type=_event_set, help="default: from the model")
    p.add_argument("--n", type=int, help="default: from the model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="AUC report from score files")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--clean-scores", help="clean scores, when the score files hold none")
    p.add_argument("--set", help="event-set label (default: file stem)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", "--report", dest="out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roc", help="ROC points from a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--clean-scores")
    p.add_argument("--stage", choices=["rop", "stage1", "stage2"])
    p.add_argument("--out", required=True)
    p.add_argument("--figure", help="also render a PNG")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("mimicry", help="no-op padding sweep against a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--segment", required=True)
    p.add_argument("--counts", type=_int_list, required=True)
    p.add_argument("--experiment", help="experiment directory supplying params and test traces")
    p.add_argument("--params")
    p.add_argument("--trace", help="exploit trace to pad")
    p.add_argument("--clean", help="clean test trace for the AUC")
    p.add_argument("--events", type=_event_set)
    p.add_argument("--n", type=int)
    p.add_argument("--stage", default="stage1", choices=["rop", "stage1", "stage2"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--figure", help="also render box plots to this PNG")
    p.set_defaults(func=cmd_mimicry)

    p = sub.add_parser("experiment", help="full pipeline: synth, fit, select, train, score, eval")
    _experiment_flags(p, "experiment-out")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("granularity-sweep", help="repeat the pipeline at several epoch sizes")
    _experiment_flags(p, "granularity-out")
    p.add_argument("--sizes", type=_int_list, default=_int_list(DEFAULT_SIZES))
    p.add_argument("--base-noise", type=float, default=0.1,
                   help="context-switch fraction at 512K instructions")
    p.set_defaults(func=cmd_granularity)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "default_out") and args.out is None and not args.config:
        args.out = args.default_out
    try:
        args.func(args)
    except StageError as exc:
        print(f"hpcdetect {args.command}: [{exc.stage}] {type(exc.cause).__name__}: {exc.cause}",
              file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"hpcdetect {args.command}: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
