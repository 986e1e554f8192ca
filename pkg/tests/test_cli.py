import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import CONFIGS
from hpcdetect.cli import build_parser, main, read_vectors
from hpcdetect.detector import OcSvmModel
from hpcdetect.evaluation import read_report, read_scores
from hpcdetect.mimicry import read_sweep
from hpcdetect.pipeline import read_granularity
from hpcdetect.preprocess import TransformParams
from hpcdetect.recorder import RecorderClient
from hpcdetect.trace_model import StageLabel
from hpcdetect.tracefile import read_trace

SETS = "AM-1:Misp_Br_C,Call_D,Misp_Br,Store"
SMALL = ["--train-epochs", "400", "--test-epochs", "400", "--no-figures"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def steps(tmp_path_factory):
    """Synthesize, fit and extract once for the step-by-step commands."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "1", "--epochs", "600", "--out", str(d / "clean.csv")]) == 0
    assert main(["synth", "--seed", "2", "--epochs", "600", "--out", str(d / "test.csv")]) == 0
    assert main(["synth", "--seed", "3", "--exploit-runs", "8", "--out", str(d / "exploit.csv")]) == 0
    assert main(["fit-transform", "--train", str(d / "clean.csv"), "--out", str(d / "params.json")]) == 0
    return d


def test_every_subcommand_registered():
    choices = build_parser()._subparsers._group_actions[0].choices
    assert set(choices) == {"synth", "record", "fit-transform", "select", "extract", "train", "score",
                            "eval", "roc", "mimicry", "experiment", "granularity-sweep"}


def test_synth_outputs(steps, tmp_path, capsys):
    t = read_trace(steps / "exploit.csv")
    assert (t.stages == StageLabel.STAGE1).any()
    assert len(read_trace(steps / "clean.csv")) == 600
    code, out, _ = run(capsys, "synth", "--seed", "4", "--epochs", "100", "--inject-at", "10,50",
                       "--noise", "0.2", "--out", tmp_path / "x.csv")
    assert code == 0 and "wrote 100 samples" in out
    assert (read_trace(tmp_path / "x.csv").stages == StageLabel.ROP).sum() == 2


def test_synth_requires_seed(capsys, tmp_path):
    with pytest.raises(SystemExit):
        main(["synth", "--out", str(tmp_path / "x.csv")])
    capsys.readouterr()


def test_fit_transform_and_select(steps, tmp_path, capsys):
    params = TransformParams.load(steps / "params.json")
    assert len(params.events) >= 19
    code, out, _ = run(capsys, "select", "--clean", steps / "clean.csv", "--staged", steps / "exploit.csv",
                       "--params", steps / "params.json", "--stage", "stage1", "--out", tmp_path / "rank.csv")
    assert code == 0
    label, events = out.strip().split(":")
    assert label == "AM-1" and len(events.split(",")) == 4
    assert (tmp_path / "rank.csv").read_text().startswith("stage,category,rank,event,f_score")


def test_extract_train_score_eval_roc(steps, tmp_path, capsys):
    d = tmp_path
    assert run(capsys, "extract", "--trace", steps / "clean.csv", "--params", steps / "params.json",
               "--events", SETS, "--n", "4", "--out", d / "train.csv")[0] == 0
    vec = read_vectors(d / "train.csv")
    assert vec.dim == 16 and len(vec) == 597
    assert run(capsys, "train", "--vectors", d / "train.csv", "--nu", "0.05", "--out", d / "v.json")[0] == 0
    # the trace route stores feature metadata so score needs no --events
    assert run(capsys, "train", "--trace", steps / "clean.csv", "--params", steps / "params.json",
               "--events", SETS, "--n", "4", "--out", d / "AM-1_temporal.json")[0] == 0
    model = OcSvmModel.load(d / "AM-1_temporal.json")
    assert model.meta["temporal_n"] == 4 and model == OcSvmModel.load(d / "v.json")

    assert run(capsys, "score", "--model", d / "AM-1_temporal.json", "--trace", steps / "test.csv",
               "--params", steps / "params.json", "--out", d / "clean_scores.csv")[0] == 0
    assert run(capsys, "score", "--model", d / "AM-1_temporal.json", "--trace", steps / "exploit.csv",
               "--params", steps / "params.json", "--out", d / "AM-1_temporal.csv")[0] == 0
    labels, _ = read_scores(d / "AM-1_temporal.csv")
    assert (labels == StageLabel.STAGE1).any()

    code, out, _ = run(capsys, "eval", "--scores", d / "AM-1_temporal.csv", "--clean-scores",
                       d / "clean_scores.csv", "--out", d / "report.csv")
    assert code == 0
    rows = {(r.set, r.stage, r.mode): r.auc for r in read_report(d / "report.csv")}
    assert rows[("AM-1", "stage1", "temporal")] > 0.9

    code, out, _ = run(capsys, "roc", "--scores", d / "AM-1_temporal.csv", "--clean-scores",
                       d / "clean_scores.csv", "--stage", "stage1", "--out", d / "roc.csv",
                       "--figure", d / "roc.png")
    assert code == 0 and "stage1: AUC=" in out
    assert (d / "roc.csv").read_text().startswith("stage,fpr,tpr,threshold\n")
    assert (d / "roc.png").stat().st_size > 0


def test_score_without_metadata_needs_events(steps, tmp_path, capsys):
    assert run(capsys, "extract", "--trace", steps / "clean.csv", "--params", steps / "params.json",
               "--events", SETS, "--out", tmp_path / "v.csv")[0] == 0
    assert run(capsys, "train", "--in", tmp_path / "v.csv", "--out", tmp_path / "m.json")[0] == 0
    code, _, err = run(capsys, "score", "--model", tmp_path / "m.json", "--trace", steps / "test.csv",
                       "--params", steps / "params.json", "--out", tmp_path / "s.csv")
    assert code == 1
    assert err.startswith("hpcdetect score: [score] ValueError: --events is required")


def test_missing_file_is_reported(capsys, tmp_path):
    code, _, err = run(capsys, "fit-transform", "--train", tmp_path / "nope.csv", "--out", tmp_path / "p.json")
    assert code == 1 and "[fit-transform]" in err and "nope.csv" in err


def test_experiment_flags_override_config(tmp_path, capsys):
    code, out, _ = run(capsys, "experiment", "--config", CONFIGS / "experiment.json", "--seed", "3",
                       "--out", tmp_path, "--event-sets", SETS, "--temporal-n", "2", *SMALL)
    assert code == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    cfg = manifest["config"]
    assert cfg["seed"] == 3 and cfg["temporal_n"] == 2 and cfg["figures"] is False
    assert cfg["nu"] == 0.05
    assert manifest["event_sets"] == [{"label": "AM-1", "events": ["Misp_Br_C", "Call_D", "Misp_Br", "Store"]}]
    assert "AM-1" in out and "outputs in" in out
    assert not (tmp_path / "figures").exists()


def test_experiment_requires_seed(tmp_path, capsys):
    code, _, err = run(capsys, "experiment", "--out", tmp_path, *SMALL)
    assert code == 1 and "seed is required" in err


def test_experiment_stage_tagged_error(tmp_path, capsys):
    code, _, err = run(capsys, "experiment", "--seed", "1", "--out", tmp_path, "--nu", "0.0001", *SMALL)
    assert code == 1
    assert err.startswith("hpcdetect experiment: [train ")
    assert "ValueError" in err


def test_mimicry_from_experiment_dir(tmp_path, capsys):
    exp = tmp_path / "exp"
    assert run(capsys, "experiment", "--seed", "7", "--out", exp, "--event-sets", SETS, *SMALL)[0] == 0
    code, out, _ = run(capsys, "mimicry", "--model", exp / "models" / "AM-1_temporal.json",
                       "--segment", CONFIGS / "call_branch_noop.json", "--counts", "0,5000,60000",
                       "--experiment", exp, "--out", tmp_path / "sweep.csv", "--figure", tmp_path / "sweep.png")
    assert code == 0 and "tipping point:" in out
    rows = read_sweep(tmp_path / "sweep.csv")
    assert [r.count for r in rows] == [0, 5000, 60000]
    assert (tmp_path / "sweep.png").stat().st_size > 0


def test_granularity_sweep_command(tmp_path, capsys):
    code, out, _ = run(capsys, "granularity-sweep", "--seed", "5", "--out", tmp_path, "--sizes", "256000,512000",
                       "--event-sets", SETS, "--train-epochs", "400", "--test-epochs", "400")
    assert code == 0
    rows = read_granularity(tmp_path / "granularity.csv")
    assert {r.epoch_instructions for r in rows} == {256000, 512000}
    assert (tmp_path / "granularity.png").stat().st_size > 0


def test_record_subprocess(tmp_path):
    out = tmp_path / "rec.csv"
    proc = subprocess.Popen(
        [sys.executable, "-m", "hpcdetect.cli", "record", "--listen", "127.0.0.1:0", "--out", str(out),
         "--duration", "5"], stdout=subprocess.PIPE, text=True)
    try:
        first = proc.stdout.readline()
        assert first.startswith("recording on 127.0.0.1:")
        port = int(first.split()[2].rsplit(":", 1)[1])
        with RecorderClient("127.0.0.1", port) as c:
            assert c.handshake() == "OK v1"
            assert c.send_lines([f"RECORD {i} 9 clean Store={i},Load=1" for i in range(50)]) == ["OK"] * 50
            assert c.request("RECORD x") == "ERR malformed"
        proc.terminate()
        rest, _ = proc.communicate(timeout=10)
    finally:
        proc.kill()
    assert "persisted 50 records" in rest
    t = read_trace(out)
    np.testing.assert_array_equal(t.column("Store"), np.arange(50))
