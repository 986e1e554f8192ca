import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from hpcdetect.trace_model import EventKind, Sample, StageLabel, Trace  # noqa: E402

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=100)
settings.load_profile("default")

REPO = Path(__file__).resolve().parent.parent
CONFIGS = REPO / "configs"


def make_trace(rows, columns=(EventKind.Store, EventKind.Load), epoch_instructions=512_000):
    """rows: iterable of (epoch, pid, stage, [counts...])."""
    samples = [Sample(e, p, StageLabel(s), dict(zip(columns, c))) for e, p, s, c in rows]
    return Trace(tuple(samples), tuple(columns), epoch_instructions)


@pytest.fixture
def small_trace():
    rng = np.random.default_rng(5)
    rows = [(i, 4 if i % 3 else 7, 0, rng.integers(0, 100, size=2).tolist()) for i in range(10)]
    return make_trace(rows)


@pytest.fixture(scope="session")
def experiment_result(tmp_path_factory):
    """One default experiment shared by the slower integration tests."""
    from hpcdetect.pipeline import ExperimentConfig, run_experiment
    out = tmp_path_factory.mktemp("experiment")
    return run_experiment(ExperimentConfig(seed=7, out_dir=str(out), figures=False))


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
