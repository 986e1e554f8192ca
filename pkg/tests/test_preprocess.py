import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_trace
from hpcdetect.preprocess import (
    DegenerateColumnError,
    EventParams,
    TransformParams,
    fit_lambda,
    fit_minmax,
    fit_transform,
    transform,
    transform_trace,
)
from hpcdetect.synth import default_benign_profile, gen_benign
from hpcdetect.trace_model import EventKind, EventSet, Sample, StageLabel

E = EventKind


def test_fit_minmax_examples():
    assert fit_minmax({E.Store: [2, 5, 9]}) == {E.Store: (2.0, 9.0)}
    with pytest.raises(DegenerateColumnError, match="Store"):
        fit_minmax({E.Store: [4, 4, 4]})
    with pytest.raises(DegenerateColumnError):
        fit_minmax({E.Store: []})


def test_fit_minmax_on_trace_and_trace_list():
    a = make_trace([(0, 1, 0, [3, 10]), (1, 1, 0, [7, 2])])
    b = make_trace([(0, 1, 0, [1, 50]), (1, 1, 0, [2, 40])])
    assert fit_minmax(a) == {E.Store: (3.0, 7.0), E.Load: (2.0, 10.0)}
    assert fit_minmax([a, b]) == {E.Store: (1.0, 7.0), E.Load: (2.0, 50.0)}
    assert fit_minmax(a, [E.Load]) == {E.Load: (2.0, 10.0)}


@pytest.mark.parametrize("m, lam", [(0.5, 1.0), (0.25, 0.5), (0.0625, 0.25)])
def test_fit_lambda_closed_form(m, lam):
    # three values with median at m on a [0, 1] range
    assert fit_lambda([0.0, m, 1.0], 0.0, 1.0) == pytest.approx(lam, rel=1e-12)


def test_fit_lambda_degenerate_median():
    with pytest.raises(DegenerateColumnError):
        fit_lambda([0, 0, 0, 1], 0, 1)
    with pytest.raises(DegenerateColumnError):
        fit_lambda([0, 1, 1], 0, 1)
    with pytest.raises(ValueError):
        fit_lambda([0, 0.5, 1], 0, 1, target_median=1.0)


def test_event_params_validation():
    with pytest.raises(ValueError):
        EventParams(3, 3, 1)
    with pytest.raises(ValueError):
        EventParams(0, 1, 0)


def test_boundaries_and_clamp():
    p = EventParams(10.0, 110.0, 0.7)
    assert p.apply(10.0) == 0.0
    assert p.apply(110.0) == 1.0
    assert p.apply(5000.0) == 1.0
    assert p.apply(-5.0) == 0.0


def test_training_median_hits_target():
    t = gen_benign(default_benign_profile(), 10_001, seed=21)
    params = fit_transform(t, t.event_columns)
    for e in t.event_columns:
        out = params[e].apply(t.column(e))
        assert np.median(out) == pytest.approx(0.5, abs=1e-9), e
        assert out.min() >= 0.0 and out.max() <= 1.0


@given(st.floats(0.05, 20.0), st.lists(st.floats(0.0, 1000.0), min_size=2, max_size=2))
def test_rank_preservation(lam, pair):
    p = EventParams(0.0, 1000.0, lam)
    a, b = pair
    ta, tb = float(p.apply(a)), float(p.apply(b))
    if a < b:
        assert ta <= tb
    elif a > b:
        assert ta >= tb
    else:
        assert ta == tb


@given(st.floats(-1e6, 1e6), st.floats(0.1, 10.0))
def test_outputs_in_unit_interval(raw, lam):
    assert 0.0 <= float(EventParams(-10.0, 10.0, lam).apply(raw)) <= 1.0


def test_transform_sample_in_event_set_order():
    params = TransformParams({E.Store: EventParams(0, 100, 1.0), E.Load: EventParams(0, 10, 2.0),
                              E.Br: EventParams(0, 4, 1.0), E.Ret: EventParams(0, 8, 0.5)})
    s = Sample(0, 1, StageLabel.CLEAN, {E.Store: 50, E.Load: 5, E.Br: 1, E.Ret: 2})
    es = EventSet("x", (E.Ret, E.Load, E.Store, E.Br))
    np.testing.assert_allclose(transform(s, params, es), [0.5, 0.25, 0.5, 0.25])


def test_transform_derived_event():
    params = TransformParams({E.PctMisp_Br: EventParams(0.0, 0.1, 1.0)})
    s = Sample(0, 1, StageLabel.CLEAN, {E.Misp_Br: 5, E.Br: 100})
    np.testing.assert_allclose(transform(s, params, [E.PctMisp_Br]), [0.5])


def test_unfitted_event_raises():
    params = TransformParams({E.Store: EventParams(0, 1, 1)})
    s = Sample(0, 1, StageLabel.CLEAN, {E.Store: 1, E.Load: 1})
    with pytest.raises(KeyError, match="Load"):
        transform(s, params, [E.Store, E.Load])


def test_transform_trace_matches_per_sample(small_trace):
    params = fit_transform(small_trace)
    M = transform_trace(small_trace, params, small_trace.event_columns)
    for i, s in enumerate(small_trace):
        np.testing.assert_allclose(M[i], transform(s, params, small_trace.event_columns))


def test_fit_transform_skip_degenerate():
    t = make_trace([(i, 1, 0, [i % 5 + 1, 7]) for i in range(10)])
    with pytest.raises(DegenerateColumnError, match="Load"):
        fit_transform(t)
    params = fit_transform(t, skip_degenerate=True)
    assert E.Store in params and E.Load not in params


def test_params_json_layout_and_round_trip(tmp_path):
    t = gen_benign(default_benign_profile(), 500, seed=2)
    params = fit_transform(t, t.event_columns)
    path = tmp_path / "params.json"
    params.save(path)
    doc = json.loads(path.read_text())
    assert doc["target_median"] == 0.5
    assert set(doc["events"]["Store"]) == {"min", "max", "lambda"}
    back = TransformParams.load(path)
    assert back == params
    assert math.isclose(back[E.Store].lam, params[E.Store].lam, rel_tol=0, abs_tol=0)
