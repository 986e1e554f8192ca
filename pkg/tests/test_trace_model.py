import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_trace
from hpcdetect.synth import default_benign_profile, default_exploit_profile, gen_benign, inject_exploit
from hpcdetect.trace_model import (
    ARCHITECTURAL,
    BASE_EVENTS,
    DERIVED,
    DERIVED_PARTS,
    MICROARCHITECTURAL,
    Category,
    EventKind,
    EventSet,
    Sample,
    StageLabel,
    Trace,
    concat_traces,
    derived_value,
    filter_by_pid,
    validate_trace,
)

E = EventKind


def test_event_counts_per_category():
    assert len(ARCHITECTURAL) == 8
    assert len(MICROARCHITECTURAL) == 11
    assert len(DERIVED) == 3
    assert len(set(EventKind)) == 22
    assert all(e.category is Category.ARCHITECTURAL for e in ARCHITECTURAL)
    assert all(e.category is Category.MICROARCHITECTURAL for e in MICROARCHITECTURAL)
    assert all(e.category is Category.DERIVED for e in DERIVED)


def test_derived_kinds_reference_two_base_kinds():
    for kind, (num, den) in DERIVED_PARTS.items():
        assert kind.is_derived
        assert num in BASE_EVENTS and den in BASE_EVENTS and num != den


def test_event_parse_rejects_unknown():
    assert EventKind.parse("Misp_Br") is E.Misp_Br
    with pytest.raises(ValueError, match="Bogus"):
        EventKind.parse("Bogus")


def test_stage_order_and_tokens():
    assert StageLabel.CLEAN < StageLabel.ROP < StageLabel.STAGE1 < StageLabel.STAGE2
    assert [s.token for s in StageLabel] == ["clean", "rop", "stage1", "stage2"]
    assert StageLabel.parse("stage2") is StageLabel.STAGE2
    with pytest.raises(ValueError):
        StageLabel.parse("stage3")


@pytest.mark.parametrize("num, den, parts, expected", [
    (5, 100, (E.Misp_Br, E.Br), 0.05),
    (7, 0, (E.Misp_Ret, E.Ret), 0.0),
    (3, 12, (E.Mis_Llc, E.Llc), 0.25),
])
def test_derived_value_examples(num, den, parts, expected):
    kind = next(k for k, p in DERIVED_PARTS.items() if p == parts)
    s = Sample(0, 1, StageLabel.CLEAN, {parts[0]: num, parts[1]: den})
    assert derived_value(s, kind) == expected


def test_derived_value_missing_constituent_names_it():
    s = Sample(0, 1, StageLabel.CLEAN, {E.Misp_Br: 1})
    with pytest.raises(KeyError, match="Br"):
        derived_value(s, E.PctMisp_Br)
    with pytest.raises(ValueError):
        derived_value(s, E.Store)


@given(st.integers(0, 10**6), st.integers(1, 10**6), st.integers(1, 1000))
def test_derived_value_scale_covariant(num, den, c):
    a = Sample(0, 1, StageLabel.CLEAN, {E.Misp_Br: num, E.Br: den})
    b = Sample(0, 1, StageLabel.CLEAN, {E.Misp_Br: num * c, E.Br: den * c})
    assert derived_value(a, E.PctMisp_Br) == pytest.approx(derived_value(b, E.PctMisp_Br), rel=1e-12)


def test_trace_column_computes_derived_ratio():
    t = make_trace([(0, 1, 0, [5, 100, 0, 0]), (1, 1, 0, [0, 0, 3, 12])],
                   columns=(E.Misp_Br, E.Br, E.Mis_Llc, E.Llc))
    np.testing.assert_allclose(t.column(E.PctMisp_Br), [0.05, 0.0])
    np.testing.assert_allclose(t.column(E.PctMis_Llc), [0.0, 0.25])
    assert set(t.available_events()) == {E.Misp_Br, E.Br, E.Mis_Llc, E.Llc, E.PctMisp_Br, E.PctMis_Llc}
    with pytest.raises(KeyError):
        t.column(E.PctMisp_Ret)


def test_from_arrays_matches_sample_construction():
    counts = np.array([[1, 2], [3, 4]])
    a = Trace.from_arrays([0, 1], [9, 9], [0, 2], counts, (E.Store, E.Load))
    b = make_trace([(0, 9, 0, [1, 2]), (1, 9, 2, [3, 4])])
    assert a == b
    np.testing.assert_array_equal(a.matrix(), b.matrix())


def test_event_set_invariants():
    es = EventSet("AM-1", ("Store", "Load", "Misp_Ret", "Call_ID"))
    assert es.events == (E.Store, E.Load, E.Misp_Ret, E.Call_ID)
    assert str(es) == "AM-1{Store,Load,Misp_Ret,Call_ID}"
    with pytest.raises(ValueError, match="exactly 4"):
        EventSet("x", (E.Store, E.Load, E.Br))
    with pytest.raises(ValueError, match="duplicate"):
        EventSet("x", (E.Store, E.Store, E.Br, E.Load))
    with pytest.raises(ValueError, match="derived"):
        EventSet("x", (E.Store, E.PctMisp_Br, E.Br, E.Load))


def test_validate_well_formed(small_trace):
    report = validate_trace(small_trace)
    assert report.ok and len(report) == 0


def test_validate_monotonicity_violation_at_index_2():
    t = make_trace([(0, 1, 0, [1, 1]), (2, 1, 0, [1, 1]), (1, 1, 0, [1, 1])])
    report = validate_trace(t)
    assert not report.ok
    assert [(v.index, v.kind) for v in report.violations] == [(2, "monotonicity")]


def test_validate_missing_column():
    samples = (Sample(0, 1, StageLabel.CLEAN, {E.Store: 1, E.Load: 2}),
               Sample(1, 1, StageLabel.CLEAN, {E.Load: 2}))
    report = validate_trace(Trace(samples, (E.Store, E.Load)))
    assert [(v.index, v.kind) for v in report.violations] == [(1, "columns")]
    assert "Store" in report.violations[0].message


def test_validate_negative_count_and_derived_column():
    samples = (Sample(0, 1, StageLabel.CLEAN, {E.Store: -1}),)
    report = validate_trace(Trace(samples, (E.Store,)))
    assert [v.kind for v in report.violations] == ["count"]
    bad = Trace((), (E.Store, E.PctMisp_Br))
    assert [v.kind for v in validate_trace(bad).violations] == ["columns"]


def test_filter_by_pid_examples():
    rng = np.random.default_rng(1)
    pids = [4] * 12 + [7] * 8
    rng.shuffle(pids)
    t = make_trace([(i, p, 0, [i, 2 * i]) for i, p in enumerate(pids)])
    only4 = filter_by_pid(t, 4)
    assert len(only4) == 12
    assert all(s.pid == 4 for s in only4)
    assert [s.epoch_index for s in only4] == [i for i, p in enumerate(pids) if p == 4]
    assert only4.event_columns == t.event_columns
    assert only4.epoch_instructions == t.epoch_instructions
    assert len(filter_by_pid(t, 99)) == 0


@given(st.lists(st.integers(1, 4), min_size=0, max_size=30), st.integers(1, 4))
def test_filter_by_pid_idempotent(pids, pid):
    t = make_trace([(i, p, 0, [i, i]) for i, p in enumerate(pids)])
    once = filter_by_pid(t, pid)
    assert filter_by_pid(once, pid) == once


def test_concat_renumbers_epochs(small_trace):
    joined = concat_traces([small_trace, small_trace])
    assert len(joined) == 20
    assert validate_trace(joined).ok


@pytest.mark.parametrize("block", range(10))
def test_validate_accepts_synth_output(block):
    """1000 generator seeds in total, split over 10 cases."""
    profile = default_benign_profile()
    exploit = default_exploit_profile()
    for seed in range(block * 100, block * 100 + 100):
        t = gen_benign(profile, 25, seed=seed)
        if seed % 2:
            t = inject_exploit(t, exploit, seed % 5, seed=seed)
        assert validate_trace(t).ok, seed
