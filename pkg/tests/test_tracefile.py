import io

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_trace
from hpcdetect.synth import default_bundle, gen_benign, inject_exploit, sub_seed
from hpcdetect.trace_model import EventKind, Trace
from hpcdetect.tracefile import TraceFormatError, dumps_trace, loads_trace, read_trace, write_trace

HEADER = "#version=1\n#epoch_instructions=512000\nepoch,pid,stage,Store,Load\n"


def test_empty_trace_is_header_only():
    t = Trace((), (EventKind.Store, EventKind.Load))
    assert dumps_trace(t) == HEADER


def test_single_row_format():
    t = make_trace([(0, 4, 0, [10, 20])])
    assert dumps_trace(t) == HEADER + "0,4,clean,10,20\n"


def test_write_returns_byte_count_and_round_trips(tmp_path, small_trace):
    path = tmp_path / "t.csv"
    n = write_trace(small_trace, path)
    assert n == path.stat().st_size
    assert read_trace(path) == small_trace
    buf = io.StringIO()
    write_trace(small_trace, buf)
    assert loads_trace(buf.getvalue()) == small_trace


def _generated(seed: int) -> Trace:
    b = default_bundle()
    t = gen_benign(b.benign, 40, seed=sub_seed(seed, "t"), pid=seed % 5)
    return inject_exploit(t, b.exploit, seed % 15, seed=seed)


@pytest.mark.parametrize("seed", range(100))
def test_round_trip_generated(seed):
    t = _generated(seed)
    text = dumps_trace(t)
    back = loads_trace(text)
    assert back == t
    # write . read . write is byte-identical
    assert dumps_trace(back) == text


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(-5, 5), st.sampled_from(range(4)),
                          st.lists(st.integers(0, 2**62), min_size=2, max_size=2)), max_size=20),
       st.integers(1, 10**9))
def test_round_trip_arbitrary(rows, ei):
    t = make_trace([(i, p, s, c) for i, (p, s, c) in enumerate(rows)], epoch_instructions=ei)
    assert loads_trace(dumps_trace(t)) == t


@pytest.mark.parametrize("row, needle", [
    ("0,4,clean,-3,20", "bad count '-3'"),
    ("0,4,clean,1.5,20", "bad count"),
    ("0,4,Clean,1,2", "bad stage"),
    ("0,4,stage3,1,2", "bad stage"),
    ("x,4,clean,1,2", "bad epoch"),
    ("0,4,clean,1", "expected 5 fields"),
    ("0,4,clean,٣,2", "bad count"),
])
def test_malformed_rows_name_line(row, needle):
    with pytest.raises(TraceFormatError) as info:
        loads_trace(HEADER + "0,4,clean,1,1\n" + row + "\n")
    assert info.value.line == 5
    assert needle in str(info.value)
    assert "line 5" in str(info.value)


@pytest.mark.parametrize("text, needle", [
    ("#version=2\n#epoch_instructions=1\nepoch,pid,stage\n", "unsupported trace version 2"),
    ("#epoch_instructions=1\n", "#version="),
    ("#version=1\n#epoch_instructions=0\nepoch,pid,stage\n", "positive"),
    ("#version=1\n#epoch_instructions=5\nepoch,pid,stage,Bogus\n", "unknown event kind"),
    ("#version=1\n#epoch_instructions=5\nepoch,pid,stage,PctMisp_Br\n", "derived"),
    ("#version=1\n#epoch_instructions=5\nepoch,pid,stage,Store,Store\n", "duplicate"),
    ("#version=1\n#epoch_instructions=5\npid,epoch,stage\n", "epoch,pid,stage"),
    ("#version=1\n", "truncated"),
])
def test_malformed_headers(text, needle):
    with pytest.raises(TraceFormatError, match=needle):
        loads_trace(text)


def test_read_errors_carry_path(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text(HEADER + "0,4,clean,1,-1\n")
    with pytest.raises(TraceFormatError) as info:
        read_trace(p)
    assert info.value.path == str(p)
    assert str(p) in str(info.value)
    with pytest.raises(OSError, match="missing.csv"):
        read_trace(tmp_path / "missing.csv")
    with pytest.raises(OSError, match="cannot write"):
        write_trace(make_trace([]), tmp_path / "no" / "dir" / "x.csv")
