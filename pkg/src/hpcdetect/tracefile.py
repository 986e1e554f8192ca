"""CSV trace files.

Layout::

    #version=1
    #epoch_instructions=512000
    epoch,pid,stage,Store,Load
    0,4,clean,10,20

Output is canonical: for a given Trace the bytes are always the same, so
write/read/write round-trips byte for byte.
"""
from __future__ import annotations

import os
import re
from pathlib import Path
from typing import IO, Union

from .trace_model import EventKind, Sample, StageLabel, Trace

FORMAT_VERSION = 1
_FIXED = ("epoch", "pid", "stage")
_UINT = re.compile(r"[0-9]+\Z")
_INT = re.compile(r"-?[0-9]+\Z")

PathOrStream = Union[str, os.PathLike, IO[str]]


class TraceFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif path:
            where += " "
        super().__init__(where + message)


def header_lines(event_columns, epoch_instructions: int) -> list[str]:
    cols = ",".join(_FIXED + tuple(EventKind(e).value for e in event_columns))
    return [f"#version={FORMAT_VERSION}", f"#epoch_instructions={epoch_instructions}", cols]


def format_row(sample: Sample, event_columns) -> str:
    vals = [str(sample.epoch_index), str(sample.pid), sample.stage.token]
    vals.extend(str(int(sample.counts[e])) for e in event_columns)
    return ",".join(vals)


def dumps_trace(trace: Trace) -> str:
    lines = header_lines(trace.event_columns, trace.epoch_instructions)
    lines.extend(format_row(s, trace.event_columns) for s in trace.samples)
    return "\n".join(lines) + "\n"


def write_trace(trace: Trace, destination: PathOrStream) -> int:
    """Write ``trace`` and return the number of bytes emitted."""
    text = dumps_trace(trace)
    data = text.encode("utf-8")
    if hasattr(destination, "write"):
        destination.write(text)
        return len(data)
    path = Path(destination)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc.strerror or exc}") from exc
    return len(data)


def _meta(line: str, key: str, lineno: int, path) -> int:
    prefix = f"#{key}="
    if not line.startswith(prefix):
        raise TraceFormatError(f"expected '{prefix}<n>'", lineno, path)
    value = line[len(prefix):]
    if not _UINT.match(value):
        raise TraceFormatError(f"{key} must be a non-negative integer, got {value!r}", lineno, path)
    return int(value)


def parse_trace(lines, path: str | None = None) -> Trace:
    it = iter(enumerate(lines, start=1))

    def next_line():
        try:
            n, raw = next(it)
        except StopIteration:
            raise TraceFormatError("truncated header", None, path) from None
        return n, raw.rstrip("\r\n")

    n, line = next_line()
    version = _meta(line, "version", n, path)
    if version != FORMAT_VERSION:
        raise TraceFormatError(f"unsupported trace version {version}", n, path)
    n, line = next_line()
    epoch_instructions = _meta(line, "epoch_instructions", n, path)
    if epoch_instructions < 1:
        raise TraceFormatError("epoch_instructions must be positive", n, path)
    n, line = next_line()
    names = line.split(",")
    if tuple(names[:3]) != _FIXED:
        raise TraceFormatError("header must start with epoch,pid,stage", n, path)
    columns = []
    for name in names[3:]:
        try:
            kind = EventKind.parse(name)
        except ValueError as exc:
            raise TraceFormatError(str(exc), n, path) from None
        if kind.is_derived:
            raise TraceFormatError(f"derived event {name} cannot be a trace column", n, path)
        if kind in columns:
            raise TraceFormatError(f"duplicate column {name}", n, path)
        columns.append(kind)
    width = len(names)

    samples = []
    for n, raw in it:
        line = raw.rstrip("\r\n")
        if not line:
            continue
        fields = line.split(",")
        if len(fields) != width:
            raise TraceFormatError(f"expected {width} fields, got {len(fields)}", n, path)
        if not _UINT.match(fields[0]):
            raise TraceFormatError(f"bad epoch {fields[0]!r}", n, path)
        if not _INT.match(fields[1]):
            raise TraceFormatError(f"bad pid {fields[1]!r}", n, path)
        try:
            stage = StageLabel.parse(fields[2]) if fields[2].islower() else None
        except ValueError:
            stage = None
        if stage is None:
            raise TraceFormatError(f"bad stage token {fields[2]!r}", n, path)
        counts = {}
        for kind, value in zip(columns, fields[3:]):
            if not _UINT.match(value):
                raise TraceFormatError(f"bad count {value!r} for {kind.value}", n, path)
            counts[kind] = int(value)
        samples.append(Sample(int(fields[0]), int(fields[1]), stage, counts))
    return Trace(tuple(samples), tuple(columns), epoch_instructions)


def read_trace(source: PathOrStream) -> Trace:
    if hasattr(source, "read"):
        return parse_trace(source.read().splitlines())
    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read trace {path}: {exc.strerror or exc}") from exc
    return parse_trace(text.splitlines(), str(path))


def loads_trace(text: str) -> Trace:
    return parse_trace(text.splitlines())
