"""TCP recorder that persists streamed samples to a trace file.

Wire protocol, UTF-8 and newline terminated::

    C: HELLO v1
    S: OK v1
    C: RECORD <epoch> <pid> <stage> <Event>=<count>,<Event>=<count>,...
    S: OK                      (or ERR <reason>; the session stays open)
    C: BYE
    S: OK bye

A failed handshake gets ``ERR handshake`` and the connection is closed.
A record is appended to the in-memory log only after its ``OK`` has been
written, so nothing unacknowledged is ever persisted. On :meth:`Recorder.stop`
the log is written once, grouped by connection in accept order and by arrival
within a connection.
"""
from __future__ import annotations

import logging
import re
import socket
import socketserver
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .trace_model import DEFAULT_EPOCH_INSTRUCTIONS, EventKind, Sample, StageLabel, Trace
from .tracefile import write_trace

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "v1"
MAX_LINE = 64 * 1024
_UINT = re.compile(r"[0-9]+\Z")


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not _UINT.match(port):
        raise ValueError(f"listen address must be host:port, got {addr!r}")
    return host or "0.0.0.0", int(port)


@dataclass(frozen=True)
class RecorderConfig:
    listen_address: str
    output_path: str
    max_connections: int = 4
    epoch_instructions: int = DEFAULT_EPOCH_INSTRUCTIONS

    def __post_init__(self):
        if self.max_connections < 1:
            raise ValueError("max_connections must be >= 1")
        parse_address(self.listen_address)


class ProtocolError(ValueError):
    """A single bad line; the reply is ``ERR <reason>``."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def format_record(sample: Sample, columns: Iterable[EventKind] | None = None) -> str:
    keys = list(columns) if columns is not None else list(sample.counts)
    pairs = ",".join(f"{EventKind(k).value}={int(sample.counts[k])}" for k in keys)
    return f"RECORD {sample.epoch_index} {sample.pid} {sample.stage.token} {pairs}"


def parse_record(line: str) -> Sample:
    parts = line.split(" ")
    if len(parts) != 5 or parts[0] != "RECORD":
        raise ProtocolError("malformed")
    _, epoch, pid, stage, body = parts
    if not _UINT.match(epoch):
        raise ProtocolError("malformed epoch")
    try:
        pid_value = int(pid)
    except ValueError:
        raise ProtocolError("malformed pid") from None
    try:
        label = StageLabel.parse(stage) if stage.islower() else None
    except ValueError:
        label = None
    if label is None:
        raise ProtocolError(f"unknown stage {stage}")
    counts: dict[EventKind, int] = {}
    for pair in body.split(","):
        name, eq, value = pair.partition("=")
        if not eq:
            raise ProtocolError("malformed")
        try:
            kind = EventKind.parse(name)
        except ValueError:
            raise ProtocolError(f"unknown event {name}") from None
        if kind.is_derived:
            raise ProtocolError(f"derived event {name}")
        if kind in counts:
            raise ProtocolError(f"duplicate event {name}")
        if not _UINT.match(value):
            raise ProtocolError(f"bad count for {name}")
        counts[kind] = int(value)
    return Sample(int(epoch), pid_value, label, counts)


class _Handler(socketserver.StreamRequestHandler):
    server: "_Server"

    def reply(self, text: str) -> None:
        self.wfile.write((text + "\n").encode("utf-8"))

    def readline(self) -> str | None:
        raw = self.rfile.readline(MAX_LINE + 1)
        if not raw:
            return None
        if len(raw) > MAX_LINE and not raw.endswith(b"\n"):
            # drop the remainder so it is not taken for the next line
            while raw and not raw.endswith(b"\n"):
                raw = self.rfile.readline(MAX_LINE)
            raise ProtocolError("line too long")
        return raw.decode("utf-8", errors="replace").rstrip("\r\n")

    def handle(self) -> None:
        rec = self.server.recorder
        if not rec._slots.acquire(blocking=False):
            self.reply("ERR busy")
            return
        try:
            conn_id, buffer = rec._open_connection(self.request)
            try:
                self._session(rec, buffer)
            finally:
                rec._close_connection(conn_id, self.request)
        except (ConnectionError, OSError) as exc:
            log.debug("connection dropped: %s", exc)
        finally:
            rec._slots.release()

    def _session(self, rec: "Recorder", buffer: list[Sample]) -> None:
        try:
            hello = self.readline()
        except ProtocolError:
            hello = ""
        if hello != f"HELLO {PROTOCOL_VERSION}":
            if hello is not None:
                self.reply("ERR handshake")
            return
        self.reply(f"OK {PROTOCOL_VERSION}")
        last_epoch = -1
        while not rec._stopping.is_set():
            try:
                line = self.readline()
            except ProtocolError as exc:
                self.reply(f"ERR {exc.reason}")
                continue
            if line is None:
                return
            if line == "BYE":
                self.reply("OK bye")
                return
            try:
                sample = parse_record(line)
                if sample.epoch_index <= last_epoch:
                    raise ProtocolError("epoch out of order")
                rec._check_columns(sample)
            except ProtocolError as exc:
                self.reply(f"ERR {exc.reason}")
                continue
            self.reply("OK")
            last_epoch = sample.epoch_index
            buffer.append(sample)
            rec._count()


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(self, address, recorder: "Recorder"):
        self.recorder = recorder
        super().__init__(address, _Handler)


class Recorder:
    """Threaded recorder service. Use :func:`run_recorder` or as a context manager."""

    def __init__(self, config: RecorderConfig):
        self.config = config
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(config.max_connections)
        self._stopping = threading.Event()
        self._columns: tuple[EventKind, ...] | None = None
        self._logs: dict[int, list[Sample]] = {}
        self._sockets: dict[int, socket.socket] = {}
        self._next_id = 0
        self._received = 0
        self._server: _Server | None = None
        self._thread: threading.Thread | None = None
        self.persisted_path: Path | None = None

    @property
    def records_received(self) -> int:
        with self._lock:
            return self._received

    @property
    def address(self) -> tuple[str, int]:
        if self._server is None:
            raise RuntimeError("recorder not started")
        return self._server.server_address[:2]

    def start(self) -> "Recorder":
        with self._lock:
            if self._server is not None:
                return self
            self._server = _Server(parse_address(self.config.listen_address), self)
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
            name="recorder", daemon=True)
        self._thread.start()
        log.info("recorder listening on %s:%d", *self.address)
        return self

    def stop(self) -> Path:
        """Stop accepting, close live sessions and persist the log."""
        with self._lock:
            server = self._server
            if server is None or self._stopping.is_set():
                return self.persisted_path or Path(self.config.output_path)
            self._stopping.set()
            live = list(self._sockets.values())
        server.shutdown()
        for sock in live:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        server.server_close()  # joins handler threads
        if self._thread is not None:
            self._thread.join()
        return self._persist()

    def __enter__(self) -> "Recorder":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def trace(self) -> Trace:
        with self._lock:
            samples = [s for cid in sorted(self._logs) for s in self._logs[cid]]
            columns = self._columns or ()
        return Trace(tuple(samples), columns, self.config.epoch_instructions)

    def _persist(self) -> Path:
        path = Path(self.config.output_path)
        write_trace(self.trace(), path)
        self.persisted_path = path
        log.info("recorder wrote %d records to %s", self.records_received, path)
        return path

    def _open_connection(self, sock: socket.socket) -> tuple[int, list[Sample]]:
        with self._lock:
            cid = self._next_id
            self._next_id += 1
            buf: list[Sample] = []
            self._logs[cid] = buf
            self._sockets[cid] = sock
            return cid, buf

    def _close_connection(self, cid: int, sock: socket.socket) -> None:
        with self._lock:
            self._sockets.pop(cid, None)
            if not self._logs.get(cid):
                self._logs.pop(cid, None)

    def _check_columns(self, sample: Sample) -> None:
        keys = tuple(sample.counts)
        with self._lock:
            if self._columns is None:
                self._columns = keys
            elif set(keys) != set(self._columns):
                raise ProtocolError("column mismatch")

    def _count(self) -> None:
        with self._lock:
            self._received += 1


def run_recorder(config: RecorderConfig) -> Recorder:
    return Recorder(config).start()


class RecorderClient:
    """Blocking client used by tests and by :mod:`hpcdetect.cli` replay."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._r = self._sock.makefile("r", encoding="utf-8", newline="\n")
        self._w = self._sock.makefile("w", encoding="utf-8", newline="\n")

    def handshake(self, version: str = PROTOCOL_VERSION) -> str:
        return self.request(f"HELLO {version}")

    def request(self, line: str) -> str:
        self._w.write(line + "\n")
        self._w.flush()
        return self._read()

    def _read(self) -> str:
        reply = self._r.readline()
        if not reply:
            raise ConnectionError("recorder closed the connection")
        return reply.rstrip("\n")

    def send_lines(self, lines: Iterable[str], batch: int = 256) -> list[str]:
        """Pipeline lines in batches; returns one reply per line."""
        replies: list[str] = []
        pending: list[str] = []
        for line in lines:
            pending.append(line)
            if len(pending) >= batch:
                replies.extend(self._flush(pending))
                pending = []
        if pending:
            replies.extend(self._flush(pending))
        return replies

    def _flush(self, lines: list[str]) -> list[str]:
        self._w.write("".join(line + "\n" for line in lines))
        self._w.flush()
        return [self._read() for _ in lines]

    def send_samples(self, samples: Iterable[Sample], columns=None) -> list[str]:
        return self.send_lines(format_record(s, columns) for s in samples)

    def close(self, bye: bool = True) -> None:
        try:
            if bye:
                self.request("BYE")
        except (ConnectionError, OSError):
            pass
        finally:
            for f in (self._r, self._w):
                try:
                    f.close()
                except OSError:
                    pass
            self._sock.close()

    def __enter__(self) -> "RecorderClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
