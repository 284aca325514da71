"""Line-delimited JSON trace files: one file-open record per line."""
from __future__ import annotations

import json
import os
import time
import warnings
from typing import Iterable, Iterator

from ..errors import ClockSkewWarning, ParseError
from .model import FileOpenEvent, SourceKind

_FIELDS = ("ts_ns", "pid", "ppid", "comm", "path")


def dumps_event(ev: FileOpenEvent) -> str:
    return json.dumps(ev.to_record(), ensure_ascii=False, separators=(",", ":"))


def parse_event(line: str, lineno: int | None = None,
                source: SourceKind = SourceKind.TRACE_REPLAY) -> FileOpenEvent:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
    if not isinstance(rec, dict):
        raise ParseError("record is not an object", lineno)
    missing = [f for f in _FIELDS if f not in rec]
    if missing:
        raise ParseError(f"missing fields {missing}", lineno)
    try:
        return FileOpenEvent(pid=int(rec["pid"]), ppid=int(rec["ppid"]), comm=str(rec["comm"]),
                             timestamp=int(rec["ts_ns"]), path=rec["path"], source=source)
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), lineno) from None


def write_trace(events: Iterable[FileOpenEvent], path: str | os.PathLike) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(dumps_event(ev) + "\n")
            n += 1
    return n


def replay_trace(trace_file: str | os.PathLike, realtime: bool = False) -> Iterator[FileOpenEvent]:
    """Yield the events of a trace file in file order.

    With ``realtime`` the generator sleeps so that inter-event gaps match the
    recorded timestamps; otherwise events are yielded as fast as consumed.
    """
    last_ts = None
    warned = False
    t0_wall = t0_trace = None
    with open(trace_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            ev = parse_event(line, lineno)
            if last_ts is not None and ev.timestamp < last_ts and not warned:
                warnings.warn(f"{trace_file}:{lineno}: timestamp goes backwards "
                              f"({ev.timestamp} < {last_ts})", ClockSkewWarning, stacklevel=2)
                warned = True
            last_ts = ev.timestamp
            if realtime:
                if t0_wall is None:
                    t0_wall, t0_trace = time.monotonic_ns(), ev.timestamp
                delay = (ev.timestamp - t0_trace) - (time.monotonic_ns() - t0_wall)
                if delay > 0:
                    time.sleep(delay / 1e9)
            yield ev
