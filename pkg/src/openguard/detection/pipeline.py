from __future__ import annotations

import enum
import json
import time
from collections import deque
from dataclasses import dataclass
from typing import Sequence

from ..errors import ClockInconsistency, LengthMismatch, NoEventsForPid
from ..events.model import FileOpenEvent
from ..proc import KillResult, ProcessControl
from .features import STRIDE_NS, WINDOW_NS, FeatureVector, collect_features
from .models import Classifier


class Label(str, enum.Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"


@dataclass(frozen=True)
class Verdict:
    pid: int
    label: Label
    score: float
    decided_at: int
    comm: str = ""
    model: str = ""

    @property
    def malicious(self) -> bool:
        return self.label is Label.MALICIOUS


def classify(fv: FeatureVector, model: Classifier, decided_at: int | None = None,
             comm: str = "") -> Verdict:
    s = model.score(fv)
    label = Label.MALICIOUS if s >= model.threshold else Label.BENIGN
    at = time.monotonic_ns() if decided_at is None else decided_at
    return Verdict(fv.pid, label, s, at, comm, model.name)


def kill_process(pid: int, control: ProcessControl | None = None) -> KillResult:
    """Terminate ``pid`` and its descendants (SIGTERM, SIGKILL after 100 ms)."""
    return (control or ProcessControl()).kill_tree(pid)


@dataclass(frozen=True)
class DetectionTimings:
    activity_start: int
    classified_at: int
    killed_at: int

    @property
    def response_time(self) -> int:
        return self.classified_at - self.activity_start

    @property
    def kill_time(self) -> int:
        return self.killed_at - self.classified_at

    @property
    def detection_time(self) -> int:
        return self.response_time + self.kill_time

    def to_dict(self) -> dict:
        return {"activity_start": self.activity_start, "classified_at": self.classified_at,
                "killed_at": self.killed_at, "response_time_ns": self.response_time,
                "kill_time_ns": self.kill_time, "detection_time_ns": self.detection_time}


def measure_detection(activity_start: int, classified_at: int, killed_at: int) -> DetectionTimings:
    if classified_at < activity_start:
        raise ClockInconsistency(f"classified_at {classified_at} precedes activity start "
                                 f"{activity_start}")
    if killed_at < classified_at:
        raise ClockInconsistency(f"killed_at {killed_at} precedes classified_at {classified_at}")
    return DetectionTimings(activity_start, classified_at, killed_at)


def accuracy_against_labels(predictions: Sequence, labels: Sequence) -> float:
    """Percentage of predictions that agree with the manual labels."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not labels:
        raise LengthMismatch("accuracy of an empty sequence is undefined")
    agree = sum(1 for p, t in zip(predictions, labels) if p == t)
    return agree * 100 / len(labels)


@dataclass
class Incident:
    verdict: Verdict
    activity_start: int
    kill: KillResult | None = None
    timings: DetectionTimings | None = None
    restore: object | None = None  # RestoreSummary
    critical: str | None = None
    truth: str | None = None  # filled in by the harness when it knows the process

    def log_record(self) -> dict:
        t = self.timings
        return {"pid": self.verdict.pid, "comm": self.verdict.comm, "score": self.verdict.score,
                "model": self.verdict.model,
                "response_time_ns": t.response_time if t else None,
                "kill_time_ns": t.kill_time if t else None,
                "detection_time_ns": t.detection_time if t else None,
                "critical": self.critical}


def write_incident_log(incidents: Sequence[Incident], path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for inc in incidents:
            fh.write(json.dumps(inc.log_record(), separators=(",", ":")) + "\n")


class Detector:
    """Per-pid sliding windows over the event stream.

    Events are evaluated as they arrive (the pid's window ending at the event
    timestamp); :meth:`tick` advances every window on the stride clock, evicts
    events older than the window behind the newest ingested timestamp and
    re-evaluates. Malicious verdicts latch per pid.
    """

    def __init__(self, model: Classifier, *, window_ns: int = WINDOW_NS,
                 stride_ns: int = STRIDE_NS, scope_file_count: int = 0, eager: bool = True):
        self.model = model
        self.window_ns = window_ns
        self.stride_ns = stride_ns
        self.scope_file_count = scope_file_count
        self.eager = eager
        self.windows: dict[int, deque[FileOpenEvent]] = {}
        self.first_seen: dict[int, int] = {}
        self.comm: dict[int, str] = {}
        self.latched: dict[int, Verdict] = {}
        self.update_times: list[int] = []
        self.events_seen = 0
        self.next_tick: int | None = None
        self.watermark = 0  # newest event timestamp ingested

    def _evaluate(self, pid: int, window_end: int, decided_at: int) -> Verdict | None:
        win = self.windows.get(pid)
        if not win:
            return None
        try:
            fv = collect_features(win, pid, window_end, self.window_ns, self.scope_file_count)
        except NoEventsForPid:
            return None
        v = classify(fv, self.model, decided_at, self.comm.get(pid, ""))
        if v.malicious:
            self.latched[pid] = v
            return v
        return None

    def ingest(self, ev: FileOpenEvent, now: int | None = None) -> Verdict | None:
        """Add one event; returns a new malicious verdict if this event tipped it."""
        self.events_seen += 1
        pid = ev.pid
        self.first_seen.setdefault(pid, ev.timestamp)
        self.comm[pid] = ev.comm
        self.watermark = max(self.watermark, ev.timestamp)
        if self.next_tick is None:
            self.next_tick = ev.timestamp + self.stride_ns
        win = self.windows.setdefault(pid, deque())
        win.append(ev)
        if pid in self.latched or not self.eager:
            return None
        return self._evaluate(pid, ev.timestamp, ev.timestamp if now is None else now)

    def due(self, now: int) -> bool:
        return self.next_tick is not None and now >= self.next_tick

    def tick(self, now: int) -> list[Verdict]:
        """Stride update: evict, re-evaluate every active pid, record the update time."""
        self.update_times.append(now)
        self.next_tick = now + self.stride_ns
        # evict on event time: a consumer running behind must not lose history
        # it has not evaluated yet
        horizon = min(now, self.watermark) - self.window_ns
        out = []
        for pid in list(self.windows):
            win = self.windows[pid]
            while win and win[0].timestamp <= horizon:
                win.popleft()
            if not win:
                del self.windows[pid]
                continue
            if pid not in self.latched:
                v = self._evaluate(pid, now, now)
                if v is not None:
                    out.append(v)
        return out

    def update_gaps(self) -> list[int]:
        t = self.update_times
        return [b - a for a, b in zip(t, t[1:])]
