"""Wire an event source to the backup engine and the detection pipeline.

Two architectures are supported:

``rofbs_sync``
    One loop handles every event completely (guard the open, then update the
    features) before taking the next one, so detection waits behind backups.

``rofbs_alpha_async``
    A fan-out thread copies each event into two bounded queues. Backup
    workers and the detection consumer drain them independently and share no
    lock on the event path. Kills run on a responder thread, and the verdict
    reaches the backup side over a one-way channel that triggers the restore.
"""
from __future__ import annotations

import contextlib
import enum
import json
import logging
import os
import queue
import socket
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field

from .backup import BackupEngine, FinalizeSummary, GuardAction, RestoreSummary, ShutdownPolicy
from .detection import (Classifier, Detector, Incident, Verdict, load_model,
                        measure_detection, model_from_dict, write_incident_log)
from .detection.features import STRIDE_NS, WINDOW_NS
from .errors import ClockInconsistency, ConfigError
from .events import BACKUP_SUFFIX, EventStream, FileOpenEvent, ProtectedScope, dumps_event, subscribe
from .proc import DryRunControl, ProcessControl

log = logging.getLogger(__name__)

_STOP = object()


class Mode(str, enum.Enum):
    SYNC = "rofbs_sync"
    ASYNC = "rofbs_alpha_async"


@dataclass
class RunConfig:
    mode: Mode = Mode.ASYNC
    scope: ProtectedScope = field(default_factory=ProtectedScope)
    source_kind: str = "fs_notify"
    trace_file: str | None = None
    realtime_replay: bool = False
    classifier: dict | str = field(default_factory=lambda: {"type": "heuristic", "R": 20, "K": 5})
    shutdown_policy: ShutdownPolicy = ShutdownPolicy.REMOVE_BACKUPS
    backup_queue_capacity: int = 65536
    detect_queue_capacity: int = 65536
    suspend_timeout_s: float = 0.5
    copy_delay_s: float = 0.0
    backup_workers: int = 4
    window_ns: int = WINDOW_NS
    stride_ns: int = STRIDE_NS
    suffix: str = BACKUP_SUFFIX
    journal_path: str | None = None
    incident_log: str | None = None
    fanout_socket: str | None = None
    probe_symbol: str | None = None
    stop_after_incident: bool = False
    quiescence_s: float = 5.0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.shutdown_policy = ShutdownPolicy(self.shutdown_policy)
        if not isinstance(self.scope, ProtectedScope):
            self.scope = ProtectedScope.of(self.scope)
        for name in ("trace_file", "journal_path", "incident_log", "fanout_socket"):
            val = getattr(self, name)
            if val is not None and not os.path.isabs(val):
                setattr(self, name, os.path.abspath(val))

    def build_classifier(self) -> Classifier:
        if isinstance(self.classifier, Classifier):
            return self.classifier
        if isinstance(self.classifier, dict):
            return model_from_dict(self.classifier)
        return load_model(self.classifier)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["shutdown_policy"] = self.shutdown_policy.value
        d["scope"] = list(self.scope.directories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | None = None, env: dict | None = None, **overrides) -> "RunConfig":
        """Config file, then OPENGUARD_SCOPE / OPENGUARD_MODE, then explicit overrides."""
        d: dict = {}
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    d = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{path}: {exc}") from None
        env = os.environ if env is None else env
        if env.get("OPENGUARD_SCOPE"):
            d["scope"] = env["OPENGUARD_SCOPE"].split(os.pathsep)
        if env.get("OPENGUARD_MODE"):
            d["mode"] = env["OPENGUARD_MODE"]
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)


@dataclass
class RunReport:
    mode: str
    events_seen: int = 0
    backups_made: int = 0
    drops: int = 0
    incidents: list[Incident] = field(default_factory=list)
    restore_summary: RestoreSummary = field(default_factory=RestoreSummary)
    finalize_summary: FinalizeSummary | None = None
    duration: int = 0
    outcomes: Counter = field(default_factory=Counter)
    errors: list[str] = field(default_factory=list)
    update_gaps: list[int] = field(default_factory=list)
    delivered: dict[str, int] = field(default_factory=dict)
    crashes: list[str] = field(default_factory=list)

    @property
    def critical(self) -> list[str]:
        return [i.critical for i in self.incidents if i.critical] + self.crashes

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "events_seen": self.events_seen, "backups_made": self.backups_made,
            "drops": self.drops, "duration_ns": self.duration,
            "incidents": [i.log_record() for i in self.incidents],
            "restore": self.restore_summary.to_dict(),
            "outcomes": dict(sorted(self.outcomes.items())), "errors": list(self.errors),
            "crashes": list(self.crashes),
        }


class VirtualClock:
    """Trace time for replayed runs: never goes backwards, strictly increases per read."""

    def __init__(self):
        self._now = 0
        self._lock = threading.Lock()

    def advance_to(self, ts: int) -> None:
        with self._lock:
            self._now = max(self._now, ts)

    def __call__(self) -> int:
        with self._lock:
            self._now += 1
            return self._now


class FanoutSocket:
    """Local stream socket re-emitting every event as a trace-format JSON line."""

    def __init__(self, path: str):
        self.path = path
        if os.path.exists(path):
            os.unlink(path)
        self.server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.server.bind(path)
        self.server.listen(8)
        self.server.settimeout(0.2)
        self.clients: list[socket.socket] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._accept, daemon=True, name="fanout-accept")
        self._thread.start()

    def _accept(self):
        while not self._stop.is_set():
            try:
                conn, _ = self.server.accept()
            except (socket.timeout, OSError):
                continue
            with self._lock:
                self.clients.append(conn)

    def publish(self, ev: FileOpenEvent) -> None:
        data = (dumps_event(ev) + "\n").encode("utf-8")
        with self._lock:
            for c in list(self.clients):
                try:
                    c.sendall(data)
                except OSError:
                    self.clients.remove(c)

    def close(self):
        self._stop.set()
        self._thread.join(timeout=1)
        with self._lock:
            for c in self.clients:
                c.close()
            self.clients.clear()
        self.server.close()
        try:
            os.unlink(self.path)
        except OSError:
            pass


def read_fanout_socket(path: str, timeout: float | None = None):
    """Yield events from a :class:`FanoutSocket` until it closes."""
    from .events import parse_event
    from .events.model import SourceKind
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
        s.settimeout(timeout)
        s.connect(path)
        buf = b""
        while True:
            try:
                chunk = s.recv(65536)
            except socket.timeout:
                return
            if not chunk:
                return
            buf += chunk
            *lines, buf = buf.split(b"\n")
            for line in lines:
                if line:
                    yield parse_event(line.decode("utf-8"), source=SourceKind.FS_NOTIFY)


class Daemon:
    def __init__(self, config: RunConfig, control: ProcessControl | None = None,
                 source: EventStream | None = None, before_restore=None):
        self.config = config
        self.before_restore = before_restore
        self._source = source
        self._control = control
        self.report = RunReport(config.mode.value)
        self.incident_event = threading.Event()
        self.done = threading.Event()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._report_lock = threading.Lock()
        self._stopped = False
        self._killed: set[int] = set()
        self._last_event = time.monotonic()
        self._last_activity = time.monotonic()
        self._inflight = 0
        self._inflight_lock = threading.Lock()
        self._t_start = 0
        self._first_ts: int | None = None
        self._last_ts: int | None = None

    # -- setup --------------------------------------------------------------

    def start(self) -> "Daemon":
        cfg = self.config
        if self._source is None:
            self._source = subscribe(cfg.scope, cfg.source_kind, trace_file=cfg.trace_file,
                                     realtime=cfg.realtime_replay, suffix=cfg.suffix,
                                     capacity=cfg.backup_queue_capacity,
                                     probe_symbol=cfg.probe_symbol)
        self.source = self._source
        self.live = self.source.live
        if self._control is None:
            self._control = ProcessControl() if self.live else DryRunControl()
        self.control = self._control
        self.clock = time.monotonic_ns if self.live else VirtualClock()
        self.engine = BackupEngine(cfg.scope, suffix=cfg.suffix, control=self.control,
                                   journal_path=cfg.journal_path,
                                   suspend_timeout_s=cfg.suspend_timeout_s,
                                   copy_delay_s=cfg.copy_delay_s, clock=self.clock)
        self.detector = Detector(cfg.build_classifier(), window_ns=cfg.window_ns,
                                 stride_ns=cfg.stride_ns,
                                 scope_file_count=cfg.scope.count_files())
        self.fanout = FanoutSocket(cfg.fanout_socket) if cfg.fanout_socket else None
        self._t_start = time.monotonic_ns()
        if cfg.mode is Mode.SYNC:
            self._spawn(self._sync_loop, "sync-loop")
        else:
            self._start_async()
        return self

    def _spawn(self, target, name):
        t = threading.Thread(target=self._guarded(target), name=name, daemon=True)
        self._threads.append(t)
        t.start()
        return t

    def _guarded(self, fn):
        def run(*a):
            try:
                fn(*a)
            except Exception as exc:
                log.exception("%s crashed", threading.current_thread().name)
                with self._report_lock:
                    self.report.crashes.append(f"{threading.current_thread().name}: {exc!r}")
        return run

    def _now(self) -> int:
        return time.monotonic_ns() if self.live else self.clock()

    def _note_event(self, ev: FileOpenEvent):
        self._last_event = time.monotonic()
        if self._first_ts is None:
            self._first_ts = ev.timestamp
        self._last_ts = ev.timestamp
        if not self.live:
            self.clock.advance_to(ev.timestamp)
        if self.fanout is not None:
            self.fanout.publish(ev)

    def _events(self):
        """Iterate the source, waking at least every 50 ms so ticks and stops are honoured."""
        src = self.source
        if hasattr(src, "get"):
            while not self._stop.is_set():
                try:
                    ev = src.get(timeout=0.05)
                except StopIteration:
                    return
                yield ev
        else:
            for ev in src:
                if self._stop.is_set():
                    return
                yield ev

    @contextlib.contextmanager
    def _busy(self):
        with self._inflight_lock:
            self._inflight += 1
        try:
            yield
        finally:
            self._last_activity = time.monotonic()
            with self._inflight_lock:
                self._inflight -= 1

    def _record_guard(self, out):
        self._last_activity = time.monotonic()
        with self._report_lock:
            self.report.outcomes[out.action.value] += 1
            if out.action is GuardAction.BACKED_UP:
                self.report.backups_made += 1
            if out.error:
                self.report.errors.append(out.error)

    # -- synchronous architecture -------------------------------------------

    def _sync_loop(self):
        det = self.detector
        try:
            for ev in self._events():
                if ev is not None:
                    with self._busy():
                        self._note_event(ev)
                        self.report.events_seen += 1
                        self._record_guard(self.engine.guard_open(ev))
                        v = det.ingest(ev, time.monotonic_ns() if self.live else None)
                        if v is not None:
                            self.on_verdict(v)
                self._maybe_tick(ev)
        finally:
            self.done.set()

    def _maybe_tick(self, ev):
        det = self.detector
        if self.live:
            now = time.monotonic_ns()
            if det.due(now):
                for v in det.tick(now):
                    self._dispatch_verdict(v)
        elif ev is not None:
            while det.due(ev.timestamp):
                for v in det.tick(det.next_tick):
                    self._dispatch_verdict(v)

    def _dispatch_verdict(self, v: Verdict):
        if self.config.mode is Mode.SYNC:
            self.on_verdict(v)
        else:
            self._responder_q.put(v)

    # -- asynchronous architecture ------------------------------------------

    def _start_async(self):
        cfg = self.config
        self._backup_q: queue.Queue = queue.Queue(cfg.backup_queue_capacity)
        self._detect_q: queue.Queue = queue.Queue(cfg.detect_queue_capacity)
        self._responder_q: queue.Queue = queue.Queue()
        self._restore_q: queue.Queue = queue.Queue()
        self.report.delivered = {"backup": 0, "detect": 0}
        self._dropped = {"backup": 0, "detect": 0}
        self._backup_lock = threading.Lock()
        self._detect_done = threading.Event()
        self._backup_done = threading.Event()
        self._backup_alive = cfg.backup_workers
        self._spawn(self._fanout_loop, "fanout")
        for i in range(cfg.backup_workers):
            self._spawn(self._backup_worker, f"backup-{i}")
        self._spawn(self._detect_loop, "detect")
        self._spawn(self._responder_loop, "responder")
        self._spawn(self._restore_loop, "restore")

    def _offer(self, q: queue.Queue, name: str, item) -> None:
        if self.live:
            try:
                q.put_nowait(item)
            except queue.Full:
                self._dropped[name] += 1
                return
        else:
            q.put(item)
        self.report.delivered[name] += 1

    def _fanout_loop(self):
        try:
            for ev in self._events():
                if ev is None:
                    continue
                self._note_event(ev)
                self.report.events_seen += 1
                self._offer(self._backup_q, "backup", ev)
                self._offer(self._detect_q, "detect", ev)
        finally:
            for _ in range(self.config.backup_workers):
                self._backup_q.put(_STOP)
            self._detect_q.put(_STOP)

    def _backup_worker(self):
        try:
            while True:
                ev = self._backup_q.get()
                if ev is _STOP:
                    return
                with self._busy():
                    self._record_guard(self.engine.guard_open(ev))
        finally:
            with self._backup_lock:
                self._backup_alive -= 1
                if self._backup_alive == 0:
                    self._backup_done.set()
                    self._maybe_done()

    def _detect_loop(self):
        det = self.detector
        try:
            while True:
                timeout = 0.05
                if self.live and det.next_tick is not None:
                    timeout = max(0.0, min(0.05, (det.next_tick - time.monotonic_ns()) / 1e9))
                try:
                    ev = self._detect_q.get(timeout=timeout)
                except queue.Empty:
                    ev = None
                if ev is _STOP:
                    return
                if ev is not None:
                    with self._busy():
                        v = det.ingest(ev, time.monotonic_ns() if self.live else None)
                        if v is not None:
                            self._responder_q.put(v)
                self._maybe_tick(ev)
        finally:
            self._responder_q.put(_STOP)

    def _responder_loop(self):
        try:
            while True:
                v = self._responder_q.get()
                if v is _STOP:
                    return
                self.on_verdict(v)
        finally:
            self._restore_q.put(_STOP)
            self._detect_done.set()
            self._maybe_done()

    def _restore_loop(self):
        while True:
            item = self._restore_q.get()
            if item is _STOP:
                return
            incident, done = item
            try:
                self._restore(incident)
            except Exception as exc:
                log.exception("restore failed")
                incident.critical = f"restore failed: {exc!r}"
                with self._report_lock:
                    self.report.errors.append(incident.critical)
            finally:
                # the responder is blocked on this; never leave it hanging
                done.set()

    def _maybe_done(self):
        if self.config.mode is Mode.ASYNC and self._backup_done.is_set() and self._detect_done.is_set():
            self.done.set()

    # -- verdict handling ----------------------------------------------------

    def on_verdict(self, verdict: Verdict) -> Incident | None:
        """Kill, confirm termination, then restore. Benign verdicts do nothing."""
        if not verdict.malicious or verdict.pid in self._killed:
            return None
        with self._busy():
            return self._respond(verdict)

    def _respond(self, verdict: Verdict) -> Incident:
        inc = Incident(verdict, activity_start=self.detector.first_seen.get(verdict.pid,
                                                                            verdict.decided_at))
        ctl = self.control
        target = ctl.kill_target(verdict.pid)
        if isinstance(ctl, DryRunControl):
            kill = ctl.kill_tree(target, now_ns=verdict.decided_at + 1)
        else:
            kill = ctl.kill_tree(target)
        inc.kill = kill
        self._killed.update(kill.outcomes)
        self._killed.add(verdict.pid)
        with self._report_lock:
            self.report.incidents.append(inc)
        if kill.denied:
            inc.critical = f"kill of pid {verdict.pid} denied; restore not attempted"
        elif not all(ctl.wait_terminated(p) for p in {target, verdict.pid}):
            inc.critical = f"pid {verdict.pid} still alive after kill; restore not attempted"
        else:
            try:
                inc.timings = measure_detection(inc.activity_start, verdict.decided_at,
                                                kill.killed_at)
            except ClockInconsistency as exc:
                inc.critical = str(exc)
        if inc.critical:
            log.error("CRITICAL: %s", inc.critical)
            with self._report_lock:
                self.report.errors.append(inc.critical)
        else:
            if not self.live:
                self.clock.advance_to(kill.killed_at)
            if self.config.mode is Mode.SYNC:
                self._restore(inc)
            else:
                done = threading.Event()
                self._restore_q.put((inc, done))
                done.wait()
        if self.config.incident_log:
            write_incident_log([inc], self.config.incident_log)
        self.incident_event.set()
        if self.config.stop_after_incident:
            self._stop.set()
        return inc

    def _restore(self, inc: Incident):
        if self.before_restore is not None:
            self.before_restore(inc)
        summary = self.engine.restore_all(inc.verdict)
        inc.restore = summary
        with self._report_lock:
            self.report.restore_summary.merge(summary)
            self.report.errors.extend(summary.errors)

    # -- lifecycle -----------------------------------------------------------

    def wait(self, timeout: float | None = None) -> bool:
        """Block until the source is exhausted, a stop is requested, or the run
        has been quiet for ``quiescence_s`` after an incident."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self.done.is_set() and not self._stop.is_set():
            if self.incident_event.is_set() and \
                    time.monotonic() - self._last_event > self.config.quiescence_s:
                break
            if deadline is not None and time.monotonic() >= deadline:
                return False
            self.done.wait(0.05)
        return True

    def _backlog(self) -> int:
        n = getattr(self.source, "pending", lambda: 0)()
        for name in ("_backup_q", "_detect_q", "_responder_q"):
            q = getattr(self, name, None)
            if q is not None:
                n += q.qsize()
        return n + self._inflight

    def wait_idle(self, quiet_s: float = 0.3, timeout: float | None = None) -> bool:
        """Block until every queued event has been handled and nothing ran for ``quiet_s``."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self.done.is_set():
            if self._backlog() == 0 and time.monotonic() - self._last_activity >= quiet_s:
                return True
            if deadline is not None and time.monotonic() >= deadline:
                return False
            time.sleep(0.02)
        return True

    def stop(self) -> RunReport:
        """Stop sources and consumers, finalize backups exactly once, return the report."""
        if self._stopped:
            return self.report
        self._stopped = True
        self._stop.set()
        self.source.close()
        for t in self._threads:
            t.join(timeout=30)
        if self.fanout is not None:
            self.fanout.close()
        r = self.report
        r.drops = self.source.dropped + sum(getattr(self, "_dropped", {}).values())
        r.update_gaps = self.detector.update_gaps()
        if self.live:
            r.duration = time.monotonic_ns() - self._t_start
        elif self._first_ts is not None:
            r.duration = self._last_ts - self._first_ts
        r.finalize_summary = self.engine.finalize_shutdown(self.config.shutdown_policy)
        r.errors.extend(r.finalize_summary.errors)
        return r

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def run(config: RunConfig, timeout: float | None = None, **kw) -> RunReport:
    d = Daemon(config, **kw).start()
    try:
        d.wait(timeout)
    finally:
        report = d.stop()
    return report
