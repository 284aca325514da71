"""Process signalling: suspend/resume around a snapshot, tree termination.

:class:`ProcessControl` acts on real processes. :class:`DryRunControl` is used
for replayed traces, whose pids do not belong to this host; it never sends a
signal.
"""
from __future__ import annotations

import logging
import os
import signal
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field

import psutil

from .errors import SignalDenied

log = logging.getLogger(__name__)

KILL_GRACE_S = 0.100
POLL_S = 0.001


@dataclass
class KillResult:
    pid: int
    outcomes: dict[int, str] = field(default_factory=dict)
    killed_at: int = 0
    already_exited: bool = False
    denied: bool = False

    @property
    def ok(self) -> bool:
        return not self.denied

    @property
    def tree_size(self) -> int:
        return len(self.outcomes)


def pid_alive(pid: int) -> bool:
    """True unless the pid is gone or a zombie."""
    try:
        with open(f"/proc/{pid}/stat", "rb") as fh:
            stat = fh.read()
    except (FileNotFoundError, ProcessLookupError):
        return False
    except OSError:
        return True
    state = stat[stat.rfind(b")") + 2:stat.rfind(b")") + 3]
    return state not in (b"Z", b"X", b"x")


class ProcessControl:
    live = True

    def __init__(self):
        self._locks: dict[int, threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()

    def pid_lock(self, pid: int) -> threading.Lock:
        """Per-pid lock serializing suspend/resume pairs."""
        with self._guard:
            return self._locks[pid]

    def _send(self, pid: int, sig: int) -> bool:
        try:
            os.kill(pid, sig)
            return True
        except ProcessLookupError:
            return False
        except PermissionError as exc:
            raise SignalDenied(f"cannot signal pid {pid}: {exc}") from None

    def suspend(self, pid: int) -> bool:
        """SIGSTOP; False if the process no longer exists."""
        return self._send(pid, signal.SIGSTOP)

    def resume(self, pid: int) -> bool:
        return self._send(pid, signal.SIGCONT)

    def alive(self, pid: int) -> bool:
        return pid_alive(pid)

    def descendants(self, pid: int) -> list[int]:
        try:
            return [c.pid for c in psutil.Process(pid).children(recursive=True)]
        except (psutil.NoSuchProcess, psutil.ZombieProcess):
            return []

    def kill_target(self, pid: int) -> int:
        """Outermost ancestor that is a fork clone of ``pid`` (same exe and argv).

        Killing there takes down sibling workers that have not been classified
        yet; an unrelated parent such as the shell that launched the process is
        never selected because its command line differs.
        """
        target = pid
        try:
            proc = psutil.Process(pid)
            ident = (proc.exe(), proc.cmdline())
            while True:
                parent = proc.parent()
                if parent is None or parent.pid <= 1 or parent.pid == os.getpid():
                    break
                if (parent.exe(), parent.cmdline()) != ident:
                    break
                proc = parent
                target = proc.pid
        except (psutil.Error, OSError):
            pass
        return target

    def kill_tree(self, pid: int, grace_s: float = KILL_GRACE_S) -> KillResult:
        """Terminate ``pid`` and all descendants; SIGKILL survivors after the grace period."""
        res = KillResult(pid)
        if not self.alive(pid):
            res.already_exited = True
            res.outcomes[pid] = "already_exited"
            res.killed_at = time.monotonic_ns()
            return res
        # freeze first so the tree cannot fork while it is being enumerated
        try:
            self._send(pid, signal.SIGSTOP)
        except SignalDenied:
            res.denied = True
            res.outcomes[pid] = "denied"
            res.killed_at = time.monotonic_ns()
            return res
        tree = [pid]
        for child in self.descendants(pid):
            try:
                self._send(child, signal.SIGSTOP)
            except SignalDenied:
                res.denied = True
                res.outcomes[child] = "denied"
            tree.append(child)
        for p in tree:
            if res.outcomes.get(p) == "denied":
                continue
            try:
                if self._send(p, signal.SIGTERM):
                    # a stopped process only acts on SIGTERM once continued
                    self._send(p, signal.SIGCONT)
                    res.outcomes[p] = "terminated"
                else:
                    res.outcomes[p] = "already_exited"
            except SignalDenied:
                res.denied = True
                res.outcomes[p] = "denied"
        deadline = time.monotonic() + grace_s
        pending = [p for p in tree if res.outcomes[p] == "terminated"]
        while pending and time.monotonic() < deadline:
            pending = [p for p in pending if self.alive(p)]
            if pending:
                time.sleep(POLL_S)
        for p in pending:
            try:
                self._send(p, signal.SIGKILL)
                res.outcomes[p] = "killed"
            except SignalDenied:
                res.denied = True
                res.outcomes[p] = "denied"
        while any(self.alive(p) for p in tree if res.outcomes[p] != "denied"):
            time.sleep(POLL_S)
        res.killed_at = time.monotonic_ns()
        return res

    def wait_terminated(self, pid: int, checks: int = 3, interval_s: float = 0.010,
                        timeout_s: float = 5.0) -> bool:
        """True once the pid has been absent for ``checks`` consecutive polls."""
        streak = 0
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            streak = 0 if self.alive(pid) else streak + 1
            if streak >= checks:
                return True
            time.sleep(interval_s)
        return False


class DryRunControl(ProcessControl):
    """Records the signals it would send; every pid counts as terminated."""

    live = False

    def __init__(self):
        super().__init__()
        self.calls: list[tuple[str, int]] = []

    def suspend(self, pid):
        self.calls.append(("suspend", pid))
        return True

    def resume(self, pid):
        self.calls.append(("resume", pid))
        return True

    def alive(self, pid):
        return False

    def kill_target(self, pid):
        return pid

    def kill_tree(self, pid, grace_s=KILL_GRACE_S, now_ns: int | None = None):
        self.calls.append(("kill", pid))
        res = KillResult(pid, outcomes={pid: "terminated"})
        res.killed_at = time.monotonic_ns() if now_ns is None else now_ns
        return res

    def wait_terminated(self, pid, checks=3, interval_s=0.010, timeout_s=5.0):
        return True
