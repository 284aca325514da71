"""Helpers shared by the test modules."""
from __future__ import annotations

import os
import subprocess
import sys
import time

import pytest

from openguard.errors import SourceUnavailable
from openguard.events import FileOpenEvent, ProtectedScope


def _fanotify_works() -> bool:
    from openguard.events.fanotify import FanotifySource
    probe = os.path.join("/tmp", f"openguard-probe-{os.getpid()}")
    os.makedirs(probe, exist_ok=True)
    try:
        FanotifySource(ProtectedScope.of(probe)).close()
        return True
    except (SourceUnavailable, OSError):
        return False
    finally:
        os.rmdir(probe)


FANOTIFY = _fanotify_works()
needs_fanotify = pytest.mark.skipif(not FANOTIFY, reason="fanotify needs CAP_SYS_ADMIN")
needs_root = pytest.mark.skipif(os.geteuid() != 0, reason="needs root")


def ev(path: str, ts: int, pid: int = 100, comm: str = "proc") -> FileOpenEvent:
    return FileOpenEvent(pid=pid, ppid=1, comm=comm, timestamp=ts, path=str(path))


def spawn_python(code: str, **kw) -> subprocess.Popen:
    return subprocess.Popen([sys.executable, "-c", code], stdin=subprocess.PIPE,
                            stdout=subprocess.PIPE, **kw)


def wait_for(predicate, timeout: float = 5.0, interval: float = 0.01) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()
