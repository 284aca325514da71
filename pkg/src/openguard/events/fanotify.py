"""fanotify(7) open-notification source (ctypes, no extra dependency).

Notification-class events are used: the kernel does not hold the opener, so
the suspend that follows is a race against the opener, as with a probe that
reports to user space asynchronously.
"""
from __future__ import annotations

import ctypes
import errno
import logging
import os
import select
import struct
import time

from ..errors import SourceUnavailable
from .model import BACKUP_SUFFIX, FileOpenEvent, ProtectedScope, SourceKind, is_backup_artifact
from .stream import QueuedStream

log = logging.getLogger(__name__)

FAN_CLASS_NOTIF = 0x00
FAN_CLOEXEC = 0x01
FAN_NONBLOCK = 0x02
FAN_MARK_ADD = 0x01
FAN_OPEN = 0x20
FAN_Q_OVERFLOW = 0x4000
FAN_EVENT_ON_CHILD = 0x08000000
FAN_NOFD = -1
AT_FDCWD = -100

_META = struct.Struct("=IBBHQii")

_libc = ctypes.CDLL(None, use_errno=True)
_libc.fanotify_init.argtypes = [ctypes.c_uint, ctypes.c_uint]
_libc.fanotify_mark.argtypes = [ctypes.c_int, ctypes.c_uint, ctypes.c_uint64, ctypes.c_int,
                                ctypes.c_char_p]


def proc_identity(pid: int) -> tuple[int, str]:
    """(ppid, comm) from /proc, or (0, "?") if the process is gone."""
    try:
        with open(f"/proc/{pid}/stat", "rb") as fh:
            stat = fh.read()
    except OSError:
        return 0, "?"
    lpar, rpar = stat.find(b"("), stat.rfind(b")")
    comm = stat[lpar + 1:rpar].decode("utf-8", "replace")
    fields = stat[rpar + 2:].split()
    return int(fields[1]), comm


class FanotifySource(QueuedStream):
    def __init__(self, scope: ProtectedScope, suffix: str = BACKUP_SUFFIX, capacity: int = 65536):
        super().__init__(capacity)
        self.scope = scope
        self.suffix = suffix
        self.self_pid = os.getpid()
        self.overflows = 0
        fd = _libc.fanotify_init(FAN_CLASS_NOTIF | FAN_CLOEXEC | FAN_NONBLOCK,
                                 os.O_RDONLY | os.O_LARGEFILE | os.O_CLOEXEC)
        if fd < 0:
            err = ctypes.get_errno()
            raise SourceUnavailable(f"fanotify_init: {os.strerror(err)}")
        self.fd = fd
        try:
            self._mark_tree()
        except Exception:
            os.close(fd)
            raise
        self._wake_r, self._wake_w = os.pipe()

    def _mark_tree(self):
        # fanotify directory marks are not recursive: mark every directory
        for root in self.scope.directories:
            if not os.path.isdir(root):
                raise SourceUnavailable(f"scope directory missing: {root}")
            for dirpath, _, _ in os.walk(root):
                r = _libc.fanotify_mark(self.fd, FAN_MARK_ADD, FAN_OPEN | FAN_EVENT_ON_CHILD,
                                        AT_FDCWD, os.fsencode(dirpath))
                if r < 0:
                    err = ctypes.get_errno()
                    raise SourceUnavailable(f"fanotify_mark {dirpath}: {os.strerror(err)}")

    def _produce(self):
        poller = select.poll()
        poller.register(self.fd, select.POLLIN)
        poller.register(self._wake_r, select.POLLIN)
        while not self._stop.is_set():
            ready = poller.poll(200)
            if not ready:
                continue
            try:
                buf = os.read(self.fd, 64 * 1024)
            except BlockingIOError:
                continue
            except OSError as exc:
                if exc.errno == errno.EINTR:
                    continue
                raise
            self._dispatch(buf)

    def _dispatch(self, buf: bytes):
        off = 0
        while off + _META.size <= len(buf):
            event_len, _ver, _res, _mlen, mask, fd, pid = _META.unpack_from(buf, off)
            off += event_len
            ts = time.monotonic_ns()
            if mask & FAN_Q_OVERFLOW:
                self.overflows += 1
                self.dropped += 1
                log.warning("fanotify queue overflow")
                continue
            if fd == FAN_NOFD:
                continue
            try:
                path = os.readlink(f"/proc/self/fd/{fd}")
            except OSError:
                path = None
            finally:
                os.close(fd)
            if pid == self.self_pid or path is None or path.endswith(" (deleted)"):
                continue
            if not self.scope.contains(path) or is_backup_artifact(path, self.suffix):
                continue
            ppid, comm = proc_identity(pid)
            self.publish(FileOpenEvent(pid=pid, ppid=ppid, comm=comm, timestamp=ts, path=path,
                                       source=SourceKind.FS_NOTIFY))

    def close(self):
        if self._stop.is_set():
            return
        self._stop.set()
        try:
            os.write(self._wake_w, b"x")
        except OSError:
            pass
        super().close()
        for fd in (self.fd, self._wake_r, self._wake_w):
            try:
                os.close(fd)
            except OSError:
                pass
