from __future__ import annotations

import logging
import os
import queue
import threading
from typing import Iterable, Iterator

from .model import BACKUP_SUFFIX, FileOpenEvent, ProtectedScope, filter_events
from .trace import replay_trace

log = logging.getLogger(__name__)

_CLOSED = object()


class EventStream:
    """Single-consumer iterator of :class:`FileOpenEvent`.

    ``live`` is true when the pids in the stream are real processes on this
    host, i.e. when it is meaningful to signal them.
    """

    live = False

    def __init__(self):
        self.dropped = 0

    def __iter__(self) -> Iterator[FileOpenEvent]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class IterableStream(EventStream):
    """Wraps a finite iterable (trace replay); never drops, blocks the producer."""

    def __init__(self, events: Iterable[FileOpenEvent], scope: ProtectedScope | None = None,
                 suffix: str = BACKUP_SUFFIX):
        super().__init__()
        self._events = events
        self._scope = scope
        self._suffix = suffix
        self._closed = False

    def __iter__(self):
        it = self._events if self._scope is None else filter_events(self._events, self._scope, self._suffix)
        for ev in it:
            if self._closed:
                break
            yield ev

    def close(self):
        self._closed = True


class QueuedStream(EventStream):
    """Base for live sources: a producer thread fills a bounded queue.

    When the queue is full the record is dropped and counted, mirroring a
    kernel ring buffer overrun.
    """

    live = True

    def __init__(self, capacity: int = 65536):
        super().__init__()
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self):
        self._thread = threading.Thread(target=self._produce_guarded, name=type(self).__name__,
                                        daemon=True)
        self._thread.start()
        return self

    def _produce_guarded(self):
        try:
            self._produce()
        except Exception:
            log.exception("event producer crashed")
        finally:
            self._q.put(_CLOSED)

    def _produce(self):
        raise NotImplementedError

    def pending(self) -> int:
        return self._q.qsize()

    def publish(self, ev: FileOpenEvent) -> bool:
        try:
            self._q.put_nowait(ev)
            return True
        except queue.Full:
            self.dropped += 1
            return False

    def get(self, timeout: float | None = None) -> FileOpenEvent | None:
        """Next event, or None on timeout. Raises StopIteration once closed."""
        try:
            item = self._q.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is _CLOSED:
            self._q.put(_CLOSED)
            raise StopIteration
        return item

    def __iter__(self):
        while True:
            try:
                ev = self.get(timeout=0.1)
            except StopIteration:
                return
            if ev is not None:
                yield ev

    def close(self):
        self._stop.set()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=2)


def subscribe(scope: ProtectedScope, source_kind: str, *, trace_file=None, realtime=False,
                suffix: str = BACKUP_SUFFIX, capacity: int = 65536, probe_symbol: str | None = None,
                fallback: bool = True) -> EventStream:
    """Open an event stream of the given kind, filtered to ``scope``.

    ``kernel_probe`` falls back to ``fs_notify`` when the probe cannot be
    attached and ``fallback`` is true.
    """
    from ..errors import ProbeAttachFailed, SourceUnavailable
    from .model import SourceKind

    kind = SourceKind(source_kind)
    if kind is SourceKind.TRACE_REPLAY:
        if trace_file is None:
            raise SourceUnavailable("trace_replay needs a trace file")
        if not os.path.isfile(trace_file):
            raise SourceUnavailable(f"trace file not found: {trace_file}")
        return IterableStream(replay_trace(trace_file, realtime=realtime), scope, suffix)
    if kind is SourceKind.KERNEL_PROBE:
        from .kprobe import KprobeSource
        try:
            return KprobeSource(scope, suffix=suffix, capacity=capacity,
                                symbol=probe_symbol).start()
        except ProbeAttachFailed as exc:
            if not fallback:
                raise
            log.warning("kernel probe unavailable (%s); falling back to fs_notify", exc)
    from .fanotify import FanotifySource
    return FanotifySource(scope, suffix=suffix, capacity=capacity).start()
