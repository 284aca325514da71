"""File-open event capture: kernel probe, fanotify and trace replay sources."""
from .model import (BACKUP_SUFFIX, FileOpenEvent, PathFragmentBatch, ProtectedScope, SourceKind,
                    filter_events, fragments_of, is_backup_artifact, reconstruct_path)
from .stream import EventStream, IterableStream, QueuedStream, subscribe
from .trace import dumps_event, parse_event, replay_trace, write_trace

__all__ = [
    "BACKUP_SUFFIX", "EventStream", "FileOpenEvent", "IterableStream", "PathFragmentBatch",
    "ProtectedScope", "QueuedStream", "SourceKind", "dumps_event", "filter_events", "fragments_of",
    "is_backup_artifact", "parse_event", "reconstruct_path", "replay_trace", "subscribe",
    "write_trace",
]
