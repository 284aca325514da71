"""Snapshot-on-open defense: backup registry, guarded copy, restore."""
from .engine import (BackupEngine, FinalizeSummary, GuardAction, GuardOutcome, RestoreAction,
                     RestoreOutcome, RestoreSummary, ShutdownPolicy, sha256_file)
from .registry import BackupRecord, BackupRegistry, BackupStatus, Journal

__all__ = [
    "BackupEngine", "BackupRecord", "BackupRegistry", "BackupStatus", "FinalizeSummary",
    "GuardAction", "GuardOutcome", "Journal", "RestoreAction", "RestoreOutcome", "RestoreSummary",
    "ShutdownPolicy", "sha256_file",
]
