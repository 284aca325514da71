"""Multi-trial experiment runner: corpus, daemon, adversary, scan, report.

Each trial gets a fresh corpus generated from ``seed + trial``. Live trials
run the daemon on a filesystem-notification source against a spawned
emulator; replay trials feed a synthetic trace of reads over the corpus
through the same daemon with a dry-run process controller, which makes their
reports reproducible bit for bit.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import shutil
import time
from dataclasses import dataclass, field

from .backup.engine import sha256_file
from .errors import TrialFailed
from .events import FileOpenEvent, SourceKind, write_trace
from .harness import (CorpusManifest, EmulationLog, EmulatorProfile, generate_victim_corpus,
                      get_profile, manifest_path_for, scan_corpus, spawn_emulator)
from .metrics import ExperimentReport
from .orchestrator import Daemon, RunConfig

log = logging.getLogger(__name__)

REPLAY_PID = 4000
REPLAY_GAP_NS = 500_000_000


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    profile: str | EmulatorProfile = "medium"
    corpus_size: int = 200
    seed: int = 0
    workdir: str = "openguard-runs"
    source: str = "live"  # or "replay"
    replay_repeats: int = 3
    timeout_s: float = 60.0
    settle_s: float = 0.5

    def emulator_profile(self) -> EmulatorProfile:
        if isinstance(self.profile, EmulatorProfile):
            return self.profile
        return get_profile(self.profile)


def trial_key(seed: int, trial: int) -> bytes:
    return hashlib.sha256(f"openguard-trial-key:{seed}:{trial}".encode()).digest()


def replay_events(manifest: CorpusManifest, repeats: int = 3, pid: int = REPLAY_PID,
                  gap_ns: int = REPLAY_GAP_NS) -> list[FileOpenEvent]:
    """A slow reader opening every corpus file ``repeats`` times, in sorted order."""
    out = []
    t = gap_ns
    for _ in range(repeats):
        for rel in sorted(manifest.entries):
            out.append(FileOpenEvent(pid, 1, "indexer", t, manifest.path_of(rel),
                                     SourceKind.TRACE_REPLAY))
            t += gap_ns
    return out


def _fresh_dir(path: str) -> str:
    if os.path.isdir(path):
        shutil.rmtree(path)
    os.makedirs(path)
    return path


def _valid_backups(daemon: Daemon, manifest: CorpusManifest) -> set[str]:
    """Relative paths whose snapshot holds the original (manifest) bytes."""
    valid = set()
    for rec in daemon.engine.registry.records():
        rel = os.path.relpath(rec.original_path, manifest.root)
        entry = manifest.entries.get(rel)
        if entry is not None and rec.content_hash == entry.digest:
            valid.add(rel)
    return valid


def _report(cfg: ExperimentConfig, trial: int, daemon: Daemon, manifest: CorpusManifest,
            encrypted: set[str], profile_name: str) -> ExperimentReport:
    rr = daemon.report
    valid = _valid_backups(daemon, manifest)
    timed = [i for i in rr.incidents if i.timings is not None]
    first = timed[0] if timed else None
    mismatches = []
    for rel in sorted(encrypted & valid):
        p = manifest.path_of(rel)
        if not os.path.exists(p) or sha256_file(p) != manifest.entries[rel].digest:
            mismatches.append(rel)
    return ExperimentReport.from_counts(
        cfg.run.mode.value, trial, daemon.detector.model.name, encrypted,
        len(daemon.engine.registry), valid,
        timings=first.timings if first else None,
        first_restore_at=rr.restore_summary.first_restore_at,
        drops=rr.drops, duration=rr.duration, events_seen=rr.events_seen,
        incidents=len(rr.incidents),
        kill_tree_size=first.kill.tree_size if first else 0,
        restored=rr.restore_summary.restored, restore_mismatches=mismatches,
        profile=profile_name, source=cfg.source,
        failure="; ".join(rr.critical) or None)


def _cross_check(encrypted: set[str], emu_log: EmulationLog, root: str) -> None:
    written = {os.path.relpath(p, root) for p in emu_log.write_set}
    renamed = {os.path.relpath(p, root) for p in emu_log.renamed}
    stray = encrypted - written
    if stray:
        raise TrialFailed(f"{len(stray)} files changed that the emulator never wrote, "
                          f"e.g. {sorted(stray)[0]}")
    unseen = renamed - encrypted
    if unseen:
        raise TrialFailed(f"{len(unseen)} files the emulator renamed were not found encrypted, "
                          f"e.g. {sorted(unseen)[0]}")


def run_live_trial(cfg: ExperimentConfig, trial: int, on_trial_end=None) -> ExperimentReport:
    tdir = _fresh_dir(os.path.join(os.path.abspath(cfg.workdir), f"trial-{trial:03d}"))
    root = os.path.join(tdir, "victim")
    manifest = generate_victim_corpus(root, cfg.corpus_size, cfg.seed + trial)
    profile = cfg.emulator_profile()
    run_cfg = dataclasses.replace(cfg.run, scope=[root], source_kind="fs_notify",
                                  journal_path=os.path.join(tdir, "journal.jsonl"))
    encrypted: set[str] = set()

    def before_restore(_incident):
        encrypted.update(scan_corpus(manifest, root, profile.ransom_extension).encrypted)

    emu_log_path = os.path.join(tdir, "emulator.jsonl")
    daemon = Daemon(run_cfg, before_restore=before_restore).start()
    emu = None
    try:
        emu = spawn_emulator(manifest_path_for(root), profile, emu_log_path,
                             trial_key(cfg.seed, trial))
        deadline = time.monotonic() + cfg.timeout_s
        while emu.poll() is None:
            if time.monotonic() > deadline:
                raise TrialFailed(f"emulator still running after {cfg.timeout_s}s")
            time.sleep(0.01)
        # let the daemon work through its backlog; a blocking pipeline may still
        # be classifying events from an attack that has already finished
        daemon.wait_idle(cfg.settle_s, timeout=cfg.timeout_s)
        if on_trial_end is not None:
            on_trial_end(daemon, manifest)
    finally:
        if emu is not None and emu.poll() is None:
            emu.kill()
        if emu is not None:
            emu.wait()
        daemon.stop()
    encrypted.update(scan_corpus(manifest, root, profile.ransom_extension).encrypted)
    emu_log = EmulationLog.load(emu_log_path)
    _cross_check(encrypted, emu_log, root)
    return _report(cfg, trial, daemon, manifest, encrypted, profile.name)


def run_replay_trial(cfg: ExperimentConfig, trial: int, on_trial_end=None) -> ExperimentReport:
    tdir = _fresh_dir(os.path.join(os.path.abspath(cfg.workdir), f"trial-{trial:03d}"))
    root = os.path.join(tdir, "victim")
    manifest = generate_victim_corpus(root, cfg.corpus_size, cfg.seed + trial)
    trace = os.path.join(tdir, "trace.jsonl")
    write_trace(replay_events(manifest, cfg.replay_repeats), trace)
    run_cfg = dataclasses.replace(cfg.run, scope=[root], source_kind="trace_replay",
                                  trace_file=trace, journal_path=None)
    encrypted: set[str] = set()
    daemon = Daemon(run_cfg, before_restore=lambda _i: encrypted.update(
        scan_corpus(manifest, root).encrypted)).start()
    try:
        if not daemon.wait(cfg.timeout_s):
            raise TrialFailed(f"replay did not finish within {cfg.timeout_s}s")
        if on_trial_end is not None:
            on_trial_end(daemon, manifest)
    finally:
        daemon.stop()
    encrypted.update(scan_corpus(manifest, root).encrypted)
    return _report(cfg, trial, daemon, manifest, encrypted, "replay")


def run_experiment(cfg: ExperimentConfig, trials: int, on_trial_end=None) -> list[ExperimentReport]:
    """Run ``trials`` trials; a failing trial is reported and the rest still run."""
    runner = run_replay_trial if cfg.source == "replay" else run_live_trial
    reports = []
    for trial in range(trials):
        try:
            reports.append(runner(cfg, trial, on_trial_end))
        except Exception as exc:  # a trial failure must not abort the experiment
            log.error("trial %d failed: %s", trial, exc)
            reports.append(ExperimentReport.failed(
                cfg.run.mode.value, trial, cfg.run.build_classifier().name, str(exc),
                source=cfg.source))
    return reports
