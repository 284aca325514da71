"""Read-only workload at a bounded open rate."""
from __future__ import annotations

import argparse
import json
import os
import random
import sys
import time

from .corpus import CorpusManifest


def run_benign_workload(manifest: CorpusManifest, rate: float = 2.0, duration: float = 60.0,
                        log_path: str | None = None, seed: int = 0) -> list[dict]:
    """Open and read random corpus files at no more than ``rate`` per second.

    Never writes or renames. Returns the open log (also appended to
    ``log_path`` as JSON lines when given).
    """
    records: list[dict] = []
    if rate <= 0 or duration <= 0 or not manifest.entries:
        return records
    rng = random.Random(seed)
    rels = sorted(manifest.entries)
    period = 1.0 / rate
    fd = os.open(log_path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644) if log_path else None
    start = time.monotonic()
    k = 0
    try:
        while True:
            due = start + k * period
            if due - start >= duration:
                break
            now = time.monotonic()
            if due > now:
                time.sleep(due - now)
            rel = rng.choice(rels)
            t_open = time.monotonic_ns()
            try:
                with open(manifest.path_of(rel), "rb") as fh:
                    fh.read()
            except OSError:
                pass
            rec = {"path": manifest.path_of(rel), "t_open_ns": t_open, "pid": os.getpid()}
            records.append(rec)
            if fd is not None:
                os.write(fd, (json.dumps(rec) + "\n").encode())
            k += 1
    finally:
        if fd is not None:
            os.close(fd)
    return records


def spawn_benign(manifest_path: str, rate: float, duration: float, log_path: str, seed: int = 0):
    import subprocess
    cmd = [sys.executable, "-m", "openguard.harness", "benign", "--manifest", manifest_path,
           "--rate", str(rate), "--duration", str(duration), "--log", log_path, "--seed", str(seed)]
    return subprocess.Popen(cmd, stdin=subprocess.DEVNULL)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="openguard-benign")
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--rate", type=float, default=2.0)
    ap.add_argument("--duration", type=float, default=60.0)
    ap.add_argument("--log")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    run_benign_workload(CorpusManifest.load(args.manifest), args.rate, args.duration, args.log,
                        args.seed)
    return 0
