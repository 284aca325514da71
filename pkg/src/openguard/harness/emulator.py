"""Ransomware stand-in confined to a corpus root.

Each eligible file is opened read/write, read, "encrypted" with a keyed
ChaCha20 keystream, overwritten in place and renamed with the ransom
extension. The per-file time budget (1 / files_per_second) is spent between
the read and the write, which is where a real encryptor spends its CPU time.

Run as ``python -m openguard.harness emulate`` so that it is a separate OS
process that can be suspended and killed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import random
import sys
import time
from dataclasses import asdict, dataclass, field

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

from .corpus import CorpusManifest

DEFAULT_SKIP = (".tmp", ".dll", ".bat", ".exe")


@dataclass
class EmulatorProfile:
    name: str
    files_per_second: float  # per worker; 0 means unpaced
    skip_extensions: tuple[str, ...] = DEFAULT_SKIP
    ransom_extension: str = ".locked"
    child_processes: int = 0
    order: str = "shuffled"
    seed: int = 0

    def __post_init__(self):
        self.skip_extensions = tuple(self.skip_extensions)
        if self.order not in ("lexicographic", "shuffled"):
            raise ValueError(f"unknown order {self.order!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip_extensions"] = list(self.skip_extensions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmulatorProfile":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "EmulatorProfile":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


# Behavioural classes only: slow ~ steady Conti-like, medium ~ AvosLocker-like,
# fast ~ IceFire-like (outpaces the backup path on purpose).
PROFILES = {
    "slow": EmulatorProfile("slow", 5.0),
    "medium": EmulatorProfile("medium", 50.0),
    "fast": EmulatorProfile("fast", 400.0, child_processes=3),
}


def get_profile(name_or_path: str, **overrides) -> EmulatorProfile:
    if name_or_path in PROFILES:
        base = PROFILES[name_or_path].to_dict()
    else:
        with open(name_or_path, encoding="utf-8") as fh:
            base = json.load(fh)
    base.update(overrides)
    return EmulatorProfile.from_dict(base)


def keystream_cipher(key: bytes, rel_path: str):
    nonce = hashlib.sha256(rel_path.encode("utf-8")).digest()[:16]
    return Cipher(algorithms.ChaCha20(key, nonce), mode=None)


def apply_keystream(key: bytes, rel_path: str, data: bytes) -> bytes:
    """Encrypt or decrypt (the operation is its own inverse)."""
    return keystream_cipher(key, rel_path).encryptor().update(data)


def encryption_order(manifest: CorpusManifest, profile: EmulatorProfile) -> list[str]:
    rels = sorted(manifest.entries)
    if profile.order == "shuffled":
        random.Random(profile.seed).shuffle(rels)
    return rels


def is_skipped(rel: str, profile: EmulatorProfile) -> bool:
    return any(rel.endswith(ext) for ext in profile.skip_extensions)


class _Log:
    def __init__(self, path):
        self.fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)

    def write(self, **rec):
        # one write() per line keeps records whole across worker processes
        os.write(self.fd, (json.dumps(rec, separators=(",", ":")) + "\n").encode())


def _work(root: str, rels: list[str], key: bytes, profile: EmulatorProfile, log: _Log, worker: int):
    budget_ns = int(1e9 / profile.files_per_second) if profile.files_per_second > 0 else 0
    real_root = os.path.realpath(root)
    pid = os.getpid()
    for rel in rels:
        path = os.path.join(root, rel)
        if not os.path.realpath(path).startswith(real_root + os.sep):
            raise RuntimeError(f"refusing to touch {path}: outside corpus root")
        if is_skipped(rel, profile):
            log.write(kind="skip", path=path, worker=worker, pid=pid)
            continue
        t0 = time.monotonic_ns()
        try:
            fh = open(path, "r+b")
        except OSError as exc:
            log.write(kind="error", path=path, worker=worker, pid=pid, error=str(exc))
            continue
        t_open = time.monotonic_ns()
        log.write(kind="open", path=path, t_open_ns=t_open, t_renamed_ns=None, worker=worker,
                  pid=pid)
        try:
            with fh:
                data = fh.read()
                ct = apply_keystream(key, rel, data)
                if budget_ns:
                    remaining = t0 + budget_ns - time.monotonic_ns()
                    if remaining > 0:
                        time.sleep(remaining / 1e9)
                t_write = time.monotonic_ns()
                log.write(kind="write", path=path, t_open_ns=t_open, t_write_ns=t_write,
                          t_renamed_ns=None, worker=worker, pid=pid)
                fh.seek(0)
                fh.write(ct)
                fh.truncate()
            os.rename(path, path + profile.ransom_extension)
        except OSError as exc:
            log.write(kind="error", path=path, worker=worker, pid=pid, error=str(exc))
            continue
        log.write(kind="done", path=path, t_open_ns=t_open, t_write_ns=t_write,
                  t_renamed_ns=time.monotonic_ns(), worker=worker, pid=pid)


def emulate(manifest: CorpusManifest, profile: EmulatorProfile, log_path: str,
            key: bytes | None = None) -> int:
    """Encrypt the corpus from the current process (and forked workers)."""
    key = key if key is not None else os.urandom(32)
    log = _Log(log_path)
    log.write(kind="key", key=key.hex(), cipher="chacha20", profile=profile.to_dict(),
              pid=os.getpid())
    rels = encryption_order(manifest, profile)
    nworkers = profile.child_processes + 1
    children = []
    for w in range(1, nworkers):
        pid = os.fork()
        if pid == 0:
            try:
                _work(manifest.root, rels[w::nworkers], key, profile, log, w)
            finally:
                os._exit(0)
        children.append(pid)
    _work(manifest.root, rels[0::nworkers], key, profile, log, 0)
    for pid in children:
        os.waitpid(pid, 0)
    return 0


@dataclass
class FileRecord:
    path: str
    worker: int
    pid: int
    t_open_ns: int | None = None
    t_write_ns: int | None = None
    t_renamed_ns: int | None = None


@dataclass
class EmulationLog:
    key: bytes | None = None
    files: dict[str, FileRecord] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    pids: set[int] = field(default_factory=set)
    root_pid: int | None = None

    @classmethod
    def load(cls, path) -> "EmulationLog":
        log = cls()
        if not os.path.exists(path):
            return log
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    continue  # torn tail line from a killed writer
                kind = rec.get("kind")
                if kind == "key":
                    log.key = bytes.fromhex(rec["key"])
                    log.root_pid = rec.get("pid")
                    continue
                if "pid" in rec:
                    log.pids.add(rec["pid"])
                if kind == "skip":
                    log.skipped.append(rec["path"])
                elif kind == "error":
                    log.errors.append(rec)
                else:
                    fr = log.files.setdefault(rec["path"], FileRecord(rec["path"], rec["worker"],
                                                                      rec["pid"]))
                    for k in ("t_open_ns", "t_write_ns", "t_renamed_ns"):
                        if rec.get(k) is not None:
                            setattr(fr, k, rec[k])
        return log

    @property
    def opened(self) -> list[str]:
        return sorted(p for p, r in self.files.items() if r.t_open_ns is not None)

    @property
    def write_set(self) -> list[str]:
        """Files the emulator started to overwrite."""
        return sorted(p for p, r in self.files.items() if r.t_write_ns is not None)

    @property
    def renamed(self) -> list[str]:
        return sorted(p for p, r in self.files.items() if r.t_renamed_ns is not None)

    def renamed_before(self, t_ns: int) -> list[str]:
        return sorted(p for p, r in self.files.items()
                      if r.t_renamed_ns is not None and r.t_renamed_ns < t_ns)

    def first_open(self, pid: int | None = None) -> int | None:
        ts = [r.t_open_ns for r in self.files.values()
              if r.t_open_ns is not None and (pid is None or r.pid == pid)]
        return min(ts) if ts else None


def spawn_emulator(manifest_path: str, profile: EmulatorProfile, log_path: str,
                   key: bytes | None = None, profile_path: str | None = None):
    """Start the emulator as a child process; returns the Popen handle."""
    import subprocess
    if profile_path is None:
        profile_path = log_path + ".profile.json"
        profile.save(profile_path)
    cmd = [sys.executable, "-m", "openguard.harness", "emulate", "--manifest", manifest_path,
           "--profile", profile_path, "--log", log_path]
    if key is not None:
        cmd += ["--key", key.hex()]
    return subprocess.Popen(cmd, stdin=subprocess.DEVNULL)


def run_emulator(manifest_path: str, profile: EmulatorProfile, log_path: str,
                 key: bytes | None = None, timeout: float | None = None) -> EmulationLog:
    proc = spawn_emulator(manifest_path, profile, log_path, key)
    proc.wait(timeout=timeout)
    return EmulationLog.load(log_path)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="openguard-emulator")
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--profile", required=True, help="profile name or JSON file")
    ap.add_argument("--log", required=True)
    ap.add_argument("--key", help="hex key (default: random)")
    args = ap.parse_args(argv)
    manifest = CorpusManifest.load(args.manifest)
    profile = get_profile(args.profile)
    key = bytes.fromhex(args.key) if args.key else None
    return emulate(manifest, profile, args.log, key)
