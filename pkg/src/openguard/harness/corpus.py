"""Seeded synthetic victim corpus with an integrity manifest."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import RootMissing, RootNotEmpty

EXTENSIONS = (
    ".pdf", ".docx", ".xlsx", ".pptx", ".txt", ".csv", ".odt", ".rtf",
    ".jpg", ".png", ".gif", ".bmp", ".zip", ".tar", ".gz", ".7z",
    ".mp3", ".html", ".json", ".xml",
)
SUBDIRS = ("docs", "sheets", "photos", "archive", "projects", "media", "mail", "notes")
MIN_SIZE = 1 << 10
MAX_SIZE = 1 << 20
FULL_SCALE = 4385


@dataclass(frozen=True)
class ManifestEntry:
    size: int
    digest: str


@dataclass
class CorpusManifest:
    root: str
    entries: dict[str, ManifestEntry] = field(default_factory=dict)
    seed: int = 0

    def __len__(self):
        return len(self.entries)

    def path_of(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def paths(self) -> list[str]:
        return [self.path_of(rel) for rel in sorted(self.entries)]

    def digest_of(self, abs_path: str) -> str | None:
        e = self.entries.get(os.path.relpath(abs_path, self.root))
        return None if e is None else e.digest

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"root": self.root, "seed": self.seed, "count": len(self.entries)})
                     + "\n")
            for rel in sorted(self.entries):
                e = self.entries[rel]
                fh.write(json.dumps({"relative_path": rel, "size": e.size, "digest": e.digest},
                                    separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CorpusManifest":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            m = cls(header["root"], seed=header["seed"])
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    m.entries[rec["relative_path"]] = ManifestEntry(rec["size"], rec["digest"])
        return m

    def same_content(self, other: "CorpusManifest") -> bool:
        return self.entries == other.entries

    def changed(self) -> list[str]:
        """Relative paths whose on-disk bytes differ from the manifest (or are missing)."""
        from ..backup.engine import sha256_file
        bad = []
        for rel, e in sorted(self.entries.items()):
            p = self.path_of(rel)
            try:
                if sha256_file(p) != e.digest:
                    bad.append(rel)
            except FileNotFoundError:
                bad.append(rel)
        return bad


def manifest_path_for(root: str | os.PathLike) -> str:
    return os.path.normpath(os.fspath(root)) + ".manifest.jsonl"


def _sizes(rng: np.random.Generator, n: int) -> np.ndarray:
    lo, hi = np.log(MIN_SIZE), np.log(MAX_SIZE)
    return np.exp(rng.uniform(lo, hi, n)).astype(np.int64)


def generate_victim_corpus(root: str | os.PathLike, n: int, seed: int) -> CorpusManifest:
    """Create ``n`` files under ``root`` deterministically from ``seed``.

    Files are spread over a few subdirectories with names cycling through
    :data:`EXTENSIONS` in a shuffled order, sizes log-uniform in [1 KiB, 1 MiB].
    The manifest is also written to ``<root>.manifest.jsonl``.
    """
    root = os.path.abspath(os.fspath(root))
    if os.path.isdir(root) and os.listdir(root):
        raise RootNotEmpty(root)
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(seed)
    sizes = _sizes(rng, n)
    ext_idx = rng.permutation(np.arange(n) % len(EXTENSIONS)) if n else np.array([], dtype=int)
    dir_idx = rng.integers(0, len(SUBDIRS), n)
    manifest = CorpusManifest(root, seed=seed)
    for i in range(n):
        rel = os.path.join(SUBDIRS[dir_idx[i]], f"file_{i:05d}{EXTENSIONS[ext_idx[i]]}")
        data = rng.bytes(int(sizes[i]))
        dest = os.path.join(root, rel)
        os.makedirs(os.path.dirname(dest), exist_ok=True)
        with open(dest, "wb") as fh:
            fh.write(data)
        manifest.entries[rel] = ManifestEntry(len(data), hashlib.sha256(data).hexdigest())
    manifest.write(manifest_path_for(root))
    return manifest


@dataclass
class EncryptionScan:
    renamed: list[str] = field(default_factory=list)
    modified: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    @property
    def encrypted(self) -> list[str]:
        return sorted(self.renamed + self.modified)


def scan_corpus(manifest: CorpusManifest, root: str | None = None,
                ransom_extension: str = ".locked") -> EncryptionScan:
    from ..backup.engine import sha256_file
    root = root or manifest.root
    if not os.path.isdir(root):
        raise RootMissing(root)
    scan = EncryptionScan()
    for rel, e in sorted(manifest.entries.items()):
        p = os.path.join(root, rel)
        if os.path.exists(p):
            if sha256_file(p) != e.digest:
                scan.modified.append(rel)
        elif os.path.exists(p + ransom_extension):
            scan.renamed.append(rel)
        else:
            scan.missing.append(rel)
    return scan


def count_encrypted(manifest: CorpusManifest, root: str | None = None,
                    ransom_extension: str = ".locked") -> int:
    """Manifest entries renamed with the ransom extension, or altered in place."""
    return len(scan_corpus(manifest, root, ransom_extension).encrypted)
