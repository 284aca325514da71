"""Self-contained stand-ins for experiment inputs: corpus, encryptor, benign load."""
from .benign import run_benign_workload, spawn_benign
from .corpus import (CorpusManifest, EncryptionScan, ManifestEntry, count_encrypted,
                     generate_victim_corpus, manifest_path_for, scan_corpus)
from .emulator import (PROFILES, EmulationLog, EmulatorProfile, apply_keystream, emulate,
                       encryption_order, get_profile, run_emulator, spawn_emulator)

__all__ = [
    "PROFILES", "CorpusManifest", "EmulationLog", "EmulatorProfile", "EncryptionScan",
    "ManifestEntry", "apply_keystream", "count_encrypted", "emulate", "encryption_order",
    "generate_victim_corpus", "get_profile", "manifest_path_for", "run_benign_workload",
    "run_emulator", "scan_corpus", "spawn_benign", "spawn_emulator",
]
