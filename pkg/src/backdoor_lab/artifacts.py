"""Seed derivation and transactional artifact writing with a CRC32 manifest."""
from __future__ import annotations

import json
import os
import zlib
from pathlib import Path


def derive_seed(seed: int, subsystem: str) -> int:
    """Per-subsystem seed: global seed XOR CRC32 of the subsystem name."""
    return (int(seed) ^ zlib.crc32(subsystem.encode("utf-8"))) & 0xFFFFFFFF


def crc32_hex(data: bytes) -> str:
    return f"{zlib.crc32(data):08x}"


class ArtifactWriter:
    """Writes files under ``root`` atomically and records their CRC32.

    Used as a context manager: if the block raises, every file written inside
    it is removed again, so a failed command leaves no partial artifacts.
    """

    MANIFEST = "manifest.json"

    def __init__(self, root, fresh_manifest: bool = False):
        self.root = Path(root)
        self.written: dict[str, str] = {}
        self.fresh_manifest = fresh_manifest

    def __enter__(self):
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for rel in self.written:
                (self.root / rel).unlink(missing_ok=True)
            self.written.clear()
            return False
        self.write_manifest()
        return False

    def path(self, rel: str) -> Path:
        return self.root / rel

    def write(self, rel: str, data: bytes | str) -> Path:
        if isinstance(data, str):
            data = data.encode("utf-8")
        dest = self.root / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        tmp = dest.with_name(dest.name + ".part")
        tmp.write_bytes(data)
        os.replace(tmp, dest)
        self.written[rel] = crc32_hex(data)
        return dest

    def write_json(self, rel: str, obj) -> Path:
        return self.write(rel, json.dumps(obj, indent=1, sort_keys=True) + "\n")

    def write_manifest(self) -> Path:
        path = self.root / self.MANIFEST
        entries = {}
        if path.exists() and not self.fresh_manifest:
            entries = json.loads(path.read_text())
        entries.update(self.written)
        text = json.dumps(dict(sorted(entries.items())), indent=1) + "\n"
        tmp = path.with_name(path.name + ".part")
        tmp.write_text(text)
        os.replace(tmp, path)
        return path
