"""Content-addressed on-disk feature cache.

Layout (version 1)::

    <root>/<key[:2]>/<key>.f32    raw little-endian float32 values
    <root>/<key[:2]>/<key>.json   sidecar: dim, feature spec, digests

The key is the SHA-256 of (image-bytes digest, canonical feature spec,
backbone graph digest). Writes go through a temp file and ``os.replace`` so
concurrent readers never observe a half-written entry.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

log = logging.getLogger(__name__)

CACHE_LAYOUT_VERSION = 1
_LE_F32 = np.dtype("<f4")


@dataclass
class FeatureCacheEntry:
    key: str
    dim: int
    values: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cache_key(image_digest: str, spec_canonical: str, backbone_digest: str) -> str:
    payload = "\n".join(
        [f"eventverify-cache-v{CACHE_LAYOUT_VERSION}", image_digest, spec_canonical, backbone_digest]
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class FeatureCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0
        self.corrupt: list[str] = []

    def _paths(self, key: str) -> tuple[Path, Path]:
        d = self.root / key[:2]
        return d / f"{key}.f32", d / f"{key}.json"

    def put(self, key: str, values: np.ndarray, meta: dict[str, Any] | None = None) -> None:
        values = np.ascontiguousarray(values, dtype=_LE_F32).ravel()
        payload, sidecar = self._paths(key)
        payload.parent.mkdir(parents=True, exist_ok=True)
        doc = {"layout_version": CACHE_LAYOUT_VERSION, "key": key, "dim": int(values.size)}
        doc.update(meta or {})
        _atomic_write(payload, values.tobytes())
        _atomic_write(sidecar, (json.dumps(doc, sort_keys=True) + "\n").encode())

    def get(self, key: str) -> FeatureCacheEntry | None:
        """Return the entry, or None on a miss. Corrupt entries count as misses."""
        payload, sidecar = self._paths(key)
        if not payload.exists() or not sidecar.exists():
            self.misses += 1
            return None
        try:
            meta = json.loads(sidecar.read_text())
            dim = int(meta["dim"])
        except (ValueError, KeyError) as exc:
            return self._corrupt(key, f"unreadable sidecar ({exc})")
        raw = payload.read_bytes()
        if len(raw) != dim * 4:
            return self._corrupt(key, f"payload is {len(raw)} bytes, expected {dim * 4}")
        self.hits += 1
        return FeatureCacheEntry(key, dim, np.frombuffer(raw, dtype=_LE_F32).copy(), meta)

    def _corrupt(self, key: str, why: str) -> None:
        msg = f"corrupt cache entry {key}: {why}; recomputing"
        log.warning(msg)
        self.corrupt.append(msg)
        self.misses += 1
        return None

    def __contains__(self, key: str) -> bool:
        payload, sidecar = self._paths(key)
        return payload.exists() and sidecar.exists()

    def stats(self) -> dict[str, int]:
        return {"hits": self.hits, "misses": self.misses, "corrupt": len(self.corrupt)}
