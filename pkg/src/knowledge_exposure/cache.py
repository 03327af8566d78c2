"""On-disk embedding cache: one ``.npy`` per key plus a JSON sidecar with a checksum."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import tempfile
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CACHE_ENV = "KE_CACHE_DIR"


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "knowledge_exposure"))


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class EmbeddingCache:
    """Content-addressed store for embedding matrices.

    Keys are plain dicts (dataset, class, transform, severity, encoder and
    whatever else determines the matrix); they are hashed canonically.
    ``get`` returns ``None`` on a miss.  An entry whose array bytes no longer
    match the recorded SHA-256 is evicted and reported as a miss.
    """

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else default_cache_dir()
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def digest(key: dict) -> str:
        canon = json.dumps(key, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:40]

    def _paths(self, key):
        d = self.digest(key)
        return self.root / f"{d}.npy", self.root / f"{d}.json"

    def __contains__(self, key):
        return self.get(key) is not None

    def get(self, key: dict):
        """Return ``(matrix, metadata)`` or ``None``."""
        arr_path, meta_path = self._paths(key)
        if not (arr_path.exists() and meta_path.exists()):
            return None
        raw = arr_path.read_bytes()
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError:
            logger.warning("unreadable cache sidecar %s; evicting", meta_path)
            self.evict(key)
            return None
        if hashlib.sha256(raw).hexdigest() != meta.get("sha256"):
            logger.warning("checksum mismatch for cache entry %s; evicting", arr_path.name)
            self.evict(key)
            return None
        matrix = np.load(arr_path, allow_pickle=False)
        return matrix, meta.get("metadata", {})

    def put(self, key: dict, matrix: np.ndarray, metadata: dict | None = None):
        arr_path, meta_path = self._paths(key)
        buf = _npy_bytes(matrix)
        meta = {"key": key, "sha256": hashlib.sha256(buf).hexdigest(), "metadata": metadata or {}}
        _atomic_write(arr_path, buf)
        _atomic_write(meta_path, json.dumps(meta, sort_keys=True, default=str).encode("utf-8"))

    def evict(self, key: dict):
        for p in self._paths(key):
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def _npy_bytes(matrix) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(matrix), allow_pickle=False)
    return buf.getvalue()
