"""SQLite-backed storage element: write-once blobs addressed by text keys."""

from __future__ import annotations

import hashlib
import logging
import os
import sqlite3
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

LOG = logging.getLogger(__name__)

MEMORY = ":memory:"
DB_NAME = "storage.sqlite3"


def _state_dir() -> Path:
    base = os.environ.get("PHYLOGRID_STORAGE_DIR") or os.path.join("~", ".phylogrid")
    path = Path(base).expanduser()
    try:
        path.mkdir(parents=True, exist_ok=True)
        return path
    except OSError:
        fallback = Path.cwd() / ".phylogrid"
        fallback.mkdir(parents=True, exist_ok=True)
        return fallback


def default_storage_dir() -> Path:
    return _state_dir()


def _utc_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def content_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---- Errors -----------------------------------------------------------------


class StorageError(RuntimeError):
    """Base class for storage element failures."""


class KeyExists(StorageError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"Key '{key}' already exists (storage is write-once).")


class KeyNotFound(StorageError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"Key '{key}' was not found.")


class IntegrityError(StorageError):
    """Stored bytes no longer hash to their recorded digest."""

    def __init__(self, key: str, expected: str, found: str):
        self.key = key
        self.expected = expected
        self.found = found
        super().__init__(f"Digest mismatch for '{key}': recorded {expected[:12]}, found {found[:12]}.")


@dataclass(slots=True)
class StoredBlob:
    key: str
    digest: str
    size: int
    created_at: str

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class StorageElement:
    """Thread-safe helper around one SQLite blob table.

    Pass ``":memory:"`` for an ephemeral element, a directory to keep
    ``storage.sqlite3`` inside it, or a database file path.
    """

    def __init__(self, location: Optional[Path | str] = None):
        if location is None:
            location = _state_dir()
        if str(location) == MEMORY:
            self.db_path: Optional[Path] = None
        else:
            path = Path(location).expanduser()
            if path.is_dir() or not path.suffix:
                path.mkdir(parents=True, exist_ok=True)
                path = path / DB_NAME
            path.parent.mkdir(parents=True, exist_ok=True)
            self.db_path = path
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(
            MEMORY if self.db_path is None else str(self.db_path),
            check_same_thread=False,
        )
        self._conn.row_factory = sqlite3.Row
        self._ensure_schema()

    def __repr__(self) -> str:
        return f"StorageElement({str(self.db_path) if self.db_path else MEMORY!r})"

    def _ensure_schema(self) -> None:
        with self._lock, self._conn:
            self._conn.executescript(
                """
                CREATE TABLE IF NOT EXISTS blobs (
                    key TEXT PRIMARY KEY,
                    data BLOB NOT NULL,
                    digest TEXT NOT NULL,
                    size INTEGER NOT NULL,
                    created_at TEXT NOT NULL
                );
                """
            )

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    # ---- Blob helpers -------------------------------------------------------

    def put(self, key: str, data: bytes) -> str:
        if not key:
            raise StorageError("Storage keys must be non-empty.")
        digest = content_digest(data)
        try:
            with self._lock, self._conn:
                self._conn.execute(
                    "INSERT INTO blobs (key, data, digest, size, created_at) VALUES (?, ?, ?, ?, ?)",
                    (key, sqlite3.Binary(data), digest, len(data), _utc_timestamp()),
                )
        except sqlite3.IntegrityError as exc:
            raise KeyExists(key) from exc
        LOG.debug("Stored %s (%d bytes, %s)", key, len(data), digest[:12])
        return digest

    def get(self, key: str, *, verify: bool = True) -> bytes:
        with self._lock:
            row = self._conn.execute("SELECT data, digest FROM blobs WHERE key = ?", (key,)).fetchone()
        if row is None:
            raise KeyNotFound(key)
        data = bytes(row["data"])
        if verify:
            found = content_digest(data)
            if found != row["digest"]:
                raise IntegrityError(key, row["digest"], found)
        return data

    def digest(self, key: str) -> str:
        return self.stat(key).digest

    def stat(self, key: str) -> StoredBlob:
        with self._lock:
            row = self._conn.execute(
                "SELECT key, digest, size, created_at FROM blobs WHERE key = ?", (key,)
            ).fetchone()
        if row is None:
            raise KeyNotFound(key)
        return StoredBlob(row["key"], row["digest"], int(row["size"]), row["created_at"])

    def exists(self, key: str) -> bool:
        with self._lock:
            row = self._conn.execute("SELECT 1 FROM blobs WHERE key = ?", (key,)).fetchone()
        return row is not None

    __contains__ = exists

    def keys(self, prefix: str = "") -> List[str]:
        # prefix match without LIKE wildcards
        with self._lock:
            rows = self._conn.execute(
                "SELECT key FROM blobs WHERE substr(key, 1, ?) = ? ORDER BY key",
                (len(prefix), prefix),
            ).fetchall()
        return [row["key"] for row in rows]


def se_put(element: StorageElement, key: str, data: bytes) -> str:
    """Store `data` under a fresh key and return its sha256 digest."""
    return element.put(key, data)


def se_get(element: StorageElement, key: str) -> bytes:
    return element.get(key)


__all__ = [
    "IntegrityError",
    "KeyExists",
    "KeyNotFound",
    "StorageElement",
    "StorageError",
    "StoredBlob",
    "content_digest",
    "default_storage_dir",
    "se_get",
    "se_put",
]
