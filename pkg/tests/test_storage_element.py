from __future__ import annotations

import sqlite3
import threading

import pytest

from storage_element import (
    IntegrityError,
    KeyExists,
    KeyNotFound,
    StorageElement,
    StorageError,
    content_digest,
    default_storage_dir,
    se_get,
    se_put,
)


def test_put_then_get(storage):
    digest = se_put(storage, "runs/1/input.nex", b"#NEXUS\n")
    assert digest == content_digest(b"#NEXUS\n")
    assert se_get(storage, "runs/1/input.nex") == b"#NEXUS\n"
    assert storage.digest("runs/1/input.nex") == digest
    assert "runs/1/input.nex" in storage


def test_keys_are_write_once(storage):
    storage.put("a", b"1")
    with pytest.raises(KeyExists) as info:
        storage.put("a", b"2")
    assert info.value.key == "a"
    assert storage.get("a") == b"1"


def test_missing_key(storage):
    with pytest.raises(KeyNotFound):
        storage.get("nope")
    with pytest.raises(KeyNotFound):
        storage.stat("nope")
    assert not storage.exists("nope")


def test_empty_key_is_rejected(storage):
    with pytest.raises(StorageError):
        storage.put("", b"x")


def test_empty_blob_is_allowed(storage):
    storage.put("empty", b"")
    assert storage.get("empty") == b""
    assert storage.stat("empty").size == 0


def test_stat_fields(storage):
    storage.put("k", b"abc")
    blob = storage.stat("k")
    assert blob.to_dict()["size"] == 3
    assert blob.digest == content_digest(b"abc")
    assert blob.created_at.endswith("+00:00")


def test_prefix_listing_treats_wildcards_literally(storage):
    for key in ("runs/a_1/x", "runs/a_1/y", "runs/ab1/z", "other"):
        storage.put(key, b"")
    assert storage.keys("runs/a_1/") == ["runs/a_1/x", "runs/a_1/y"]
    assert storage.keys() == ["other", "runs/a_1/x", "runs/a_1/y", "runs/ab1/z"]


def test_tampered_bytes_fail_verification(tmp_path):
    element = StorageElement(tmp_path)
    element.put("k", b"original")
    with sqlite3.connect(element.db_path) as conn:
        conn.execute("UPDATE blobs SET data = ? WHERE key = ?", (b"tampered", "k"))
    with pytest.raises(IntegrityError) as info:
        element.get("k")
    assert info.value.expected == content_digest(b"original")
    assert element.get("k", verify=False) == b"tampered"
    element.close()


def test_directory_location_persists(tmp_path):
    first = StorageElement(tmp_path / "se")
    first.put("k", b"v")
    first.close()
    assert (tmp_path / "se" / "storage.sqlite3").exists()
    second = StorageElement(tmp_path / "se")
    assert second.get("k") == b"v"
    second.close()


def test_default_directory_follows_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PHYLOGRID_STORAGE_DIR", str(tmp_path / "state"))
    assert default_storage_dir() == tmp_path / "state"
    assert (tmp_path / "state").is_dir()


def test_concurrent_writers(storage):
    def write(worker):
        for i in range(20):
            storage.put(f"w{worker}/{i}", bytes([worker, i]))

    threads = [threading.Thread(target=write, args=(worker,)) for worker in range(4)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert len(storage.keys("w")) == 80
