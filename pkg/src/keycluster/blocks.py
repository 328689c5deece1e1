"""Worker-side block storage.

Layout::

    data_dir/<16-hex FNV-1a of key>/KEY            key text (UTF-8)
    data_dir/<16-hex FNV-1a of key>/<seq>.blk      block payloads
    data_dir/<16-hex FNV-1a of key>/manifest.json  published once all blocks exist

Every file is written to a temp name in the same directory, fsynced and
renamed into place, so readers see the old payload or the new one in full.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
import threading
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

from keycluster.errors import BlockNotFound, ClusterError, MissingBlock, PayloadTooLarge
from keycluster.hashing import key_hex

DEFAULT_BLOCK_SIZE = 4 * 1024 * 1024


class BlockId(NamedTuple):
    key: str
    seq: int


class Manifest(NamedTuple):
    key: str
    block_count: int
    total_bytes: int


def chunk(value: bytes, block_size: int) -> list[bytes]:
    """Split ``value`` into ``block_size`` pieces; an empty value is one empty block."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    if not value:
        return [b""]
    view = memoryview(value)
    return [bytes(view[i : i + block_size]) for i in range(0, len(value), block_size)]


def reassemble(blocks: Iterable[bytes] | Iterable[tuple[int, bytes]]) -> bytes:
    """Concatenate blocks.

    Accepts either bare payloads (taken as seq 0, 1, ...) or ``(seq, payload)``
    pairs, which must run contiguously from 0.

    Raises:
        MissingBlock: no blocks at all, or a gap in the sequence numbers.
    """
    parts = []
    for expected, item in enumerate(blocks):
        if isinstance(item, tuple):
            seq, payload = item
            if seq != expected:
                raise MissingBlock(f"expected block {expected}, got {seq}")
        else:
            payload = item
        parts.append(payload)
    if not parts:
        raise MissingBlock("a value has at least one block")
    return b"".join(parts)


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


class BlockStore:
    """Blocks of many keys under one data directory."""

    def __init__(self, data_dir: str | os.PathLike, block_size: int = DEFAULT_BLOCK_SIZE):
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.block_size = block_size
        # Serializes structural changes per key dir (create/delete/manifest);
        # block payload publishes are already atomic via rename.
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key_hex(key), threading.Lock())

    def key_dir(self, key: str) -> Path:
        return self.data_dir / key_hex(key)

    def block_path(self, block_id: BlockId) -> Path:
        return self.key_dir(block_id.key) / f"{block_id.seq}.blk"

    def _ensure_dir(self, key: str) -> Path:
        d = self.key_dir(key)
        marker = d / "KEY"
        if marker.exists():
            owner = marker.read_text(encoding="utf-8")
            if owner != key:
                raise ClusterError(f"hash collision: {key!r} vs stored {owner!r}")
            return d
        d.mkdir(parents=True, exist_ok=True)
        _atomic_write(marker, key.encode("utf-8"))
        return d

    # -- blocks ------------------------------------------------------------

    def put_block(self, block_id: BlockId, payload: bytes) -> None:
        if len(payload) > self.block_size:
            raise PayloadTooLarge(f"{len(payload)} bytes > block_size {self.block_size}")
        if block_id.seq < 0:
            raise ValueError("negative block seq")
        with self._lock(block_id.key):
            self._ensure_dir(block_id.key)
        _atomic_write(self.block_path(block_id), payload)

    def get_block(self, block_id: BlockId) -> bytes:
        try:
            return self.block_path(block_id).read_bytes()
        except FileNotFoundError:
            raise BlockNotFound(block_id) from None

    def has_block(self, block_id: BlockId) -> bool:
        return self.block_path(block_id).exists()

    def delete_key(self, key: str) -> int:
        """Remove every block (and the manifest) of ``key``; return blocks removed."""
        with self._lock(key):
            d = self.key_dir(key)
            if not d.is_dir():
                return 0
            marker = d / "KEY"
            if marker.exists() and marker.read_text(encoding="utf-8") != key:
                return 0
            count = sum(1 for p in d.iterdir() if p.suffix == ".blk")
            shutil.rmtree(d, ignore_errors=True)
            return count

    # -- manifests ---------------------------------------------------------

    def publish_if_complete(self, key: str, block_count: int, total_bytes: int) -> bool:
        """Write the manifest once blocks 0..block_count-1 are all present.

        Blocks numbered at or beyond ``block_count`` (left over from a
        longer previous value) are removed.
        """
        with self._lock(key):
            d = self.key_dir(key)
            if not all((d / f"{seq}.blk").exists() for seq in range(block_count)):
                return False
            body = json.dumps(
                {"key": key, "block_count": block_count, "total_bytes": total_bytes}
            ).encode("utf-8")
            _atomic_write(d / "manifest.json", body)
            for p in d.iterdir():
                if p.suffix == ".blk" and int(p.stem) >= block_count:
                    p.unlink(missing_ok=True)
            return True

    def manifest(self, key: str) -> Manifest | None:
        try:
            raw = (self.key_dir(key) / "manifest.json").read_bytes()
        except FileNotFoundError:
            return None
        doc = json.loads(raw)
        if doc.get("key") != key:
            return None
        return Manifest(doc["key"], doc["block_count"], doc["total_bytes"])

    def manifests(self) -> Iterator[Manifest]:
        for d in sorted(self.data_dir.iterdir()):
            path = d / "manifest.json"
            if not path.is_file():
                continue
            try:
                doc = json.loads(path.read_bytes())
            except (OSError, ValueError):
                continue
            yield Manifest(doc["key"], doc["block_count"], doc["total_bytes"])

    # -- whole values ------------------------------------------------------

    def put_value(self, key: str, value: bytes) -> Manifest:
        blocks = chunk(value, self.block_size)
        for seq, payload in enumerate(blocks):
            self.put_block(BlockId(key, seq), payload)
        self.publish_if_complete(key, len(blocks), len(value))
        return Manifest(key, len(blocks), len(value))

    def read_value(self, key: str) -> bytes | None:
        """Reassembled value, or None if no manifest is published for ``key``.

        Raises:
            MissingBlock: the manifest lists a block that is not on disk, or
                the reassembled length disagrees with the manifest.
        """
        m = self.manifest(key)
        if m is None:
            return None
        try:
            blocks = [self.get_block(BlockId(key, seq)) for seq in range(m.block_count)]
        except BlockNotFound as exc:
            raise MissingBlock(f"{key!r} block {exc.args[0].seq} missing") from None
        value = reassemble(blocks)
        if len(value) != m.total_bytes:
            raise MissingBlock(f"{key!r}: {len(value)} bytes on disk, manifest says {m.total_bytes}")
        return value

    def stored_bytes(self) -> int:
        return sum(m.total_bytes for m in self.manifests())
