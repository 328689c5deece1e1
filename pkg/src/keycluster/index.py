"""Two-level hash index mapping keys to worker placements.

Level 1 is a directory of ``2**b`` buckets addressed by the top ``b`` bits
of the key's FNV-1a hash. A bucket starts as a sorted leaf; when an insert
would push it past ``capacity`` entries it is expanded into ``2**s`` leaf
sub-buckets addressed by the next ``s`` hash bits. There is no third level.

Readers never lock. Writers are serialized and publish a freshly built
leaf (or expanded bucket) with a single reference assignment, so a reader
sees either the whole pre-operation or the whole post-operation bucket.
"""

from __future__ import annotations

import bisect
import threading
import unicodedata
from dataclasses import dataclass
from typing import Iterator, NamedTuple

from keycluster.errors import BadKey, IndexFull
from keycluster.hashing import key_hash

MAX_KEY_BYTES = 1024


def validate_key(text: str) -> str:
    """Return ``text`` unchanged if it is a legal key, else raise BadKey."""
    if not isinstance(text, str) or not text:
        raise BadKey("key must be a non-empty string")
    if len(text.encode("utf-8", errors="surrogatepass")) > MAX_KEY_BYTES:
        raise BadKey(f"key longer than {MAX_KEY_BYTES} bytes")
    for ch in text:
        if ch == "/":
            raise BadKey("key must not contain '/'")
        if unicodedata.category(ch) in ("Cc", "Cs"):
            raise BadKey(f"key contains control character {ch!r}")
    return text


def block_count_for(total_bytes: int, block_size: int) -> int:
    if total_bytes == 0:
        return 1
    return -(-total_bytes // block_size)


@dataclass(frozen=True)
class Placement:
    """Which workers hold a key, and how it is laid out in blocks."""

    primary_worker: str
    replicas: tuple[str, ...] = ()
    block_count: int = 1
    total_bytes: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "replicas", tuple(self.replicas))
        holders = (self.primary_worker, *self.replicas)
        if len(set(holders)) != len(holders):
            raise ValueError(f"placement holders not distinct: {holders}")
        if self.total_bytes < 0 or self.block_count < 0:
            raise ValueError("negative size in placement")
        if self.total_bytes == 0 and self.block_count != 1:
            raise ValueError("an empty value occupies exactly one block")

    @classmethod
    def for_value(
        cls, holders: list[str] | tuple[str, ...], total_bytes: int, block_size: int
    ) -> Placement:
        return cls(
            primary_worker=holders[0],
            replicas=tuple(holders[1:]),
            block_count=block_count_for(total_bytes, block_size),
            total_bytes=total_bytes,
        )

    @property
    def holders(self) -> tuple[str, ...]:
        return (self.primary_worker, *self.replicas)

    def to_json(self) -> dict:
        return {
            "primary_worker": self.primary_worker,
            "replicas": list(self.replicas),
            "block_count": self.block_count,
            "total_bytes": self.total_bytes,
        }


class IndexStats(NamedTuple):
    entries: int
    level1_buckets: int
    expanded_buckets: int
    max_depth: int


# A leaf is an immutable pair of parallel tuples (sorted keys, placements);
# an expanded bucket is a tuple of leaves.
class _Leaf(NamedTuple):
    keys: tuple[str, ...]
    values: tuple[Placement, ...]

    def find(self, key: str) -> int:
        i = bisect.bisect_left(self.keys, key)
        if i < len(self.keys) and self.keys[i] == key:
            return i
        return -1

    def with_set(self, key: str, placement: Placement) -> _Leaf:
        i = bisect.bisect_left(self.keys, key)
        if i < len(self.keys) and self.keys[i] == key:
            return _Leaf(self.keys, self.values[:i] + (placement,) + self.values[i + 1 :])
        return _Leaf(
            self.keys[:i] + (key,) + self.keys[i:],
            self.values[:i] + (placement,) + self.values[i:],
        )

    def without(self, i: int) -> _Leaf:
        return _Leaf(self.keys[:i] + self.keys[i + 1 :], self.values[:i] + self.values[i + 1 :])


_EMPTY_LEAF = _Leaf((), ())


class _Expanded(NamedTuple):
    subs: tuple[_Leaf, ...]


class MultiLevelIndex:
    def __init__(self, level1_bits: int = 4, sub_bits: int = 4, capacity: int = 256):
        if level1_bits < 0 or sub_bits < 1 or level1_bits + sub_bits > 64:
            raise ValueError("need 0 <= level1_bits, 1 <= sub_bits, sum <= 64")
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.level1_bits = level1_bits
        self.sub_bits = sub_bits
        self.capacity = capacity
        self._level1: list[_Leaf | _Expanded] = [_EMPTY_LEAF] * (1 << level1_bits)
        self._count = 0
        self._write_lock = threading.Lock()

    # -- addressing --------------------------------------------------------

    def bucket_of(self, key: str) -> int:
        if self.level1_bits == 0:
            return 0
        return key_hash(key) >> (64 - self.level1_bits)

    def sub_bucket_of(self, key: str) -> int:
        shift = 64 - self.level1_bits - self.sub_bits
        return (key_hash(key) >> shift) & ((1 << self.sub_bits) - 1)

    def _split(self, leaf: _Leaf) -> _Expanded:
        keys: list[list[str]] = [[] for _ in range(1 << self.sub_bits)]
        vals: list[list[Placement]] = [[] for _ in range(1 << self.sub_bits)]
        for k, v in zip(leaf.keys, leaf.values):  # already sorted, stays sorted
            j = self.sub_bucket_of(k)
            keys[j].append(k)
            vals[j].append(v)
        return _Expanded(tuple(_Leaf(tuple(k), tuple(v)) for k, v in zip(keys, vals)))

    # -- operations --------------------------------------------------------

    def lookup(self, key: str) -> Placement | None:
        bucket = self._level1[self.bucket_of(key)]
        leaf = bucket.subs[self.sub_bucket_of(key)] if isinstance(bucket, _Expanded) else bucket
        i = leaf.find(key)
        return leaf.values[i] if i >= 0 else None

    def insert(self, key: str, placement: Placement) -> Placement | None:
        """Map ``key`` to ``placement``; return the placement it replaced.

        Raises:
            IndexFull: the key's level-2 sub-bucket already holds
                ``capacity`` other keys. The index is left unchanged.
        """
        validate_key(key)
        with self._write_lock:
            b = self.bucket_of(key)
            bucket = self._level1[b]
            if isinstance(bucket, _Leaf):
                i = bucket.find(key)
                if i >= 0:
                    self._level1[b] = bucket.with_set(key, placement)
                    return bucket.values[i]
                if len(bucket.keys) < self.capacity:
                    self._level1[b] = bucket.with_set(key, placement)
                    self._count += 1
                    return None
                bucket = self._split(bucket)

            j = self.sub_bucket_of(key)
            leaf = bucket.subs[j]
            i = leaf.find(key)
            if i < 0 and len(leaf.keys) >= self.capacity:
                raise IndexFull(
                    f"sub-bucket {b}/{j} holds {self.capacity} keys; no third level"
                )
            subs = bucket.subs[:j] + (leaf.with_set(key, placement),) + bucket.subs[j + 1 :]
            self._level1[b] = _Expanded(subs)
            if i >= 0:
                return leaf.values[i]
            self._count += 1
            return None

    def remove(self, key: str) -> Placement | None:
        # Expanded buckets never collapse back into a leaf.
        with self._write_lock:
            b = self.bucket_of(key)
            bucket = self._level1[b]
            if isinstance(bucket, _Leaf):
                i = bucket.find(key)
                if i < 0:
                    return None
                self._level1[b] = bucket.without(i)
                self._count -= 1
                return bucket.values[i]
            j = self.sub_bucket_of(key)
            leaf = bucket.subs[j]
            i = leaf.find(key)
            if i < 0:
                return None
            subs = bucket.subs[:j] + (leaf.without(i),) + bucket.subs[j + 1 :]
            self._level1[b] = _Expanded(subs)
            self._count -= 1
            return leaf.values[i]

    def stats(self) -> IndexStats:
        level1 = list(self._level1)
        expanded = sum(1 for bucket in level1 if isinstance(bucket, _Expanded))
        entries = 0
        for bucket in level1:
            if isinstance(bucket, _Expanded):
                entries += sum(len(leaf.keys) for leaf in bucket.subs)
            else:
                entries += len(bucket.keys)
        return IndexStats(entries, len(level1), expanded, 2 if expanded else 1)

    def depth_of(self, key: str) -> int:
        return 2 if isinstance(self._level1[self.bucket_of(key)], _Expanded) else 1

    def leaf_sizes(self) -> list[int]:
        sizes = []
        for bucket in list(self._level1):
            if isinstance(bucket, _Expanded):
                sizes.extend(len(leaf.keys) for leaf in bucket.subs)
            else:
                sizes.append(len(bucket.keys))
        return sizes

    def items(self) -> Iterator[tuple[str, Placement]]:
        for bucket in list(self._level1):
            leaves = bucket.subs if isinstance(bucket, _Expanded) else (bucket,)
            for leaf in leaves:
                yield from zip(leaf.keys, leaf.values)

    def __len__(self) -> int:
        return self._count

    def __contains__(self, key: str) -> bool:
        return self.lookup(key) is not None
