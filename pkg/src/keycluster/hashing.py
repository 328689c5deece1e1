"""64-bit FNV-1a, used for index bucketing, placement scores and block dirs."""

FNV64_OFFSET = 14695981039346656037
FNV64_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def key_hash(key: str) -> int:
    return fnv1a_64(key.encode("utf-8"))


def key_hex(key: str) -> str:
    """Directory name for a key's blocks: zero-padded lowercase hex."""
    return format(key_hash(key), "016x")
