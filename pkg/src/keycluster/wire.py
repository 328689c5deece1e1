"""HTTP path grammar and JSON control messages shared by every node.

Endpoints::

    GET    /file/{key}            balancer, master, worker
    PUT    /file/{key}            balancer -> master (body = value)
    DELETE /file/{key}            master -> worker (drop a key's blocks)
    PUT    /block/{key}/{seq}     master -> worker (body = one block)
    POST   /register              RegistrationMessage, balancer and master
    DELETE /register/{worker_id}  balancer and master
    POST   /heartbeat             HeartbeatMessage, master
    GET    /stats                 every node
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from urllib.parse import quote, unquote, urlsplit

from keycluster.errors import BadKey, BadPath, SchemaError
from keycluster.index import validate_key

FILE_PREFIX = "/file/"
BLOCK_PREFIX = "/block/"

# Extra headers on internal traffic.
H_BLOCK_COUNT = "X-Block-Count"
H_TOTAL_BYTES = "X-Total-Bytes"
H_HOPS = "X-Hops"  # redirects already followed to reach this node
H_ALTERNATES = "X-Alternates"  # space-separated fallback URLs on a master redirect
H_SERVED_BY = "X-Served-By"  # balancer: slot whose counters took the request

_WORKER_ID = re.compile(r"[A-Za-z0-9_-]{1,64}")


def _decode_segment(segment: str) -> str:
    try:
        text = unquote(segment, encoding="utf-8", errors="strict")
    except UnicodeDecodeError as exc:
        raise BadKey(f"segment is not UTF-8: {exc}") from None
    return validate_key(text)


def file_path(key: str) -> str:
    validate_key(key)
    return FILE_PREFIX + quote(key, safe="")


def parse_file_path(path: str) -> str:
    """Return the key named by ``/file/<percent-encoded key>``.

    Raises:
        BadPath: anything other than exactly one non-empty segment after /file/.
        BadKey: the decoded segment is not a legal key (e.g. contains '/').
    """
    path = path.split("?", 1)[0]
    if not path.startswith(FILE_PREFIX):
        raise BadPath(f"not a /file/ path: {path!r}")
    segment = path[len(FILE_PREFIX) :]
    if not segment or "/" in segment:
        raise BadPath(f"expected /file/<key>, got {path!r}")
    return _decode_segment(segment)


def block_path(key: str, seq: int) -> str:
    return f"{BLOCK_PREFIX}{quote(key, safe='')}/{seq}"


def parse_block_path(path: str) -> tuple[str, int]:
    path = path.split("?", 1)[0]
    if not path.startswith(BLOCK_PREFIX):
        raise BadPath(f"not a /block/ path: {path!r}")
    parts = path[len(BLOCK_PREFIX) :].split("/")
    if len(parts) != 2 or not parts[0] or not parts[1].isdigit():
        raise BadPath(f"expected /block/<key>/<seq>, got {path!r}")
    return _decode_segment(parts[0]), int(parts[1])


def validate_worker_id(worker_id: object) -> str:
    if not isinstance(worker_id, str) or not _WORKER_ID.fullmatch(worker_id):
        raise SchemaError(f"worker_id must match [A-Za-z0-9_-]{{1,64}}: {worker_id!r}")
    return worker_id


def _require(doc: dict, name: str, kind: type | tuple[type, ...]):
    if name not in doc:
        raise SchemaError(f"missing required field {name!r}")
    value = doc[name]
    # bool is an int subclass; refuse it for counters
    if isinstance(value, bool) or not isinstance(value, kind):
        raise SchemaError(f"field {name!r} has wrong type: {value!r}")
    return value


def _load(data: bytes | str | dict) -> dict:
    if isinstance(data, dict):
        return data
    try:
        doc = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise SchemaError(f"not JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("expected a JSON object")
    return doc


@dataclass(frozen=True)
class RegistrationMessage:
    worker_id: str
    base_url: str
    load_factor: int = 10

    def __post_init__(self) -> None:
        validate_worker_id(self.worker_id)
        parts = urlsplit(self.base_url)
        if parts.scheme != "http" or not parts.netloc:
            raise SchemaError(f"base_url must be an absolute http URL: {self.base_url!r}")
        if isinstance(self.load_factor, bool) or not isinstance(self.load_factor, int):
            raise SchemaError("load_factor must be an integer")
        if not 1 <= self.load_factor <= 100:
            raise SchemaError(f"load_factor {self.load_factor} outside 1..100")

    def encode(self) -> bytes:
        return json.dumps(asdict(self)).encode("utf-8")

    @classmethod
    def decode(cls, data: bytes | str | dict) -> RegistrationMessage:
        doc = _load(data)
        return cls(
            worker_id=_require(doc, "worker_id", str),
            base_url=_require(doc, "base_url", str),
            load_factor=_require(doc, "load_factor", int),
        )


@dataclass(frozen=True)
class HeartbeatMessage:
    worker_id: str
    stored_bytes: int = 0
    pending_requests: int = 0
    served_requests: int = 0
    transferred_bytes: int = 0

    def __post_init__(self) -> None:
        validate_worker_id(self.worker_id)
        for name in ("stored_bytes", "pending_requests", "served_requests", "transferred_bytes"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise SchemaError(f"{name} must be a non-negative integer")

    def encode(self) -> bytes:
        return json.dumps(asdict(self)).encode("utf-8")

    @classmethod
    def decode(cls, data: bytes | str | dict) -> HeartbeatMessage:
        doc = _load(data)
        return cls(
            worker_id=_require(doc, "worker_id", str),
            stored_bytes=_require(doc, "stored_bytes", int),
            pending_requests=_require(doc, "pending_requests", int),
            served_requests=_require(doc, "served_requests", int),
            transferred_bytes=_require(doc, "transferred_bytes", int),
        )
