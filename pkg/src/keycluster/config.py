"""Node configuration: one JSON document per node process."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from keycluster.blocks import DEFAULT_BLOCK_SIZE
from keycluster.errors import SchemaError
from keycluster.wire import validate_worker_id

ROLES = ("master", "worker", "balancer")
METHODS = ("byrequests", "bytraffic", "bybusyness")


@dataclass
class NodeConfig:
    role: str
    listen_addr: str = "127.0.0.1:0"
    master_url: str | None = None
    balancer_url: str | None = None
    data_dir: str | None = None
    worker_id: str | None = None
    block_size: int = DEFAULT_BLOCK_SIZE
    replication: int = 1
    method: str = "byrequests"
    heartbeat_ms: int = 1000
    failure_after_ms: int | None = None  # default 3 x heartbeat_ms
    reference_throughput: float = 1000.0
    load_factor: int | None = None  # skip the startup benchmark when set
    timeout_ms: int = 5000
    max_retries: int = 2
    probe_ms: int = 2000
    max_value_bytes: int = 1 << 30
    ready_file: str | None = None  # node writes its URL here once listening

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise SchemaError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.method not in METHODS:
            raise SchemaError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.failure_after_ms is None:
            self.failure_after_ms = 3 * self.heartbeat_ms
        for name in ("block_size", "replication", "heartbeat_ms", "failure_after_ms",
                     "timeout_ms", "probe_ms", "max_value_bytes"):
            if getattr(self, name) < 1:
                raise SchemaError(f"{name} must be positive")
        if self.max_retries < 0:
            raise SchemaError("max_retries must be >= 0")
        if self.reference_throughput <= 0:
            raise SchemaError("reference_throughput must be positive")
        if self.load_factor is not None and not 1 <= self.load_factor <= 100:
            raise SchemaError("load_factor must be within 1..100")
        if ":" not in self.listen_addr:
            raise SchemaError(f"listen_addr must be host:port, got {self.listen_addr!r}")
        if self.role == "worker":
            for name in ("worker_id", "data_dir", "master_url"):
                if not getattr(self, name):
                    raise SchemaError(f"worker config needs {name!r}")
            validate_worker_id(self.worker_id)
        if self.role == "balancer" and not self.master_url:
            raise SchemaError("balancer config needs 'master_url'")

    @classmethod
    def from_dict(cls, doc: Any) -> NodeConfig:
        if not isinstance(doc, dict):
            raise SchemaError("config must be a JSON object")
        if "role" not in doc:
            raise SchemaError("config is missing 'role'")
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for name, value in doc.items():
            if name not in types:
                raise SchemaError(f"unknown config key {name!r}")
            kwargs[name] = _check_type(name, types[name], value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> NodeConfig:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise SchemaError(f"cannot read config {path}: {exc}") from None
        except ValueError as exc:
            raise SchemaError(f"config {path} is not JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


def _check_type(name: str, annotation: str, value: Any) -> Any:
    nullable = "None" in annotation
    if value is None:
        if nullable:
            return None
        raise SchemaError(f"{name} must not be null")
    base = annotation.split("|")[0].strip()
    ok = {
        "str": isinstance(value, str),
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
    }[base]
    if not ok:
        raise SchemaError(f"{name} must be of type {base}, got {value!r}")
    return float(value) if base == "float" else value
