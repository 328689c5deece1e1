"""Latency experiments: read latency vs. data size, and vs. worker count.

Each experiment point spawns a fresh cluster, preloads ``data_mb`` of
1 MiB values, runs a concurrent read workload and records one CSV row.
"""

from __future__ import annotations

import csv
import io
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

from keycluster.harness import MIB, preload, run_workload, spawn_cluster

log = logging.getLogger(__name__)

CSV_HEADER = ("data_mb", "workers", "clients", "requests", "avg_ms", "p95_ms", "throughput_rps")

# Reference curves from the original experiments (seconds, different
# hardware: Core i7 2.93 GHz, 8 GB RAM, 1 Gbps switch). Documentation only.
REFERENCE_SIZE_CURVE_S = {100: 4.2, 1000: 6.8, 10000: 17.3, 100000: 24.7}
REFERENCE_SCALE_CURVE_S = {1: 22.7, 2: 17.8, 3: 14.7, 4: 8.3, 5: 7.6, 6: 4.8}


@dataclass(frozen=True)
class BenchRow:
    data_mb: int
    workers: int
    clients: int
    requests: int
    avg_ms: float
    p95_ms: float
    throughput_rps: float

    def __post_init__(self) -> None:
        if self.requests > 0 and self.throughput_rps <= 0:
            raise ValueError("throughput must be positive when requests were made")
        if self.avg_ms > self.p95_ms:
            # possible with a heavy tail above p95; keep the row, flag it
            log.warning("avg %.3f ms above p95 %.3f ms at %s", self.avg_ms, self.p95_ms, self)

    def csv_fields(self) -> list[str]:
        return [
            str(self.data_mb), str(self.workers), str(self.clients), str(self.requests),
            f"{self.avg_ms:.3f}", f"{self.p95_ms:.3f}", f"{self.throughput_rps:.3f}",
        ]


def write_report(rows: Iterable[BenchRow], out: str | Path | IO[str]) -> None:
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="") as f:
            write_report(rows, f)
        return
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.csv_fields())


def report_text(rows: Iterable[BenchRow]) -> str:
    buf = io.StringIO()
    write_report(rows, buf)
    return buf.getvalue()


def read_report(path: str | Path) -> list[BenchRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            BenchRow(int(r["data_mb"]), int(r["workers"]), int(r["clients"]), int(r["requests"]),
                     float(r["avg_ms"]), float(r["p95_ms"]), float(r["throughput_rps"]))
            for r in reader
        ]


def bench_point(
    data_mb: int,
    workers: int,
    clients: int = 16,
    requests: int = 1000,
    value_size: int = MIB,
    seed: int = 0,
    **cluster_kw,
) -> BenchRow:
    cluster_kw.setdefault("startup_timeout", 30.0)
    with spawn_cluster(workers, **cluster_kw) as cluster:
        keys = preload(cluster, data_mb * MIB, value_size, seed=seed)
        stats = run_workload(cluster, clients, requests, 1.0, value_size, keys, seed=seed)
    if stats.errors:
        log.warning("%d/%d requests failed at data_mb=%d workers=%d: %s",
                    stats.errors, requests, data_mb, workers, stats.error_samples[:3])
    row = BenchRow(data_mb, workers, clients, requests, stats.avg_ms, stats.p95_ms, stats.throughput_rps)
    log.info("point %s", row)
    return row


def bench_size(
    sizes: Iterable[int],
    workers: int = 1,
    clients: int = 16,
    requests: int = 1000,
    out: str | Path | IO[str] | None = None,
    **kw,
) -> list[BenchRow]:
    """One row per dataset size, each on a fresh ``workers``-node cluster."""
    rows = [bench_point(mb, workers, clients, requests, **kw) for mb in sizes]
    if out is not None:
        write_report(rows, out)
    return rows


def bench_scale(
    size_mb: int,
    worker_counts: Iterable[int],
    clients: int = 16,
    requests: int = 1000,
    out: str | Path | IO[str] | None = None,
    **kw,
) -> list[BenchRow]:
    """One row per worker count at a fixed dataset size."""
    rows = [bench_point(size_mb, n, clients, requests, **kw) for n in worker_counts]
    if out is not None:
        write_report(rows, out)
    return rows


def print_rows(rows: Iterable[BenchRow], stream: IO[str] = sys.stdout) -> None:
    write_report(rows, stream)
