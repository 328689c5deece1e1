"""Spawn a local cluster (master + balancer + N workers) as OS processes.

Each node is a separate ``python -m keycluster start <role>`` process on a
loopback port chosen by the OS, so ``kill_worker`` is a real SIGKILL with
no chance to deregister.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import random
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from keycluster.blocks import DEFAULT_BLOCK_SIZE
from keycluster.config import NodeConfig
from keycluster.errors import PortUnavailable, StartupTimeout
from keycluster.httpio import NET_ERRORS, HttpClient
from keycluster.wire import H_SERVED_BY, file_path

log = logging.getLogger(__name__)

MIB = 1024 * 1024


@dataclass
class NodeProc:
    name: str
    config: NodeConfig
    config_path: Path
    log_path: Path
    proc: subprocess.Popen | None = None
    url: str | None = None

    @property
    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None


def _launch(node: NodeProc) -> None:
    ready = Path(node.config.ready_file)
    ready.unlink(missing_ok=True)
    node.config_path.write_text(json.dumps(node.config.to_dict(), indent=2))
    logf = open(node.log_path, "ab")
    try:
        node.proc = subprocess.Popen(
            [sys.executable, "-m", "keycluster", "start", node.config.role,
             "--config", str(node.config_path)],
            stdout=logf,
            stderr=subprocess.STDOUT,
            env={**os.environ, "PYTHONUNBUFFERED": "1"},
        )
    finally:
        logf.close()


def _await_ready(nodes: list[NodeProc], deadline: float) -> None:
    for node in nodes:
        ready = Path(node.config.ready_file)
        while True:
            if ready.exists() and ready.stat().st_size:
                node.url = ready.read_text().strip()
                break
            if node.proc.poll() is not None:
                tail = node.log_path.read_text(errors="replace")[-2000:]
                if "Address already in use" in tail:
                    raise PortUnavailable(f"{node.name}: {node.config.listen_addr} in use")
                raise StartupTimeout(f"{node.name} exited with {node.proc.returncode}:\n{tail}")
            if time.monotonic() > deadline:
                raise StartupTimeout(f"{node.name} not listening in time")
            time.sleep(0.02)


@dataclass
class ClusterHandle:
    workdir: Path
    master: NodeProc
    balancer: NodeProc
    workers: dict[str, NodeProc]
    replication: int
    block_size: int
    method: str
    own_workdir: bool = False
    client: HttpClient = field(default_factory=lambda: HttpClient(timeout=30.0))

    @property
    def balancer_url(self) -> str:
        return self.balancer.url

    @property
    def master_url(self) -> str:
        return self.master.url

    def worker_url(self, worker_id: str) -> str:
        return self.workers[worker_id].url

    def balancer_stats(self) -> dict:
        return self.client.get(self.balancer_url + "/stats").json()

    def master_stats(self) -> dict:
        return self.client.get(self.master_url + "/stats").json()

    def up_slots(self) -> list[str]:
        return [r["worker_id"] for r in self.balancer_stats()["routes"] if r["state"] == "Up"]

    def wait_until(self, predicate, timeout: float, what: str) -> None:
        deadline = time.monotonic() + timeout
        while True:
            try:
                if predicate():
                    return
            except NET_ERRORS:
                pass
            if time.monotonic() > deadline:
                raise StartupTimeout(f"timed out waiting for {what}")
            time.sleep(0.05)

    def wait_registered(self, worker_ids, timeout: float = 5.0) -> None:
        want = set(worker_ids)

        def ok() -> bool:
            master_up = {w["worker_id"] for w in self.master_stats()["workers"] if w["state"] == "Up"}
            return want <= set(self.up_slots()) and want <= master_up

        self.wait_until(ok, timeout, f"workers {sorted(want)} registered")

    def kill_worker(self, worker_id: str) -> None:
        """SIGKILL: no deregistration, the master finds out via heartbeats."""
        node = self.workers[worker_id]
        if node.alive:
            node.proc.kill()
            node.proc.wait()

    def recover_worker(self, worker_id: str, timeout: float = 10.0) -> None:
        """Restart a killed worker on its old port with the same data_dir."""
        node = self.workers[worker_id]
        if node.alive:
            return
        if node.url:
            node.config.listen_addr = node.url.removeprefix("http://")
        _launch(node)
        try:
            _await_ready([node], time.monotonic() + timeout)
        except PortUnavailable:
            node.config.listen_addr = "127.0.0.1:0"
            _launch(node)
            _await_ready([node], time.monotonic() + timeout)
        self.wait_registered([worker_id], timeout)

    def stop_worker(self, worker_id: str, timeout: float = 10.0) -> int:
        """SIGTERM (graceful: deregisters first); returns the exit code."""
        node = self.workers[worker_id]
        if not node.alive:
            return node.proc.returncode if node.proc else 0
        node.proc.send_signal(signal.SIGTERM)
        return node.proc.wait(timeout)

    def stop(self) -> None:
        nodes = [*self.workers.values(), self.balancer, self.master]
        for node in nodes:
            if node.alive:
                node.proc.send_signal(signal.SIGTERM)
        for node in nodes:
            if node.proc is None:
                continue
            try:
                node.proc.wait(5)
            except subprocess.TimeoutExpired:
                node.proc.kill()
                node.proc.wait()
        self.client.close()
        if self.own_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def __enter__(self) -> ClusterHandle:
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def spawn_cluster(
    workers: int,
    replication: int = 1,
    block_size: int = DEFAULT_BLOCK_SIZE,
    method: str = "byrequests",
    workdir: str | Path | None = None,
    heartbeat_ms: int = 1000,
    failure_after_ms: int | None = None,
    probe_ms: int = 2000,
    timeout_ms: int = 5000,
    max_retries: int = 2,
    load_factor: int | None = None,
    startup_timeout: float = 5.0,
) -> ClusterHandle:
    """Start master, balancer and ``workers`` workers; return once all are Up.

    Raises:
        ValueError: ``workers`` < 1.
        PortUnavailable, StartupTimeout: a node failed to come up.
    """
    if workers < 1:
        raise ValueError("a cluster needs at least one worker")
    own = workdir is None
    root = Path(tempfile.mkdtemp(prefix="keycluster-")) if own else Path(workdir)
    root.mkdir(parents=True, exist_ok=True)

    common = dict(
        block_size=block_size, replication=replication, method=method,
        heartbeat_ms=heartbeat_ms, failure_after_ms=failure_after_ms,
        probe_ms=probe_ms, timeout_ms=timeout_ms, max_retries=max_retries,
    )

    def node(name: str, **kw) -> NodeProc:
        cfg = NodeConfig(ready_file=str(root / f"{name}.url"), **common, **kw)
        return NodeProc(name, cfg, root / f"{name}.json", root / f"{name}.log")

    deadline = time.monotonic() + startup_timeout
    started: list[NodeProc] = []

    def launch(n: NodeProc) -> NodeProc:
        _launch(n)
        started.append(n)
        return n

    try:
        master = launch(node("master", role="master"))
        _await_ready([master], deadline)
        balancer = launch(node("balancer", role="balancer", master_url=master.url))
        _await_ready([balancer], deadline)
        procs = {}
        for i in range(1, workers + 1):
            wid = f"w{i}"
            procs[wid] = launch(node(
                wid, role="worker", worker_id=wid, data_dir=str(root / wid),
                master_url=master.url, balancer_url=balancer.url,
                load_factor=load_factor,
            ))
        _await_ready(list(procs.values()), deadline)
    except BaseException:
        for n in started:
            if n.alive:
                n.proc.kill()
                n.proc.wait()
        if own:
            shutil.rmtree(root, ignore_errors=True)
        raise
    handle = ClusterHandle(root, master, balancer, procs, replication, block_size, method, own)
    try:
        handle.wait_registered(procs, max(0.5, deadline - time.monotonic()))
    except BaseException:
        handle.stop()
        raise
    return handle


# -- workloads ---------------------------------------------------------------


@dataclass
class WorkloadStats:
    n_requests: int = 0
    avg_ms: float = 0.0
    p95_ms: float = 0.0
    per_worker_served: dict[str, int] = field(default_factory=dict)
    errors: int = 0
    wall_s: float = 0.0
    error_samples: list[str] = field(default_factory=list)

    @property
    def throughput_rps(self) -> float:
        return self.n_requests / self.wall_s if self.wall_s > 0 else 0.0


def percentile(sorted_values: list[float], q: float) -> float:
    """Nearest-rank percentile of an ascending list."""
    if not sorted_values:
        return 0.0
    rank = max(1, math.ceil(q / 100 * len(sorted_values)))
    return sorted_values[rank - 1]


def summarize(latencies_ms: list[float], served: Counter, errors: int, wall_s: float) -> WorkloadStats:
    lat = sorted(latencies_ms)
    return WorkloadStats(
        n_requests=len(lat),
        avg_ms=sum(lat) / len(lat) if lat else 0.0,
        p95_ms=percentile(lat, 95),
        per_worker_served=dict(served),
        errors=errors,
        wall_s=wall_s,
    )


def preload(
    handle: ClusterHandle,
    total_bytes: int,
    value_size: int = MIB,
    prefix: str = "obj",
    concurrency: int = 4,
    seed: int = 0,
) -> list[str]:
    """PUT ``ceil(total_bytes / value_size)`` random values through the balancer."""
    n = max(1, math.ceil(total_bytes / value_size))
    rng = random.Random(seed)
    # random names: sequential ones differ only in their last bytes, which
    # barely reach the high bits of an FNV score and skew placement
    names: dict[str, None] = {}
    while len(names) < n:
        names[f"{prefix}-{rng.getrandbits(64):016x}"] = None
    keys = list(names)
    payload = rng.randbytes(value_size)
    counter = itertools.count()
    failures: list[str] = []

    def loader() -> None:
        client = HttpClient(timeout=60.0)
        while True:
            i = next(counter)
            if i >= n:
                break
            # vary the head so values differ but payload generation stays cheap
            body = i.to_bytes(8, "big") + payload[8:]
            resp = client.request("PUT", handle.balancer_url + file_path(keys[i]), body=body)
            if resp.status != 201:
                failures.append(f"{keys[i]}: HTTP {resp.status}")
        client.close()

    threads = [threading.Thread(target=loader) for _ in range(concurrency)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        raise RuntimeError(f"preload failed for {len(failures)} keys, e.g. {failures[:3]}")
    return keys


def run_workload(
    handle: ClusterHandle,
    n_clients: int,
    n_requests: int,
    read_ratio: float = 1.0,
    value_size: int = MIB,
    keys: list[str] | None = None,
    seed: int = 0,
    timeout: float = 60.0,
) -> WorkloadStats:
    """Issue exactly ``n_requests`` requests from ``n_clients`` concurrent clients.

    Reads GET a uniformly random key from ``keys``; writes PUT a fresh key.
    A read counts as served on the worker named by the balancer's
    X-Served-By header if it returns 200; anything else is an error.
    """
    if n_requests == 0:
        return WorkloadStats()
    if read_ratio > 0 and not keys:
        raise ValueError("reads need a list of preloaded keys")
    counter = itertools.count()
    lock = threading.Lock()
    latencies: list[float] = []
    served: Counter = Counter()
    errors = 0
    samples: list[str] = []
    write_body = random.Random(seed).randbytes(value_size)

    def client_loop(cid: int) -> None:
        nonlocal errors
        rng = random.Random(seed * 100003 + cid)
        client = HttpClient(timeout=timeout)
        while True:
            i = next(counter)
            if i >= n_requests:
                break
            is_read = rng.random() < read_ratio
            if is_read:
                method, path, body, ok = "GET", file_path(rng.choice(keys)), None, 200
            else:
                method, path, body, ok = "PUT", file_path(f"wl-{seed}-{i}"), write_body, 201
            t0 = time.perf_counter()
            try:
                resp = client.request(method, handle.balancer_url + path, body=body)
                status, who = resp.status, resp.headers.get(H_SERVED_BY.lower())
            except NET_ERRORS as exc:
                status, who = None, None
                detail = repr(exc)
            elapsed = (time.perf_counter() - t0) * 1000
            with lock:
                latencies.append(elapsed)
                if status == ok and who:
                    served[who] += 1
                else:
                    errors += 1
                    if len(samples) < 10:
                        samples.append(f"{method} {path}: {status or detail}")
        client.close()

    threads = [threading.Thread(target=client_loop, args=(c,)) for c in range(n_clients)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stats = summarize(latencies, served, errors, time.perf_counter() - t0)
    stats.error_samples = samples
    return stats
