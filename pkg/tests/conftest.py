from __future__ import annotations

import time
from dataclasses import dataclass, field

import pytest

from keycluster.balancer import Balancer
from keycluster.balancer import make_server as make_balancer_server
from keycluster.config import NodeConfig
from keycluster.httpio import HttpClient, NodeServer, serve_in_thread
from keycluster.master import Master
from keycluster.master import make_server as make_master_server
from keycluster.wire import file_path
from keycluster.worker import Worker
from keycluster.worker import make_server as make_worker_server

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


@dataclass
class InProcCluster:
    """Master, balancer and workers as threads in this process (real HTTP)."""

    tmp_path: object
    block_size: int = 64 * 1024
    replication: int = 1
    method: str = "byrequests"
    master: Master | None = None
    balancer: Balancer | None = None
    workers: dict[str, Worker] = field(default_factory=dict)
    servers: dict[str, NodeServer] = field(default_factory=dict)
    client: HttpClient = field(default_factory=lambda: HttpClient(timeout=10.0))

    def cfg(self, role: str, **kw) -> NodeConfig:
        base = dict(block_size=self.block_size, replication=self.replication, method=self.method,
                    heartbeat_ms=100, probe_ms=100, timeout_ms=2000)
        base.update(kw)
        return NodeConfig(role=role, **base)

    def start(self, n_workers: int, load_factors: dict[str, int] | None = None) -> InProcCluster:
        self.master = Master(self.cfg("master"))
        self.servers["master"] = make_master_server(self.master, "127.0.0.1", 0)
        serve_in_thread(self.servers["master"])
        self.balancer = Balancer(self.cfg("balancer", master_url=self.master_url))
        self.servers["balancer"] = make_balancer_server(self.balancer, "127.0.0.1", 0)
        serve_in_thread(self.servers["balancer"])
        for i in range(1, n_workers + 1):
            self.add_worker(f"w{i}", (load_factors or {}).get(f"w{i}", 10))
        return self

    def add_worker(self, wid: str, load_factor: int = 10, port: int = 0) -> Worker:
        w = Worker(self.cfg("worker", worker_id=wid, data_dir=str(self.tmp_path / wid),
                            master_url=self.master_url, balancer_url=self.balancer_url,
                            load_factor=load_factor))
        server = make_worker_server(w, "127.0.0.1", port)
        serve_in_thread(server)
        w.startup(server.url)
        self.workers[wid] = w
        self.servers[wid] = server
        return w

    def stop_worker_server(self, wid: str) -> None:
        """Close a worker's socket without deregistering (a crash, as seen from outside)."""
        w = self.workers[wid]
        w._stop.set()
        server = self.servers.pop(wid)
        server.shutdown()
        server.server_close()

    @property
    def master_url(self) -> str:
        return self.servers["master"].url

    @property
    def balancer_url(self) -> str:
        return self.servers["balancer"].url

    def url(self, wid: str) -> str:
        return self.servers[wid].url

    def put(self, key: str, value: bytes):
        return self.client.request("PUT", self.balancer_url + file_path(key), body=value)

    def get(self, key: str):
        return self.client.get(self.balancer_url + file_path(key))

    def close(self) -> None:
        for w in self.workers.values():
            w._stop.set()
        for server in self.servers.values():
            server.shutdown()
            server.server_close()
        if self.balancer:
            self.balancer.stop()
        self.client.close()


@pytest.fixture
def inproc(tmp_path):
    clusters = []

    def factory(n_workers: int = 1, load_factors: dict[str, int] | None = None, **kw) -> InProcCluster:
        c = InProcCluster(tmp_path, **kw).start(n_workers, load_factors)
        clusters.append(c)
        return c

    yield factory
    for c in clusters:
        c.close()


def wait_for(predicate, timeout: float = 5.0, interval: float = 0.02) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()
