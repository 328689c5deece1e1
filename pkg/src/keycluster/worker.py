"""Worker: stores blocks, serves whole values, registers and heartbeats.

A worker keeps an in-memory key index of the values it holds completely
(rebuilt from the manifests on disk at startup). Reads for keys outside
that index are redirected to the master, so any worker can be used as an
entry point.
"""

from __future__ import annotations

import logging
import threading
import time

from keycluster.blocks import BlockId, BlockStore, Manifest
from keycluster.config import NodeConfig
from keycluster.errors import BadKey, BadPath, MissingBlock, PayloadTooLarge
from keycluster.httpio import (
    NET_ERRORS,
    Handler,
    HttpClient,
    NodeServer,
    parse_listen_addr,
    serve_in_thread,
)
from keycluster.wire import (
    H_BLOCK_COUNT,
    H_HOPS,
    H_TOTAL_BYTES,
    HeartbeatMessage,
    RegistrationMessage,
    file_path,
    parse_block_path,
    parse_file_path,
)

log = logging.getLogger(__name__)

BENCH_READS = 100
BENCH_BLOCK = 64 * 1024
REGISTER_ATTEMPTS = 10


def load_factor_from_throughput(measured: float, reference: float) -> int:
    return max(1, min(100, round(measured / reference * 10)))


class RegistrationFailed(RuntimeError):
    pass


class Worker:
    def __init__(self, config: NodeConfig, client: HttpClient | None = None):
        self.config = config
        self.worker_id: str = config.worker_id
        self.client = client or HttpClient(timeout=config.timeout_ms / 1000)
        self.store = BlockStore(config.data_dir, config.block_size)
        self.keys: dict[str, Manifest] = {m.key: m for m in self.store.manifests()}
        self.base_url: str | None = None
        self.load_factor: int | None = config.load_factor
        self._counter_lock = threading.Lock()
        self.pending = 0
        self.served = 0
        self.transferred_bytes = 0
        self._stop = threading.Event()
        self._heartbeat_thread: threading.Thread | None = None

    # -- data path ---------------------------------------------------------

    def read(self, key: str) -> bytes | None:
        """Full value if this worker holds ``key``, None if it does not."""
        m = self.keys.get(key)
        if m is None:
            return None
        blocks = []
        for seq in range(m.block_count):
            try:
                blocks.append(self.store.get_block(BlockId(key, seq)))
            except KeyError:
                raise MissingBlock(f"{key!r} block {seq} missing") from None
        value = b"".join(blocks)
        if len(value) != m.total_bytes:
            raise MissingBlock(f"{key!r}: read {len(value)} bytes, expected {m.total_bytes}")
        return value

    def put_block(self, key: str, seq: int, payload: bytes, count: int | None, total: int | None) -> None:
        self.store.put_block(BlockId(key, seq), payload)
        if count is not None and total is not None and seq < count:
            if self.store.publish_if_complete(key, count, total):
                self.keys[key] = Manifest(key, count, total)

    def delete(self, key: str) -> int:
        self.keys.pop(key, None)
        return self.store.delete_key(key)

    def stored_bytes(self) -> int:
        return sum(m.total_bytes for m in list(self.keys.values()))

    def stats(self) -> dict:
        with self._counter_lock:
            counters = {
                "pending": self.pending,
                "served": self.served,
                "transferred_bytes": self.transferred_bytes,
            }
        return {
            "role": "worker",
            "worker_id": self.worker_id,
            "base_url": self.base_url,
            "load_factor": self.load_factor,
            "stored_bytes": self.stored_bytes(),
            **counters,
            "keys": [m._asdict() for m in list(self.keys.values())],
        }

    # -- lifecycle ---------------------------------------------------------

    def self_benchmark(self, reads: int = BENCH_READS) -> float:
        """Time ``reads`` synthetic 64 KiB block reads from the local store (req/s)."""
        bid = BlockId(f"__selfbench__{self.worker_id}", 0)
        self.store.put_block(bid, bytes(range(256)) * (min(BENCH_BLOCK, self.store.block_size) // 256))
        try:
            t0 = time.perf_counter()
            for _ in range(reads):
                self.store.get_block(bid)
            elapsed = time.perf_counter() - t0
        finally:
            self.store.delete_key(bid.key)
        return reads / max(elapsed, 1e-9)

    def registration(self) -> RegistrationMessage:
        return RegistrationMessage(self.worker_id, self.base_url, self.load_factor)

    def _post_with_retry(self, url: str, body: bytes) -> None:
        delay = 0.05
        for attempt in range(1, REGISTER_ATTEMPTS + 1):
            try:
                resp = self.client.request("POST", url, body=body)
                if resp.status == 200:
                    return
                log.warning("POST %s: HTTP %d (attempt %d)", url, resp.status, attempt)
            except NET_ERRORS as exc:
                log.warning("POST %s failed: %s (attempt %d)", url, exc, attempt)
            if self._stop.wait(delay):
                break
            delay = min(delay * 2, 2.0)
        raise RegistrationFailed(f"could not register at {url}")

    def register(self, master: bool = True, balancer: bool = True) -> None:
        body = self.registration().encode()
        if master:
            self._post_with_retry(self.config.master_url.rstrip("/") + "/register", body)
        if balancer and self.config.balancer_url:
            self._post_with_retry(self.config.balancer_url.rstrip("/") + "/register", body)

    def heartbeat_once(self) -> None:
        with self._counter_lock:
            msg = HeartbeatMessage(
                self.worker_id,
                stored_bytes=self.stored_bytes(),
                pending_requests=self.pending,
                served_requests=self.served,
                transferred_bytes=self.transferred_bytes,
            )
        try:
            resp = self.client.request(
                "POST", self.config.master_url.rstrip("/") + "/heartbeat", body=msg.encode()
            )
        except NET_ERRORS as exc:
            log.info("heartbeat failed: %s", exc)
            return
        if resp.status == 404:
            # master restarted and lost its registry
            try:
                self.register(master=True, balancer=False)
            except RegistrationFailed:
                log.warning("re-registration with master failed")

    def _heartbeat_loop(self) -> None:
        period = self.config.heartbeat_ms / 1000
        while not self._stop.wait(period):
            self.heartbeat_once()

    def startup(self, base_url: str) -> None:
        """Benchmark, register with master and balancer, start heartbeating.

        Raises:
            RegistrationFailed: master or balancer unreachable after retries.
        """
        self.base_url = base_url
        if self.load_factor is None:
            measured = self.self_benchmark()
            self.load_factor = load_factor_from_throughput(measured, self.config.reference_throughput)
            log.info("self-benchmark %.0f req/s -> load factor %d", measured, self.load_factor)
        self.register()
        self._heartbeat_thread = threading.Thread(
            target=self._heartbeat_loop, name="heartbeat", daemon=True
        )
        self._heartbeat_thread.start()

    def shutdown(self) -> None:
        self._stop.set()
        targets = [self.config.balancer_url, self.config.master_url]
        for base in filter(None, targets):
            try:
                self.client.request("DELETE", f"{base.rstrip('/')}/register/{self.worker_id}", timeout=2.0)
            except NET_ERRORS as exc:
                log.warning("deregistration at %s failed: %s", base, exc)


class WorkerHandler(Handler):
    worker: Worker

    def do_GET(self) -> None:
        w = self.worker
        if self.path == "/stats":
            return self.send_json(200, w.stats())
        try:
            key = parse_file_path(self.path)
        except (BadPath, BadKey) as exc:
            return self.send_error_text(400, str(exc))
        with w._counter_lock:
            w.pending += 1
        try:
            try:
                value = w.read(key)
            except MissingBlock as exc:
                return self.send_error_text(500, f"MissingBlock: {exc}")
            if value is None:
                hops = int(self.headers.get(H_HOPS) or 0)
                if hops >= 1:
                    # already redirected here once; do not bounce back
                    return self.send_error_text(404, "key not held here")
                return self.redirect(w.config.master_url.rstrip("/") + file_path(key))
            self.send_bytes(200, value)
            with w._counter_lock:
                w.served += 1
                w.transferred_bytes += len(value)
        finally:
            with w._counter_lock:
                w.pending -= 1

    def do_PUT(self) -> None:
        try:
            key, seq = parse_block_path(self.path)
        except (BadPath, BadKey) as exc:
            self.read_body()
            return self.send_error_text(400, str(exc))
        length = int(self.headers.get("Content-Length") or 0)
        if length > self.worker.store.block_size:
            self.close_connection = True
            return self.send_error_text(413, "block larger than block_size")
        payload = self.rfile.read(length) if length else b""
        count = self.headers.get(H_BLOCK_COUNT)
        total = self.headers.get(H_TOTAL_BYTES)
        try:
            self.worker.put_block(
                key, seq, payload,
                int(count) if count is not None else None,
                int(total) if total is not None else None,
            )
        except PayloadTooLarge as exc:
            return self.send_error_text(413, str(exc))
        self.send_bytes(201)

    def do_DELETE(self) -> None:
        try:
            key = parse_file_path(self.path)
        except (BadPath, BadKey) as exc:
            return self.send_error_text(400, str(exc))
        self.send_json(200, {"deleted_blocks": self.worker.delete(key)})


def make_server(worker: Worker, host: str, port: int) -> NodeServer:
    handler = type("BoundWorkerHandler", (WorkerHandler,), {"worker": worker})
    return NodeServer((host, port), handler)


def start_worker(config: NodeConfig) -> tuple[Worker, NodeServer]:
    worker = Worker(config)
    host, port = parse_listen_addr(config.listen_addr)
    server = make_server(worker, host, port)
    serve_in_thread(server)
    worker.startup(server.url)
    return worker, server
