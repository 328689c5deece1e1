"""Master: owns the key index, places keys on workers, redirects reads.

GETs are answered with a 302 to the first Up holder of the key. PUTs are
proxied: the master picks holders by rendezvous hashing, pushes every
block to every holder, and only then records the placement in the index.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from keycluster.blocks import chunk
from keycluster.config import NodeConfig
from keycluster.errors import BadKey, BadPath, IndexFull, NotEnoughWorkers, SchemaError
from keycluster.hashing import fnv1a_64
from keycluster.httpio import (
    NET_ERRORS,
    Handler,
    HttpClient,
    NodeServer,
    parse_listen_addr,
    serve_in_thread,
)
from keycluster.index import MultiLevelIndex, Placement
from keycluster.wire import (
    H_ALTERNATES,
    H_BLOCK_COUNT,
    H_TOTAL_BYTES,
    HeartbeatMessage,
    RegistrationMessage,
    block_path,
    file_path,
    parse_file_path,
    validate_worker_id,
)

log = logging.getLogger(__name__)

UP = "Up"
DOWN = "Down"


def placement_score(worker_id: str, key: str) -> int:
    return fnv1a_64(worker_id.encode("utf-8") + b"\x00" + key.encode("utf-8"))


def rank_workers(key: str, worker_ids: Iterable[str]) -> list[str]:
    """Worker ids by descending rendezvous score, ties by ascending id."""
    return sorted(set(worker_ids), key=lambda w: (-placement_score(w, key), w))


def place(key: str, worker_ids: Iterable[str], replication: int) -> list[str]:
    """Primary followed by ``replication - 1`` replicas for ``key``.

    Raises:
        NotEnoughWorkers: fewer distinct workers than ``replication``.
    """
    if replication < 1:
        raise ValueError("replication must be >= 1")
    ranked = rank_workers(key, worker_ids)
    if len(ranked) < replication:
        raise NotEnoughWorkers(f"need {replication} workers, have {len(ranked)}")
    return ranked[:replication]


@dataclass
class WorkerRecord:
    descriptor: RegistrationMessage
    state: str = UP
    last_heartbeat: float = 0.0
    stored_bytes: int = 0
    pending_requests: int = 0
    served_requests: int = 0
    transferred_bytes: int = 0

    @property
    def worker_id(self) -> str:
        return self.descriptor.worker_id

    @property
    def base_url(self) -> str:
        return self.descriptor.base_url.rstrip("/")


@dataclass
class GetDecision:
    status: int  # 302, 404 or 503
    location: str | None = None
    alternates: list[str] = field(default_factory=list)


class Master:
    def __init__(
        self,
        config: NodeConfig,
        client: HttpClient | None = None,
        clock: Callable[[], float] = time.monotonic,
        index: MultiLevelIndex | None = None,
    ):
        self.config = config
        self.client = client or HttpClient(timeout=config.timeout_ms / 1000)
        self.clock = clock
        self.index = index or MultiLevelIndex()
        self.workers: dict[str, WorkerRecord] = {}
        self._registry_lock = threading.Lock()
        self.unknown_heartbeats = 0
        self.puts = 0
        self.gets = 0

    # -- membership --------------------------------------------------------

    def register_worker(self, msg: RegistrationMessage) -> None:
        with self._registry_lock:
            rec = self.workers.get(msg.worker_id)
            if rec is None:
                self.workers[msg.worker_id] = WorkerRecord(msg, UP, self.clock())
            else:
                rec.descriptor = msg
                rec.state = UP
                rec.last_heartbeat = self.clock()
        log.info("worker %s registered at %s", msg.worker_id, msg.base_url)

    def deregister_worker(self, worker_id: str) -> None:
        with self._registry_lock:
            rec = self.workers.get(worker_id)
            if rec is not None:
                rec.state = DOWN

    def on_heartbeat(self, msg: HeartbeatMessage) -> bool:
        """Refresh a worker's liveness; False (and counted) if it is unknown."""
        with self._registry_lock:
            rec = self.workers.get(msg.worker_id)
            if rec is None:
                self.unknown_heartbeats += 1
                return False
            rec.last_heartbeat = self.clock()
            rec.state = UP
            rec.stored_bytes = msg.stored_bytes
            rec.pending_requests = msg.pending_requests
            rec.served_requests = msg.served_requests
            rec.transferred_bytes = msg.transferred_bytes
            return True

    def detect_failures(self, now: float | None = None) -> list[str]:
        now = self.clock() if now is None else now
        limit = self.config.failure_after_ms / 1000
        newly_down = []
        with self._registry_lock:
            for rec in self.workers.values():
                if rec.state == UP and now - rec.last_heartbeat > limit:
                    rec.state = DOWN
                    newly_down.append(rec.worker_id)
        for wid in newly_down:
            log.warning("worker %s missed heartbeats, marked Down", wid)
        return newly_down

    def up_workers(self) -> dict[str, WorkerRecord]:
        with self._registry_lock:
            return {wid: rec for wid, rec in self.workers.items() if rec.state == UP}

    # -- reads -------------------------------------------------------------

    def handle_get(self, key: str) -> GetDecision:
        self.gets += 1
        placement = self.index.lookup(key)
        if placement is None:
            return GetDecision(404)
        up = self.up_workers()
        urls = [up[w].base_url + file_path(key) for w in placement.holders if w in up]
        if not urls:
            return GetDecision(503)
        return GetDecision(302, urls[0], urls[1:])

    # -- writes ------------------------------------------------------------

    def _push_blocks(self, rec: WorkerRecord, key: str, blocks: list[bytes], total: int) -> bool:
        headers = {H_BLOCK_COUNT: str(len(blocks)), H_TOTAL_BYTES: str(total)}
        for seq, payload in enumerate(blocks):
            try:
                resp = self.client.request(
                    "PUT", rec.base_url + block_path(key, seq), body=payload, headers=headers
                )
            except NET_ERRORS as exc:
                log.warning("block %s/%d to %s failed: %s", key, seq, rec.worker_id, exc)
                return False
            if resp.status != 201:
                log.warning("block %s/%d to %s: HTTP %d", key, seq, rec.worker_id, resp.status)
                return False
        return True

    def _delete_on(self, rec: WorkerRecord, key: str) -> None:
        try:
            self.client.request("DELETE", rec.base_url + file_path(key))
        except NET_ERRORS as exc:
            log.info("delete %s on %s failed (ignored): %s", key, rec.worker_id, exc)

    def handle_put(self, key: str, value: bytes) -> int:
        """Store ``value`` under ``key``; returns 201, 413 or 503."""
        if len(value) > self.config.max_value_bytes:
            return 413
        up = self.up_workers()
        try:
            holders = place(key, up, self.config.replication)
        except NotEnoughWorkers:
            return 503
        placement = Placement.for_value(holders, len(value), self.config.block_size)
        old = self.index.lookup(key)
        old_holders = set(old.holders) if old else set()
        blocks = chunk(value, self.config.block_size)

        touched = []
        for wid in holders:
            touched.append(wid)
            if not self._push_blocks(up[wid], key, blocks, len(value)):
                for undo in touched:
                    if undo not in old_holders:
                        self._delete_on(up[undo], key)
                return 503
        try:
            self.index.insert(key, placement)
        except IndexFull:
            log.error("index full, rejecting %r", key)
            for wid in holders:
                if wid not in old_holders:
                    self._delete_on(up[wid], key)
            return 503
        self.puts += 1
        with self._registry_lock:
            stale = [self.workers[w] for w in old_holders - set(holders) if w in self.workers]
        for rec in stale:
            self._delete_on(rec, key)
        return 201

    # -- index rebuild -----------------------------------------------------

    def merge_report(self, worker_id: str, manifests: Iterable[dict]) -> int:
        """Fold a worker's list of complete keys into the index.

        A key the index does not know gets this worker as its holder. A key
        already known with the same size gains this worker as an extra
        holder, holders kept in rendezvous order. Returns keys changed.
        """
        changed = 0
        for m in manifests:
            key, count, total = m["key"], m["block_count"], m["total_bytes"]
            current = self.index.lookup(key)
            if current is None:
                self.index.insert(key, Placement(worker_id, (), count, total))
            elif worker_id in current.holders:
                continue
            elif (current.block_count, current.total_bytes) == (count, total):
                holders = rank_workers(key, [*current.holders, worker_id])
                self.index.insert(key, Placement(holders[0], tuple(holders[1:]), count, total))
            else:
                continue
            changed += 1
        return changed

    def pull_report(self, worker_id: str) -> int:
        with self._registry_lock:
            rec = self.workers.get(worker_id)
        if rec is None:
            return 0
        try:
            resp = self.client.get(rec.base_url + "/stats")
        except NET_ERRORS as exc:
            log.warning("could not fetch key report from %s: %s", worker_id, exc)
            return 0
        if resp.status != 200:
            return 0
        return self.merge_report(worker_id, resp.json().get("keys", []))

    def stats(self) -> dict:
        s = self.index.stats()
        now = self.clock()
        with self._registry_lock:
            workers = [
                {
                    "worker_id": rec.worker_id,
                    "base_url": rec.base_url,
                    "load_factor": rec.descriptor.load_factor,
                    "state": rec.state,
                    "heartbeat_age_ms": round((now - rec.last_heartbeat) * 1000),
                    "stored_bytes": rec.stored_bytes,
                    "served_requests": rec.served_requests,
                }
                for rec in self.workers.values()
            ]
        return {
            "role": "master",
            "index": s._asdict(),
            "workers": workers,
            "unknown_heartbeats": self.unknown_heartbeats,
            "puts": self.puts,
            "gets": self.gets,
        }


class MasterHandler(Handler):
    master: Master  # set on the subclass built by make_server

    def do_GET(self) -> None:
        if self.path == "/stats":
            return self.send_json(200, self.master.stats())
        try:
            key = parse_file_path(self.path)
        except (BadPath, BadKey) as exc:
            return self.send_error_text(400, str(exc))
        d = self.master.handle_get(key)
        if d.status == 302:
            extra = {H_ALTERNATES: " ".join(d.alternates)} if d.alternates else None
            return self.redirect(d.location, extra)
        self.send_error_text(d.status, "key not found" if d.status == 404 else "no holder is up")

    def do_PUT(self) -> None:
        try:
            key = parse_file_path(self.path)
        except (BadPath, BadKey) as exc:
            self.read_body()
            return self.send_error_text(400, str(exc))
        length = int(self.headers.get("Content-Length") or 0)
        if length > self.master.config.max_value_bytes:
            self.close_connection = True
            return self.send_error_text(413, "value too large")
        status = self.master.handle_put(key, self.rfile.read(length) if length else b"")
        self.send_bytes(status)

    def do_POST(self) -> None:
        body = self.read_body()
        try:
            if self.path == "/register":
                msg = RegistrationMessage.decode(body)
                self.master.register_worker(msg)
                threading.Thread(
                    target=self.master.pull_report, args=(msg.worker_id,), daemon=True
                ).start()
                return self.send_json(200, {"registered": msg.worker_id})
            if self.path == "/heartbeat":
                known = self.master.on_heartbeat(HeartbeatMessage.decode(body))
                return self.send_json(200 if known else 404, {"known": known})
        except SchemaError as exc:
            return self.send_error_text(400, str(exc))
        self.send_error_text(404, "no such endpoint")

    def do_DELETE(self) -> None:
        if self.path.startswith("/register/"):
            try:
                wid = validate_worker_id(self.path[len("/register/") :])
            except SchemaError as exc:
                return self.send_error_text(400, str(exc))
            self.master.deregister_worker(wid)
            return self.send_bytes(204)
        self.send_error_text(404, "no such endpoint")


def make_server(master: Master, host: str, port: int) -> NodeServer:
    handler = type("BoundMasterHandler", (MasterHandler,), {"master": master})
    return NodeServer((host, port), handler)


class FailureDetector(threading.Thread):
    def __init__(self, master: Master):
        super().__init__(name="failure-detector", daemon=True)
        self.master = master
        self.stop_event = threading.Event()

    def run(self) -> None:
        period = self.master.config.heartbeat_ms / 1000
        while not self.stop_event.wait(period):
            try:
                self.master.detect_failures()
            except Exception:  # keep detecting no matter what
                log.exception("failure detector pass failed")


def start_master(config: NodeConfig) -> tuple[Master, NodeServer, FailureDetector]:
    master = Master(config)
    server = make_server(master, *parse_listen_addr(config.listen_addr))
    serve_in_thread(server)
    detector = FailureDetector(master)
    detector.start()
    return master, server, detector

