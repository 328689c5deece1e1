"""Front balancer: weighted route table, proxying, failover and rejoin.

Workers register into numbered route slots (route/1, route/2, ...) at
runtime. Each GET picks a slot by the configured method, is proxied to
that worker with the same URI, and any redirects it answers with (worker
-> master -> owning worker) are followed internally, so the client only
ever sees the final response.

Pick methods, all linearized under one lock with route-table changes:

byrequests
    Weighted most-available: every Up slot's ``lbstatus`` grows by its
    ``lbfactor``; the largest wins (ties to the smaller worker id) and pays
    back the sum of all Up factors. Over any window of ``sum(lbfactor)``
    consecutive picks each slot is chosen exactly ``lbfactor`` times.
bytraffic
    Smallest ``transferred_bytes / lbfactor`` (ties to the smaller id).
bybusyness
    Smallest ``pending / lbfactor``; ties settled by the byrequests step
    run over the tied slots only.

All ``lbstatus`` values are reset to 0 whenever the set of Up slots
changes, so they always sum to 0 over the Up slots.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import asdict, dataclass
from fractions import Fraction
from urllib.parse import urlsplit

from keycluster.config import NodeConfig
from keycluster.errors import BadKey, BadPath, NoBackends, SchemaError
from keycluster.httpio import (
    NET_ERRORS,
    Handler,
    HttpClient,
    NodeServer,
    Response,
    parse_listen_addr,
    serve_in_thread,
)
from keycluster.wire import (
    H_ALTERNATES,
    H_HOPS,
    H_SERVED_BY,
    RegistrationMessage,
    parse_file_path,
    validate_worker_id,
)

log = logging.getLogger(__name__)

UP = "Up"
DOWN = "Down"
METHODS = ("byrequests", "bytraffic", "bybusyness")
MAX_HOPS = 2
REDIRECTS = (301, 302, 303, 307, 308)


@dataclass
class Slot:
    worker_id: str
    url: str
    lbfactor: int
    lbstatus: int = 0
    transferred_bytes: int = 0
    pending: int = 0
    served: int = 0
    state: str = UP


def _requests_step(candidates: list[Slot]) -> Slot:
    for s in candidates:
        s.lbstatus += s.lbfactor
    best = min(candidates, key=lambda s: (-s.lbstatus, s.worker_id))
    best.lbstatus -= sum(s.lbfactor for s in candidates)
    return best


class RouteTable:
    def __init__(self, method: str = "byrequests"):
        if method not in METHODS:
            raise ValueError(f"unknown balancer method {method!r}")
        self.method = method
        self.slots: list[Slot] = []
        self._lock = threading.Lock()

    # -- membership --------------------------------------------------------

    def _reset_status(self) -> None:
        for s in self.slots:
            s.lbstatus = 0

    def _find(self, worker_id: str) -> int | None:
        for i, s in enumerate(self.slots):
            if s.worker_id == worker_id:
                return i
        return None

    def add_worker(self, msg: RegistrationMessage) -> int:
        """Register (or re-register) a worker; returns its 1-based slot number."""
        url = msg.base_url.rstrip("/")
        with self._lock:
            i = self._find(msg.worker_id)
            if i is None:
                self.slots.append(Slot(msg.worker_id, url, msg.load_factor))
                i = len(self.slots) - 1
            else:
                s = self.slots[i]
                s.url, s.lbfactor, s.state = url, msg.load_factor, UP
            self._reset_status()
            return i + 1

    def remove_worker(self, worker_id: str) -> None:
        with self._lock:
            i = self._find(worker_id)
            if i is not None:
                del self.slots[i]
                self._reset_status()

    def set_state(self, worker_id: str, state: str) -> bool:
        """Returns True if the state actually changed."""
        with self._lock:
            i = self._find(worker_id)
            if i is None or self.slots[i].state == state:
                return False
            self.slots[i].state = state
            self._reset_status()
            return True

    def mark_down(self, worker_id: str) -> bool:
        changed = self.set_state(worker_id, DOWN)
        if changed:
            log.warning("worker %s marked Down", worker_id)
        return changed

    def mark_up(self, worker_id: str) -> bool:
        changed = self.set_state(worker_id, UP)
        if changed:
            log.info("worker %s rejoined", worker_id)
        return changed

    def worker_for_url(self, url: str) -> str | None:
        netloc = urlsplit(url).netloc
        with self._lock:
            for s in self.slots:
                if urlsplit(s.url).netloc == netloc:
                    return s.worker_id
        return None

    def down_slots(self) -> list[Slot]:
        with self._lock:
            return [s for s in self.slots if s.state == DOWN]

    # -- picking -----------------------------------------------------------

    def _pick_locked(self, method: str) -> Slot:
        up = [s for s in self.slots if s.state == UP]
        if not up:
            raise NoBackends("no Up workers")
        if len(up) == 1:
            return _requests_step(up)
        if method == "byrequests":
            return _requests_step(up)
        if method == "bytraffic":
            return min(up, key=lambda s: (Fraction(s.transferred_bytes, s.lbfactor), s.worker_id))
        if method == "bybusyness":
            load = {s.worker_id: Fraction(s.pending, s.lbfactor) for s in up}
            least = min(load.values())
            return _requests_step([s for s in up if load[s.worker_id] == least])
        raise ValueError(f"unknown balancer method {method!r}")

    def pick(self, method: str | None = None) -> str:
        """Choose a worker id (updates lbstatus, not the traffic counters).

        Raises:
            NoBackends: no slot is Up.
        """
        with self._lock:
            return self._pick_locked(method or self.method).worker_id

    def acquire(self, method: str | None = None) -> Slot:
        """Pick a slot and count one pending request on it, atomically."""
        with self._lock:
            slot = self._pick_locked(method or self.method)
            slot.pending += 1
            return slot

    def acquire_next_after(self, worker_id: str) -> Slot | None:
        """Nearest Up slot after ``worker_id`` in ring order, with pending += 1."""
        with self._lock:
            n = len(self.slots)
            start = self._find(worker_id)
            start = -1 if start is None else start
            for step in range(1, n + 1):
                s = self.slots[(start + step) % n]
                if s.state == UP and s.worker_id != worker_id:
                    s.pending += 1
                    return s
            return None

    def release(self, slot: Slot, body_bytes: int | None) -> None:
        """Close out a dispatch; ``body_bytes`` is None when the attempt failed."""
        with self._lock:
            slot.pending -= 1
            if body_bytes is not None:
                slot.served += 1
                slot.transferred_bytes += body_bytes

    def snapshot(self) -> list[dict]:
        with self._lock:
            return [{"slot": i + 1, "route": f"route/{i + 1}", **asdict(s)} for i, s in enumerate(self.slots)]


class Balancer:
    def __init__(self, config: NodeConfig, client: HttpClient | None = None):
        self.config = config
        self.master_url = config.master_url.rstrip("/")
        self.routes = RouteTable(config.method)
        self.client = client or HttpClient(timeout=config.timeout_ms / 1000, max_idle=64)
        self.failovers = 0
        self.unavailable = 0
        self._stop = threading.Event()

    # -- request path ------------------------------------------------------

    def _follow(self, resp: Response) -> Response:
        """Chase worker -> master -> owner redirects, at most MAX_HOPS of them."""
        hops = 0
        while resp.status in REDIRECTS and hops < MAX_HOPS:
            hops += 1
            candidates = [resp.headers["location"]]
            candidates += resp.headers.get(H_ALTERNATES.lower(), "").split()
            last: Response | None = None
            for url in candidates:
                try:
                    last = self.client.get(url, headers={H_HOPS: str(hops)})
                except NET_ERRORS as exc:
                    log.info("hop to %s failed: %s", url, exc)
                    wid = self.routes.worker_for_url(url)
                    if wid:
                        self.routes.mark_down(wid)
                    continue
                if last.status < 500:
                    break
            if last is None:
                return Response(503, {}, b"all holders unreachable")
            resp = last
        if resp.status in REDIRECTS:
            return Response(404, {}, b"key not found")
        return resp

    def dispatch_get(self, path: str) -> tuple[Response, str | None]:
        """Proxy one GET; returns the final response and the worker charged for it."""
        try:
            slot = self.routes.acquire()
        except NoBackends:
            self.unavailable += 1
            return Response(503, {}, b"no backends"), None
        retries = 0
        while True:
            try:
                first = self.client.get(slot.url + path, headers={H_HOPS: "0"})
            except NET_ERRORS as exc:
                self.routes.release(slot, None)
                self.routes.mark_down(slot.worker_id)
                log.warning("dispatch to %s failed: %s", slot.worker_id, exc)
                nxt = self.routes.acquire_next_after(slot.worker_id) if retries < self.config.max_retries else None
                if nxt is None:
                    self.unavailable += 1
                    return Response(503, {}, b"backends failed"), None
                retries += 1
                self.failovers += 1
                slot = nxt
                continue
            try:
                final = self._follow(first)
            except BaseException:
                self.routes.release(slot, None)
                raise
            self.routes.release(slot, len(final.body))
            return final, slot.worker_id

    def forward_put(self, path: str, body: bytes) -> Response:
        try:
            return self.client.request("PUT", self.master_url + path, body=body)
        except NET_ERRORS as exc:
            log.warning("PUT to master failed: %s", exc)
            return Response(503, {}, b"master unreachable")

    # -- rejoin ------------------------------------------------------------

    def probe_down_workers(self) -> list[str]:
        rejoined = []
        for s in self.routes.down_slots():
            try:
                resp = self.client.get(s.url + "/stats", timeout=min(2.0, self.config.timeout_ms / 1000))
            except NET_ERRORS:
                continue
            if resp.status == 200 and self.routes.mark_up(s.worker_id):
                rejoined.append(s.worker_id)
        return rejoined

    def _probe_loop(self) -> None:
        period = self.config.probe_ms / 1000
        while not self._stop.wait(period):
            try:
                self.probe_down_workers()
            except Exception:
                log.exception("probe pass failed")

    def start_prober(self) -> threading.Thread:
        t = threading.Thread(target=self._probe_loop, name="prober", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self._stop.set()

    def stats(self) -> dict:
        return {
            "role": "balancer",
            "method": self.routes.method,
            "routes": self.routes.snapshot(),
            "failovers": self.failovers,
            "unavailable": self.unavailable,
        }


class BalancerHandler(Handler):
    balancer: Balancer

    def _relay(self, resp: Response, served_by: str | None = None) -> None:
        headers = {H_SERVED_BY: served_by} if served_by else None
        self.send_bytes(resp.status, resp.body, headers,
                        resp.headers.get("content-type", "application/octet-stream"))

    def do_GET(self) -> None:
        if self.path == "/stats":
            return self.send_json(200, self.balancer.stats())
        try:
            parse_file_path(self.path)
        except (BadPath, BadKey) as exc:
            return self.send_error_text(400, str(exc))
        resp, served_by = self.balancer.dispatch_get(self.path)
        self._relay(resp, served_by)

    def do_PUT(self) -> None:
        body = self.read_body()
        try:
            parse_file_path(self.path)
        except (BadPath, BadKey) as exc:
            return self.send_error_text(400, str(exc))
        self._relay(self.balancer.forward_put(self.path, body), "master")

    def do_POST(self) -> None:
        body = self.read_body()
        if self.path != "/register":
            return self.send_error_text(404, "no such endpoint")
        try:
            msg = RegistrationMessage.decode(body)
        except SchemaError as exc:
            return self.send_error_text(400, str(exc))
        slot = self.balancer.routes.add_worker(msg)
        self.send_json(200, {"slot": slot, "route": f"route/{slot}"})

    def do_DELETE(self) -> None:
        if not self.path.startswith("/register/"):
            return self.send_error_text(404, "no such endpoint")
        try:
            wid = validate_worker_id(self.path[len("/register/") :])
        except SchemaError as exc:
            return self.send_error_text(400, str(exc))
        self.balancer.routes.remove_worker(wid)
        self.send_bytes(204)


def make_server(balancer: Balancer, host: str, port: int) -> NodeServer:
    handler = type("BoundBalancerHandler", (BalancerHandler,), {"balancer": balancer})
    return NodeServer((host, port), handler)


def start_balancer(config: NodeConfig) -> tuple[Balancer, NodeServer]:
    balancer = Balancer(config)
    server = make_server(balancer, *parse_listen_addr(config.listen_addr))
    serve_in_thread(server)
    balancer.start_prober()
    return balancer, server
