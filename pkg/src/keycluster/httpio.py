"""Small HTTP/1.1 server base and keep-alive client used by all nodes."""

from __future__ import annotations

import http.client
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping, NamedTuple
from urllib.parse import urlsplit

log = logging.getLogger(__name__)

# Anything a peer that died or hung can make a request raise.
NET_ERRORS = (OSError, http.client.HTTPException)


class Response(NamedTuple):
    status: int
    headers: Mapping[str, str]
    body: bytes

    def json(self):
        return json.loads(self.body)


class NodeServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        if host in ("0.0.0.0", ""):
            host = "127.0.0.1"
        return f"http://{host}:{port}"


class Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True
    server_version = "keycluster/0.1"

    def log_message(self, format: str, *args) -> None:  # noqa: A002
        log.debug("%s %s", self.address_string(), format % args)

    def read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def send_bytes(
        self,
        status: int,
        body: bytes = b"",
        headers: Mapping[str, str] | None = None,
        content_type: str = "application/octet-stream",
    ) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for name, value in (headers or {}).items():
            self.send_header(name, value)
        self.end_headers()
        if body and self.command != "HEAD":
            self.wfile.write(body)

    def send_json(self, status: int, doc, headers: Mapping[str, str] | None = None) -> None:
        self.send_bytes(status, json.dumps(doc).encode("utf-8"), headers, "application/json")

    def send_error_text(self, status: int, message: str) -> None:
        self.send_bytes(status, message.encode("utf-8"), content_type="text/plain; charset=utf-8")

    def redirect(self, location: str, headers: Mapping[str, str] | None = None) -> None:
        self.send_bytes(302, b"", {"Location": location, **(headers or {})})


def serve_in_thread(server: NodeServer) -> threading.Thread:
    t = threading.Thread(target=server.serve_forever, name=f"http-{server.url}", daemon=True)
    t.start()
    return t


def parse_listen_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class HttpClient:
    """Keep-alive client with a small idle-connection pool per host.

    A request that fails on a reused connection before any response byte
    arrives is retried once on a fresh one (the server may have closed the
    idle socket). Failures on a fresh connection propagate as OSError or
    http.client.HTTPException.
    """

    def __init__(self, timeout: float = 5.0, max_idle: int = 32):
        self.timeout = timeout
        self.max_idle = max_idle
        self._idle: dict[tuple[str, int], list[http.client.HTTPConnection]] = {}
        self._lock = threading.Lock()

    def _checkout(self, host: str, port: int, timeout: float) -> tuple[http.client.HTTPConnection, bool]:
        with self._lock:
            pool = self._idle.get((host, port))
            if pool:
                conn = pool.pop()
                conn.timeout = timeout
                if conn.sock is not None:
                    conn.sock.settimeout(timeout)
                return conn, True
        return http.client.HTTPConnection(host, port, timeout=timeout), False

    def _checkin(self, host: str, port: int, conn: http.client.HTTPConnection) -> None:
        with self._lock:
            pool = self._idle.setdefault((host, port), [])
            if len(pool) < self.max_idle:
                pool.append(conn)
                return
        conn.close()

    def request(
        self,
        method: str,
        url: str,
        body: bytes | None = None,
        headers: Mapping[str, str] | None = None,
        timeout: float | None = None,
    ) -> Response:
        parts = urlsplit(url)
        host, port = parts.hostname or "127.0.0.1", parts.port or 80
        target = parts.path or "/"
        if parts.query:
            target += "?" + parts.query
        timeout = self.timeout if timeout is None else timeout
        hdrs = dict(headers or {})
        if body is not None or method in ("PUT", "POST"):
            hdrs.setdefault("Content-Length", str(len(body or b"")))

        for attempt in (0, 1):
            conn, reused = self._checkout(host, port, timeout)
            try:
                conn.request(method, target, body=body, headers=hdrs)
                resp = conn.getresponse()
                data = resp.read()
            except (http.client.RemoteDisconnected, ConnectionResetError, BrokenPipeError):
                conn.close()
                if reused and attempt == 0:
                    continue
                raise
            except BaseException:
                conn.close()
                raise
            if resp.will_close:
                conn.close()
            else:
                self._checkin(host, port, conn)
            return Response(resp.status, {k.lower(): v for k, v in resp.getheaders()}, data)
        raise AssertionError("unreachable")

    def get(self, url: str, **kw) -> Response:
        return self.request("GET", url, **kw)

    def close(self) -> None:
        with self._lock:
            pools, self._idle = self._idle, {}
        for pool in pools.values():
            for conn in pool:
                conn.close()
