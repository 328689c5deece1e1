"""Command line: run nodes, move data in and out, run the benchmarks.

Exit codes for put/get: 0 on 2xx, 1 on 404, 2 on anything else.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from keycluster.config import ROLES, NodeConfig
from keycluster.errors import SchemaError
from keycluster.httpio import NET_ERRORS, HttpClient
from keycluster.wire import file_path

log = logging.getLogger("keycluster")

DEFAULT_BALANCER = os.environ.get("KEYCLUSTER_BALANCER", "http://127.0.0.1:8080")


def _exit_code(status: int) -> int:
    if 200 <= status < 300:
        return 0
    if status == 404:
        return 1
    return 2


def _write_ready(path: str | None, url: str) -> None:
    if not path:
        return
    tmp = Path(path + ".tmp")
    tmp.write_text(url)
    tmp.replace(path)


def run_node(config: NodeConfig) -> int:
    """Run one node in the foreground until SIGTERM/SIGINT."""
    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())

    if config.role == "master":
        from keycluster.master import start_master

        _, server, detector = start_master(config)
        cleanup = [detector.stop_event.set]
    elif config.role == "balancer":
        from keycluster.balancer import start_balancer

        balancer, server = start_balancer(config)
        cleanup = [balancer.stop]
    else:
        from keycluster.worker import RegistrationFailed, start_worker

        try:
            worker, server = start_worker(config)
        except RegistrationFailed as exc:
            log.error("%s", exc)
            return 1
        cleanup = [worker.shutdown]

    log.info("%s listening on %s", config.role, server.url)
    print(f"LISTENING {server.url}", flush=True)
    _write_ready(config.ready_file, server.url)
    stop.wait()
    for fn in cleanup:
        fn()
    server.shutdown()
    server.server_close()
    return 0


def cmd_start(args) -> int:
    try:
        config = NodeConfig.load(args.config)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if config.role != args.role:
        print(f"config error: role {config.role!r} in file, {args.role!r} requested", file=sys.stderr)
        return 2
    return run_node(config)


def cmd_put(args) -> int:
    data = Path(args.file).read_bytes()
    try:
        resp = HttpClient(timeout=args.timeout).request(
            "PUT", args.balancer.rstrip("/") + file_path(args.key), body=data
        )
    except NET_ERRORS as exc:
        print(f"put failed: {exc}", file=sys.stderr)
        return 2
    if resp.status >= 300:
        print(f"put: HTTP {resp.status} {resp.body.decode(errors='replace')}", file=sys.stderr)
    return _exit_code(resp.status)


def cmd_get(args) -> int:
    try:
        resp = HttpClient(timeout=args.timeout).get(args.balancer.rstrip("/") + file_path(args.key))
    except NET_ERRORS as exc:
        print(f"get failed: {exc}", file=sys.stderr)
        return 2
    if resp.status == 200:
        Path(args.out).write_bytes(resp.body)
    else:
        print(f"get: HTTP {resp.status}", file=sys.stderr)
    return _exit_code(resp.status)


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _worker_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return _int_list(text)


def cmd_bench_size(args) -> int:
    from keycluster.bench import bench_size, print_rows

    rows = bench_size(args.sizes, args.workers, args.clients, args.requests, args.out)
    print_rows(rows)
    return 0


def cmd_bench_scale(args) -> int:
    from keycluster.bench import bench_scale, print_rows

    rows = bench_scale(args.size, args.workers, args.clients, args.requests, args.out)
    print_rows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keycluster", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("start", help="run a node in the foreground")
    s.add_argument("role", choices=ROLES)
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_start)

    for name, func, what in (("put", cmd_put, "file to upload"), ("get", cmd_get, "where to write the value")):
        s = sub.add_parser(name, help=f"{name} one key through the balancer")
        s.add_argument("key")
        s.add_argument("out" if name == "get" else "file", help=what)
        s.add_argument("--balancer", default=DEFAULT_BALANCER)
        s.add_argument("--timeout", type=float, default=60.0)
        s.set_defaults(func=func)

    s = sub.add_parser("bench-size", help="read latency vs. dataset size (1 worker)")
    s.add_argument("--sizes", type=_int_list, default=[10, 50, 100, 500], help="MB, comma separated")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--clients", type=int, default=16)
    s.add_argument("--requests", type=int, default=1000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench_size)

    s = sub.add_parser("bench-scale", help="read latency vs. worker count at fixed size")
    s.add_argument("--size", type=int, default=500, help="MB")
    s.add_argument("--workers", type=_worker_range, default=list(range(1, 7)), help="e.g. 1..6 or 1,2,4")
    s.add_argument("--clients", type=int, default=16)
    s.add_argument("--requests", type=int, default=1000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench_scale)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
