import json
import subprocess
import sys

import pytest

from keycluster.bench import CSV_HEADER, BenchRow, read_report, report_text
from keycluster.cli import main
from keycluster.harness import spawn_cluster

FAST = dict(heartbeat_ms=200, probe_ms=300, block_size=64 * 1024, load_factor=10)


def cli(*args, timeout=120):
    return subprocess.run([sys.executable, "-m", "keycluster", *args],
                          capture_output=True, text=True, timeout=timeout)


@pytest.fixture(scope="module")
def cluster():
    with spawn_cluster(2, **FAST) as c:
        yield c


def test_put_get_roundtrip(cluster, tmp_path):
    src = tmp_path / "in.bin"
    src.write_bytes(bytes(range(256)) * 1000)
    assert main(["put", "doc", str(src), "--balancer", cluster.balancer_url]) == 0
    out = tmp_path / "out.bin"
    assert main(["get", "doc", str(out), "--balancer", cluster.balancer_url]) == 0
    assert out.read_bytes() == src.read_bytes()


def test_zero_byte_file(cluster, tmp_path):
    src = tmp_path / "empty"
    src.write_bytes(b"")
    assert main(["put", "nothing", str(src), "--balancer", cluster.balancer_url]) == 0
    out = tmp_path / "got"
    assert main(["get", "nothing", str(out), "--balancer", cluster.balancer_url]) == 0
    assert out.exists() and out.read_bytes() == b""


def test_get_absent_exits_1(cluster, tmp_path):
    assert main(["get", "never-stored", str(tmp_path / "x"), "--balancer", cluster.balancer_url]) == 1
    assert not (tmp_path / "x").exists()


def test_unreachable_balancer_exits_2(tmp_path):
    assert main(["get", "k", str(tmp_path / "x"), "--balancer", "http://127.0.0.1:9", "--timeout", "2"]) == 2


@pytest.mark.parametrize(
    "content",
    [
        "{not json",
        json.dumps({"role": "worker"}),
        json.dumps({"role": "master", "bogus": 1}),
        json.dumps({"role": "master", "heartbeat_ms": "fast"}),
        json.dumps({"role": "master", "method": "random"}),
        json.dumps({"role": "balancer", "master_url": "http://x:1"}),  # role mismatch
    ],
)
def test_bad_config_exits_2(tmp_path, content):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    r = cli("start", "master", "--config", str(cfg))
    assert r.returncode == 2
    assert "config error" in r.stderr


def test_missing_config_file_exits_2(tmp_path):
    r = cli("start", "master", "--config", str(tmp_path / "absent.json"))
    assert r.returncode == 2


def test_duplicate_worker_id_overwrites_url(cluster, tmp_path):
    before = {r["worker_id"]: r["url"] for r in cluster.balancer_stats()["routes"]}
    cfg = tmp_path / "dup.json"
    ready = tmp_path / "dup.url"
    cfg.write_text(json.dumps({
        "role": "worker", "worker_id": "w2", "data_dir": str(tmp_path / "dup"),
        "master_url": cluster.master_url, "balancer_url": cluster.balancer_url,
        "load_factor": 10, "heartbeat_ms": 200, "ready_file": str(ready),
    }))
    proc = subprocess.Popen([sys.executable, "-m", "keycluster", "start", "worker", "--config", str(cfg)],
                            stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
    try:
        line = proc.stdout.readline()
        assert line.startswith("LISTENING ")
        new_url = line.split()[1]
        cluster.wait_until(lambda: {r["worker_id"]: r["url"] for r in cluster.balancer_stats()["routes"]}["w2"]
                           == new_url, 5, "url update")
        after = {r["worker_id"]: r["url"] for r in cluster.balancer_stats()["routes"]}
        assert len(after) == len(before) and after["w2"] != before["w2"]
    finally:
        proc.terminate()
        assert proc.wait(10) == 0


def test_csv_is_bit_stable():
    rows = [BenchRow(10, 1, 16, 1000, 12.3456, 20.0, 800.1), BenchRow(50, 1, 16, 1000, 1 / 3, 2.0, 1.0)]
    expected = (
        "data_mb,workers,clients,requests,avg_ms,p95_ms,throughput_rps\n"
        "10,1,16,1000,12.346,20.000,800.100\n"
        "50,1,16,1000,0.333,2.000,1.000\n"
    )
    assert report_text(rows) == expected
    assert report_text(rows) == report_text(list(rows))
    assert ",".join(CSV_HEADER) == expected.splitlines()[0]


def test_row_validation():
    with pytest.raises(ValueError):
        BenchRow(10, 1, 16, 1000, 1.0, 2.0, 0.0)
    BenchRow(10, 1, 16, 0, 0.0, 0.0, 0.0)


def test_bench_size_single_value_gives_one_row(tmp_path):
    out = tmp_path / "size.csv"
    r = cli("bench-size", "--sizes", "2", "--clients", "2", "--requests", "20", "--out", str(out), timeout=180)
    assert r.returncode == 0, r.stderr
    rows = read_report(out)
    assert len(rows) == 1
    assert (rows[0].data_mb, rows[0].workers, rows[0].clients, rows[0].requests) == (2, 1, 2, 20)
    assert rows[0].throughput_rps > 0
    assert r.stdout.splitlines()[0] == ",".join(CSV_HEADER)


def test_bench_scale_one_worker_matches_size_shape(tmp_path):
    out = tmp_path / "scale.csv"
    r = cli("bench-scale", "--size", "2", "--workers", "1..1", "--clients", "2", "--requests", "20",
            "--out", str(out), timeout=180)
    assert r.returncode == 0, r.stderr
    [row] = read_report(out)
    assert (row.data_mb, row.workers, row.clients, row.requests) == (2, 1, 2, 20)
