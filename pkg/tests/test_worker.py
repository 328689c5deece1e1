from keycluster.blocks import BlockId
from keycluster.config import NodeConfig
from keycluster.httpio import HttpClient
from keycluster.wire import H_HOPS, block_path, file_path
from keycluster.worker import Worker, load_factor_from_throughput

from conftest import wait_for


def test_load_factor_formula():
    assert load_factor_from_throughput(1000, 1000) == 10
    assert load_factor_from_throughput(12_400, 1000) == 100
    assert load_factor_from_throughput(1, 1000) == 1
    assert load_factor_from_throughput(2_500, 1000) == 25


def _worker(tmp_path, wid="w1", **kw):
    return Worker(NodeConfig(role="worker", worker_id=wid, data_dir=str(tmp_path / wid),
                             master_url="http://127.0.0.1:9", block_size=8, **kw))


def test_self_benchmark_on_identical_workers_agrees(tmp_path):
    a, b = _worker(tmp_path, "a"), _worker(tmp_path, "b")
    fa = load_factor_from_throughput(max(a.self_benchmark() for _ in range(3)), 1000)
    fb = load_factor_from_throughput(max(b.self_benchmark() for _ in range(3)), 1000)
    assert abs(fa - fb) <= 0.2 * max(fa, fb)
    # the probe block is cleaned up
    assert list(a.store.manifests()) == [] and a.stored_bytes() == 0


def test_index_rebuilt_from_disk(tmp_path):
    w = _worker(tmp_path)
    w.put_block("k", 0, b"12345678", 2, 10)
    assert w.read("k") is None  # incomplete
    w.put_block("k", 1, b"90", 2, 10)
    assert w.read("k") == b"1234567890"
    again = _worker(tmp_path)
    assert again.read("k") == b"1234567890"
    assert again.stats()["keys"] == [{"key": "k", "block_count": 2, "total_bytes": 10}]


def test_held_key_served_and_counted(inproc):
    c = inproc(1)
    assert c.put("k", b"hello").status == 201
    r = c.client.get(c.url("w1") + file_path("k"))
    assert r.status == 200 and r.body == b"hello"
    s = c.workers["w1"].stats()
    assert (s["served"], s["transferred_bytes"], s["pending"]) == (1, 5, 0)


def test_unheld_key_redirects_to_master(inproc):
    c = inproc(1)
    r = c.client.get(c.url("w1") + file_path("elsewhere"))
    assert r.status == 302 and r.headers["location"] == c.master_url + file_path("elsewhere")


def test_unheld_key_after_a_hop_is_404(inproc):
    c = inproc(1)
    r = c.client.get(c.url("w1") + file_path("elsewhere"), headers={H_HOPS: "1"})
    assert r.status == 404


def test_missing_block_is_500(inproc):
    c = inproc(1)
    c.put("k", b"x" * 200_000)
    w = c.workers["w1"]
    w.store.block_path(BlockId("k", 1)).unlink()
    r = c.client.get(c.url("w1") + file_path("k"))
    assert r.status == 500 and b"MissingBlock" in r.body


def test_oversize_block_is_413(inproc):
    c = inproc(1)
    r = HttpClient().request("PUT", c.url("w1") + block_path("k", 0), body=b"x" * (c.block_size + 1))
    assert r.status == 413


def test_shutdown_deregisters(inproc):
    c = inproc(2)
    c.workers["w2"].shutdown()
    assert [s["worker_id"] for s in c.balancer.routes.snapshot()] == ["w1"]
    assert set(c.master.up_workers()) == {"w1"}


def test_reregisters_after_master_forgets(inproc):
    c = inproc(1)
    c.master.workers.clear()
    assert wait_for(lambda: "w1" in c.master.up_workers(), timeout=3)


def test_heartbeat_revives_down_worker(inproc):
    c = inproc(1)
    c.master.deregister_worker("w1")
    assert wait_for(lambda: "w1" in c.master.up_workers(), timeout=3)


def test_master_learns_keys_on_registration(inproc, tmp_path):
    c = inproc(1)
    c.put("kept", b"abc")
    c.master.index.remove("kept")
    c.workers["w1"].register(master=True, balancer=False)
    assert wait_for(lambda: c.master.index.lookup("kept") is not None)
    assert c.get("kept").body == b"abc"
