import json

import pytest
from hypothesis import given, strategies as st

from keycluster.errors import BadKey, BadPath, SchemaError
from keycluster.wire import (
    HeartbeatMessage,
    RegistrationMessage,
    block_path,
    file_path,
    parse_block_path,
    parse_file_path,
)


def test_registration_encodes_expected_fields():
    doc = json.loads(RegistrationMessage("w1", "http://10.0.0.5:9000", 10).encode())
    assert doc == {"worker_id": "w1", "base_url": "http://10.0.0.5:9000", "load_factor": 10}


def test_registration_roundtrip():
    m = RegistrationMessage("w1", "http://10.0.0.5:9000", 10)
    assert RegistrationMessage.decode(m.encode()) == m


def test_unknown_fields_ignored():
    raw = {"worker_id": "w1", "base_url": "http://h:1", "load_factor": 3, "extra": [1]}
    assert RegistrationMessage.decode(raw) == RegistrationMessage("w1", "http://h:1", 3)


@pytest.mark.parametrize(
    "raw",
    [
        {"base_url": "http://h:1", "load_factor": 3},
        {"worker_id": "w1", "load_factor": 3},
        {"worker_id": "w1", "base_url": "http://h:1", "load_factor": "3"},
        {"worker_id": "w1", "base_url": "http://h:1", "load_factor": True},
        {"worker_id": "w1", "base_url": "http://h:1", "load_factor": 0},
        {"worker_id": "w1", "base_url": "http://h:1", "load_factor": 101},
        {"worker_id": "w/1", "base_url": "http://h:1", "load_factor": 3},
        {"worker_id": "w1", "base_url": "ftp://h:1", "load_factor": 3},
        [1, 2],
        "not json",
    ],
)
def test_bad_registration(raw):
    with pytest.raises(SchemaError):
        RegistrationMessage.decode(raw if isinstance(raw, str) else json.dumps(raw))


def test_heartbeat_roundtrip_and_validation():
    m = HeartbeatMessage("w2", 10, 1, 5, 100)
    assert HeartbeatMessage.decode(m.encode()) == m
    with pytest.raises(SchemaError):
        HeartbeatMessage.decode({"worker_id": "w2", "stored_bytes": -1, "pending_requests": 0,
                                 "served_requests": 0, "transferred_bytes": 0})
    with pytest.raises(SchemaError):
        HeartbeatMessage.decode({"worker_id": "w2"})


worker_ids = st.text("abcXYZ019_-", min_size=1, max_size=64)


@given(worker_ids, st.integers(1, 65535), st.integers(1, 100))
def test_registration_roundtrip_property(wid, port, lf):
    m = RegistrationMessage(wid, f"http://127.0.0.1:{port}", lf)
    assert RegistrationMessage.decode(m.encode()) == m


@given(worker_ids, *[st.integers(0, 2**53)] * 4)
def test_heartbeat_roundtrip_property(wid, a, b, c, d):
    m = HeartbeatMessage(wid, a, b, c, d)
    assert HeartbeatMessage.decode(m.encode()) == m


def test_file_path_examples():
    assert file_path("alpha") == "/file/alpha"
    assert file_path("a b") == "/file/a%20b"
    assert parse_file_path("/file/%D0%BA%D0%BB%D1%8E%D1%87") == "ключ"


@pytest.mark.parametrize("path", ["/file/", "/file", "/files/x", "/file/a/b", "/other"])
def test_bad_file_paths(path):
    with pytest.raises(BadPath):
        parse_file_path(path)


def test_encoded_slash_is_bad_key():
    with pytest.raises(BadKey):
        parse_file_path("/file/a%2Fb")
    with pytest.raises(BadKey):
        parse_file_path("/file/%FF")


keys = st.text(
    st.characters(blacklist_categories=("Cc", "Cs"), blacklist_characters="/"),
    min_size=1, max_size=60,
)


@given(keys)
def test_file_path_roundtrip(key):
    assert parse_file_path(file_path(key)) == key


@given(keys, st.integers(0, 10**6))
def test_block_path_roundtrip(key, seq):
    assert parse_block_path(block_path(key, seq)) == (key, seq)


@pytest.mark.parametrize("path", ["/block/k", "/block/k/x", "/block//1", "/block/k/1/2"])
def test_bad_block_paths(path):
    with pytest.raises(BadPath):
        parse_block_path(path)
