import json
import socket

import pytest

from collabrec.bridge import BridgeClient, BridgeError, bridge_serve
from collabrec.core import Rng, UserHistory
from collabrec.model import SequentialRanker


@pytest.fixture(scope="module")
def served():
    cloud = SequentialRanker(emb_dim=8, max_seq_len=10, seed=3).init_params(60)
    server = bridge_serve(cloud, "127.0.0.1", 0)
    host, port = server.address
    yield cloud, host, port
    server.stop()


def test_loopback_equals_in_process(served):
    cloud, host, port = served
    rng = Rng(0).substream("bridge-test")
    with BridgeClient(host, port) as client:
        for user in range(50):
            hist = [int(i) for i in rng.integers(0, 60, size=int(rng.integers(0, 12)))]
            remote = client(user, hist, 20)
            local = cloud.recall_topk(UserHistory.from_sequence(user, hist, 10), 20)
            assert remote.items == local.items
            assert remote.init_scores == pytest.approx(local.init_scores)


def test_malformed_line_survives(served):
    _, host, port = served
    with socket.create_connection((host, port), timeout=5) as sock:
        f = sock.makefile("rwb")
        f.write(b"this is not json\n")
        f.flush()
        err = json.loads(f.readline())
        assert "error" in err and "line 1" in err["error"]
        # The stream is still usable afterwards.
        f.write(json.dumps({"user": 0, "history": [1, 2], "k": 5}).encode() + b"\n")
        f.flush()
        ok = json.loads(f.readline())
        assert ok["user"] == 0 and len(ok["items"]) == 5


def test_oversized_k_propagates_error(served):
    _, host, port = served
    with BridgeClient(host, port) as client:
        with pytest.raises(BridgeError, match="exceeds catalog"):
            client(0, [1, 2, 3], 10_000)


def test_missing_field_is_protocol_error(served):
    _, host, port = served
    with socket.create_connection((host, port), timeout=5) as sock:
        f = sock.makefile("rwb")
        f.write(json.dumps({"user": 0, "k": 5}).encode() + b"\n")
        f.flush()
        err = json.loads(f.readline())
        assert "error" in err


def test_unreachable_endpoint():
    with pytest.raises(BridgeError):
        BridgeClient("127.0.0.1", 1, timeout=0.5)
