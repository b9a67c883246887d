import json
import threading

import numpy as np
import pytest

from shadowmark import zoo
from shadowmark.errors import CorruptionError
from shadowmark.gate import (
    Gate,
    GateClient,
    GateConfig,
    RunningGate,
    _is_loopback,
    decode_tensor,
    encode_tensor,
)
from shadowmark.keys import keygen
from shadowmark.train import heldout_queries
from shadowmark.verdict import VerificationReport


@pytest.fixture(scope="module")
def service(lab, tmp_path_factory):
    audit = tmp_path_factory.mktemp("gate") / "audit.jsonl"
    gate = Gate(lab.pipeline("I2I"), audit_path=audit)
    with RunningGate(gate) as running:
        yield running, GateClient(running.url), audit


def test_tensor_wire_format_round_trip():
    a = np.arange(6, dtype=np.float32).reshape(2, 3) / 7
    assert decode_tensor(encode_tensor(a), [2, 3]).tobytes() == a.tobytes()
    with pytest.raises(ValueError):
        decode_tensor("not base64!!")
    with pytest.raises(ValueError):
        decode_tensor(encode_tensor(a), [4, 4])


def test_loopback_detection():
    assert _is_loopback("127.0.0.1") and _is_loopback("::1")
    assert not _is_loopback("10.0.0.5") and not _is_loopback("example.org")


def test_health_lists_public_facts_only(service):
    _, client, _ = service
    status, body = client._json("GET", "/health")
    assert status == 200
    assert set(body) == {"procedure", "key_dim", "input_shape", "output_shape"}
    assert body["key_dim"] == 256 and body["input_shape"] == [1, 32, 32]


def test_infer_single_and_batch_are_byte_equal(service, lab):
    _, client, _ = service
    M = lab.protected("I2I")
    x = heldout_queries("I2I", 3, seed=77)
    assert client.infer(x).tobytes() == M.forward(x).tobytes()
    assert client.infer(x[0]).tobytes() == M.forward(x[0]).tobytes()


@pytest.mark.parametrize(
    "path, body, fragment",
    [
        ("/infer", {"x": "", "shape": [1], "key": "AAAA"}, "must not carry a key"),
        ("/infer", {"x": encode_tensor(np.zeros(4)), "shape": [4], "extra": 1}, "unexpected fields"),
        ("/infer", {"x": encode_tensor(np.zeros(4)), "shape": [1, 2, 2]}, "expected"),
        ("/infer", {"x": "@@", "shape": [1]}, "base64"),
        ("/verify", {"key": encode_tensor(np.zeros(256)), "x": "AAAA"}, "must not carry a query"),
        ("/verify", {}, "missing fields"),
        ("/verify", {"key": encode_tensor(np.zeros(256)), "mode": "forensic"}, "mode must be"),
        ("/nowhere", {}, "no route"),
    ],
)
def test_bad_requests_are_rejected(service, path, body, fragment):
    _, client, _ = service
    status, raw = client.request("POST", path, body)
    assert status in (400, 404)
    assert fragment in json.loads(raw)["error"]


def test_wrong_key_length_reports_expected_length(service):
    _, client, _ = service
    status, raw = client.request("POST", "/verify", {"key": encode_tensor(np.zeros(10))})
    assert status == 400 and json.loads(raw)["expected_length"] == 256


def test_non_json_body_rejected(service):
    import http.client

    running, _, _ = service
    host, port = running.server.server_address[:2]
    conn = http.client.HTTPConnection(host, port, timeout=30)
    conn.request("POST", "/infer", body=b"{not json", headers={"Content-Type": "application/json"})
    resp = conn.getresponse()
    assert resp.status == 400 and "not JSON" in json.loads(resp.read())["error"]
    conn.close()


def test_verify_returns_mark_and_report_only(service, lab):
    _, client, _ = service
    status, body = client._json("POST", "/verify", {"key": encode_tensor(lab.key.vector)})
    assert status == 200 and set(body) == {"mark", "shape", "report"}
    mark = decode_tensor(body["mark"], body["shape"])
    assert mark.tobytes() == lab.pipeline("I2I").decode(lab.key).tobytes()
    assert body["report"]["mode"] == "original" and body["report"]["decision"] == 1


def test_slot_rejections(service, lab, tmp_path):
    _, client, _ = service
    zoo.save_checkpoint(zoo.build_network("decoder", "I2I", seed=0), tmp_path / "dec")
    zoo.save_checkpoint(zoo.build_network("surrogate", "N2I", seed=0), tmp_path / "gen")
    zoo.save_checkpoint(zoo.build_network("surrogate", "I2I", seed=0), tmp_path / "bad")
    blob = next((tmp_path / "bad" / "params").iterdir())
    blob.write_bytes(bytes(b ^ 0xFF for b in blob.read_bytes()))
    assert client.slot_in(tmp_path / "dec")[0] == 403
    assert client.slot_in(tmp_path / "missing")[0] == 404
    assert client.slot_in(tmp_path / "gen")[0] == 400
    assert client.slot_in(tmp_path / "bad")[0] == 400
    assert client.request("GET", "/health")[0] == 200


def test_concurrent_inference_during_slot_changes(service, lab, tmp_path):
    _, client, _ = service
    zoo.save_checkpoint(zoo.build_network("surrogate", "I2I", seed=1), tmp_path / "s")
    M = lab.protected("I2I")
    x = heldout_queries("I2I", 2, seed=5)
    want = M.forward(x).tobytes()
    results, stop = [], threading.Event()

    def hammer():
        while not stop.is_set():
            results.append(client.infer(x).tobytes() == want)

    workers = [threading.Thread(target=hammer) for _ in range(3)]
    for w in workers:
        w.start()
    for _ in range(5):
        assert client.slot_in(tmp_path / "s")[0] == 200
        assert client.slot_out()[0] == 200
    stop.set()
    for w in workers:
        w.join()
    assert results and all(results)


def test_audit_is_append_only_and_mirrored_to_disk(service, lab):
    _, client, audit_path = service
    client.verify(lab.key)
    entries = client.audit()
    assert [e["seq"] for e in entries] == list(range(len(entries)))
    disk = [json.loads(line) for line in audit_path.read_text().splitlines()]
    assert disk == entries
    for e in entries:
        if e["event"] == "verify":
            r = VerificationReport.from_dict(e["report"])
            assert r.rederive_decision() == r.decision


def test_startup_refuses_mismatched_pipeline(lab, tmp_path):
    zoo.save_checkpoint(zoo.build_network("protected", "I2I", seed=99), tmp_path / "other")
    cfg = GateConfig(str(tmp_path / "other"), str(lab.pipeline_dir("I2I")))
    with pytest.raises(ValueError, match="digest"):
        Gate.from_config(cfg)


def test_startup_refuses_tampered_checkpoint(lab, tmp_path):
    import shutil

    src = lab.root / "I2I" / "protected"
    shutil.copytree(src, tmp_path / "M")
    blob = next((tmp_path / "M" / "params").iterdir())
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 1
    blob.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        Gate.from_config(GateConfig(str(tmp_path / "M"), str(lab.pipeline_dir("I2I"))))


def test_gate_rejects_wrong_key_dimension_in_process(lab):
    from shadowmark.gate import RequestError

    gate = Gate(lab.pipeline("I2I"))
    with pytest.raises(RequestError) as info:
        gate.verify(keygen(32, seed=0))
    assert info.value.status == 400
