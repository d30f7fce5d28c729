import threading
import time

import httpx
import pytest
from fastapi.testclient import TestClient

from elink.errors import ValidationError
from elink.pipeline import LinkerConfig, LinkerDeps, link_text
from elink.service import ServiceState, create_app, parse_link_request

from .conftest import ACME_UTTERANCE
from .live import serve_in_thread


def strip_timing(d):
    d = dict(d)
    d.pop("timing")
    return d


@pytest.fixture
def client(acme_deps):
    with TestClient(create_app(ServiceState(LinkerConfig(), acme_deps))) as c:
        yield c


def test_link_ok(client):
    r = client.post("/link", json={"text": ACME_UTTERANCE})
    assert r.status_code == 200
    body = r.json()
    assert body["mentions"][0]["entity"]["wikidata_qid"] == "Q1001"
    assert "timing" in body


def test_link_with_spans_and_overrides(client):
    r = client.post("/link", json={"text": ACME_UTTERANCE, "spans": [{"start": 4, "end": 8}], "mode": "mmq_only", "top_k": 3})
    assert r.status_code == 200
    body = r.json()
    assert body["mode"] == "mmq_only"
    assert body["mentions"][0]["num_candidates"] <= 3


@pytest.mark.parametrize(
    "payload",
    [
        b"{not json",
        b"[1, 2]",
        b'{"text": 5}',
        b'{"text": "x", "top_k": 0}',
        b'{"text": "x", "mode": "fast"}',
        b'{"text": "x", "spans": [{"start": 0}]}',
        b'{"text": "abc", "spans": [{"start": 0, "end": 9}]}',
    ],
)
def test_bad_requests_are_400(client, payload):
    r = client.post("/link", content=payload, headers={"content-type": "application/json"})
    assert r.status_code == 400
    assert r.json()["error"]["type"] == "bad_request"


def test_health_and_stats(client, acme_deps):
    h = client.get("/health")
    assert h.status_code == 200
    assert h.json() == {"status": "ok", "kb_entities": 4, "index_version": acme_deps.index_version}
    assert client.get("/stats").json()["latency_ms"] is None
    for _ in range(3):
        client.post("/link", json={"text": ACME_UTTERANCE})
    client.post("/link", content=b"{", headers={"content-type": "application/json"})
    stats = client.get("/stats").json()
    assert stats["requests"] == 4 and stats["errors"] == 1 and stats["window"] == 3
    assert stats["latency_ms"]["p50"] <= stats["latency_ms"]["p99"]


def test_health_503_until_loaded(acme_paths):
    gate = threading.Event()

    def loader():
        gate.wait(10)
        return LinkerDeps.load(acme_paths["kb"], acme_paths["index"], "stub", acme_paths["aliases"])

    state = ServiceState()
    with TestClient(create_app(state, loader)) as c:
        assert c.get("/health").status_code == 503
        assert c.get("/health").json()["status"] == "loading"
        assert c.post("/link", json={"text": ACME_UTTERANCE}).status_code == 503
        gate.set()
        deadline = time.monotonic() + 10
        while c.get("/health").status_code != 200 and time.monotonic() < deadline:
            time.sleep(0.01)
        assert c.get("/health").status_code == 200
        assert c.post("/link", json={"text": ACME_UTTERANCE}).status_code == 200
    state.deps.kb.close()


def test_health_reports_load_failure(tmp_path):
    def loader():
        return LinkerDeps.load(tmp_path / "nope", tmp_path / "nope.elix")

    with TestClient(create_app(ServiceState(), loader)) as c:
        deadline = time.monotonic() + 10
        while c.get("/health").json()["status"] == "loading" and time.monotonic() < deadline:
            time.sleep(0.01)
        r = c.get("/health")
        assert r.status_code == 503 and r.json()["status"] == "error"


def test_encoder_miss_is_422(acme_paths, tmp_path):
    enc = tmp_path / "enc.jsonl"
    enc.write_text("", encoding="utf-8")
    from elink.dense import PrecomputedEncoder
    from elink.kb import open_kb
    from elink.lexical import load_index
    from elink.mention import build_gazetteer

    kb = open_kb(acme_paths["kb"])
    deps = LinkerDeps(kb, load_index(acme_paths["index"]), build_gazetteer(kb, acme_paths["aliases"]),
                      PrecomputedEncoder.load(enc, kb.embedding_dim))
    with TestClient(create_app(ServiceState(LinkerConfig(), deps))) as c:
        r = c.post("/link", json={"text": ACME_UTTERANCE})
        assert r.status_code == 422 and r.json()["error"]["type"] == "encoder_miss"
    kb.close()


def test_parse_link_request():
    text, spans, cfg = parse_link_request(b'{"text": "a", "spans": [{"start": 0, "end": 1, "label": "product"}]}', LinkerConfig())
    assert text == "a" and spans == [(0, 1, "product")] and cfg == LinkerConfig()
    with pytest.raises(ValidationError):
        parse_link_request(b'{"text": "a", "top_k": true}', LinkerConfig())


def test_state_rejects_bad_cap():
    with pytest.raises(ValueError):
        ServiceState(max_inflight=0)


def test_concurrent_live_requests_match_sequential(deps10k, bench10k):
    bench, _ = bench10k
    config = LinkerConfig()
    texts = [g.text for g in bench.gold[:50]]
    expected = [strip_timing(link_text(t, config, deps10k).to_dict()) for t in texts]
    with serve_in_thread(ServiceState(config, deps10k, max_inflight=8)) as url:
        with httpx.Client(base_url=url, timeout=30) as http:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(16) as pool:
                got = list(pool.map(lambda t: http.post("/link", json={"text": t}), texts * 2))
    assert all(r.status_code == 200 for r in got)
    assert [strip_timing(r.json()) for r in got] == expected * 2
