import threading
import time

import httpx
import pytest

from finteam.config import load_config
from finteam.knowledge_store import KnowledgeStore
from finteam.llm_backend import ScriptedBackend
from finteam.service import make_server
from finteam.workflows import WorkflowDeps, load_trace, replay

from helpers import SERVICE_REQUESTS, STATEMENTS, check_trace, write_service_config


@pytest.fixture
def service(tmp_path, monkeypatch):
    cfg = load_config(write_service_config(tmp_path))
    server = make_server(cfg, "127.0.0.1", 0)
    server.start_background()
    yield server, cfg
    server.shutdown()
    server.server_close()


def test_health(service):
    server, _ = service
    r = httpx.get(f"{server.url}/health")
    assert r.status_code == 200 and r.json() == {"status": "ok"}


@pytest.mark.parametrize("name", sorted(SERVICE_REQUESTS))
def test_analyze_end_to_end(service, name):
    server, cfg = service
    started = time.perf_counter()
    r = httpx.post(f"{server.url}/v1/analyze", json=SERVICE_REQUESTS[name], timeout=10)
    elapsed = time.perf_counter() - started
    assert r.status_code == 200, r.text
    assert elapsed < 2.0
    body = r.json()
    assert body["report"] and body["scenario"] == name
    assert (cfg.runs_dir / f"{body['trace_id']}.json").is_file()

    fetched = httpx.get(f"{server.url}/v1/trace/{body['trace_id']}").json()
    assert fetched["final_report"] == body["report"]
    trace = load_trace(cfg.runs_dir, body["trace_id"])
    check_trace(trace)
    again = replay(trace, WorkflowDeps(ScriptedBackend([]), KnowledgeStore(cfg.data_dir)))
    assert again.final_report == body["report"]


@pytest.mark.parametrize("payload,status", [
    ({"scenario": "crypto", "query": "x"}, 400),
    ({"scenario": "macro", "query": ""}, 400),
    ({"scenario": "macro", "query": 3}, 400),
    ({"scenario": "statements"}, 422),
    ([1, 2], 400),
])
def test_analyze_errors(service, payload, status):
    server, _ = service
    r = httpx.post(f"{server.url}/v1/analyze", json=payload)
    assert r.status_code == status
    assert "error" in r.json() and "step" in r.json()


def test_unknown_scenario_names_route_step(service):
    server, _ = service
    r = httpx.post(f"{server.url}/v1/analyze", json={"scenario": "crypto", "query": "x"})
    assert r.json()["step"] == "route"


def test_invalid_statements_422(service):
    server, _ = service
    bad = {**STATEMENTS, "balance_sheet": {**STATEMENTS["balance_sheet"], "current_assets": 5000}}
    r = httpx.post(f"{server.url}/v1/analyze", json={"scenario": "statements", "statements": bad})
    assert r.status_code == 422 and r.json()["violations"]


def test_bad_json_and_routes(service):
    server, _ = service
    assert httpx.post(f"{server.url}/v1/analyze", content=b"{nope").status_code == 400
    assert httpx.get(f"{server.url}/v1/trace/missing").status_code == 404
    assert httpx.get(f"{server.url}/v2/other").status_code == 404
    assert httpx.post(f"{server.url}/v1/other", json={}).status_code == 404


def test_workflow_failure_saves_partial_trace(tmp_path):
    path = write_service_config(tmp_path)
    (tmp_path / "script.json").write_text('{"script": [{"match": "#task=analyzer.keywords", '
                                          '"reply": "{\\"keywords\\": []}"}]}', encoding="utf-8")
    server = make_server(load_config(path), "127.0.0.1", 0)
    server.start_background()
    try:
        r = httpx.post(f"{server.url}/v1/analyze", json={"scenario": "macro", "query": "降准"})
        assert r.status_code == 500
        body = r.json()
        assert body["step"] == "gather_supplementary"
        partial = httpx.get(f"{server.url}/v1/trace/{body['trace_id']}").json()
        assert partial["error"]["step"] == "gather_supplementary" and len(partial["steps"]) == 1
    finally:
        server.shutdown()
        server.server_close()


def test_bearer_token(tmp_path, monkeypatch):
    monkeypatch.setenv("FINTEAM_TOKEN", "s3cret")
    cfg = load_config(write_service_config(tmp_path, '[service]\ntoken_env = "FINTEAM_TOKEN"\n'))
    server = make_server(cfg, "127.0.0.1", 0)
    server.start_background()
    try:
        req = SERVICE_REQUESTS["macro"]
        assert httpx.post(f"{server.url}/v1/analyze", json=req).status_code == 401
        ok = httpx.post(f"{server.url}/v1/analyze", json=req, headers={"Authorization": "Bearer s3cret"})
        assert ok.status_code == 200
        assert httpx.get(f"{server.url}/health").status_code == 200
    finally:
        server.shutdown()
        server.server_close()


def test_concurrent_requests(service):
    server, cfg = service
    results = []

    def call(name):
        r = httpx.post(f"{server.url}/v1/analyze", json=SERVICE_REQUESTS[name], timeout=10)
        results.append((r.status_code, r.json()["trace_id"]))

    threads = [threading.Thread(target=call, args=(n,)) for n in sorted(SERVICE_REQUESTS) * 3]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert [s for s, _ in results] == [200] * 12
    assert len({tid for _, tid in results}) == 12
