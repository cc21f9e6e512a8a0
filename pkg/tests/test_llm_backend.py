import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given
from hypothesis import strategies as st

from finteam.llm_backend import (
    ChatMessage,
    ChatRequest,
    RemoteBackend,
    ResponseError,
    ScriptedBackend,
    ScriptError,
    TransportError,
    complete,
    complete_streaming,
    make_request,
)


class StubServer:
    """Local chat-completions stub: serves queued (status, body, stream_chunks) responses."""

    def __init__(self):
        self.queue = []
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                stub.requests.append({"path": self.path, "body": body, "auth": self.headers.get("Authorization")})
                status, payload, chunks = stub.queue.pop(0) if stub.queue else (500, {"error": "empty"}, None)
                if chunks is not None:
                    self.send_response(status)
                    self.send_header("Content-Type", "text/event-stream")
                    self.send_header("Transfer-Encoding", "chunked")
                    self.end_headers()
                    for c in chunks:
                        event = json.dumps({"choices": [{"delta": {"content": c}}]})
                        self._chunk(f"data: {event}\n\n")
                    self._chunk("data: [DONE]\n\n")
                    self.wfile.write(b"0\r\n\r\n")
                    return
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def _chunk(self, text):
                raw = text.encode()
                self.wfile.write(f"{len(raw):x}\r\n".encode() + raw + b"\r\n")
                self.wfile.flush()

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        threading.Thread(target=self.server.serve_forever, daemon=True).start()
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1"

    def reply(self, text, status=200):
        self.queue.append((status, {"choices": [{"message": {"role": "assistant", "content": text}}]}, None))

    def error(self, status):
        self.queue.append((status, {"error": "boom"}, None))

    def stream(self, chunks):
        self.queue.append((200, None, chunks))

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub():
    s = StubServer()
    yield s
    s.close()


def req(text="hello", **kw):
    return make_request("sys", text, **kw)


def test_request_invariants():
    with pytest.raises(ValueError):
        ChatMessage("tool", "x")
    with pytest.raises(ValueError):
        ChatMessage("user", "  ")
    ChatMessage("assistant", "")
    with pytest.raises(ValueError):
        ChatRequest(())
    with pytest.raises(ValueError):
        ChatRequest((ChatMessage("assistant", "hi"),))
    with pytest.raises(ValueError):
        req(temperature=2.5)
    with pytest.raises(ValueError):
        req(max_tokens=0)
    with pytest.raises(ValueError):
        req(stop_sequences=("a", "b", "c", "d", "e"))


def test_scripted_lookup_and_exhaustion():
    backend = ScriptedBackend([("hello", "world")])
    assert complete(backend, req("say hello")) == "world"
    with pytest.raises(ScriptError):
        complete(ScriptedBackend([]), req())
    with pytest.raises(ScriptError):
        complete(backend, req())


def test_strict_mismatch():
    with pytest.raises(ScriptError):
        ScriptedBackend([("bonjour", "x")]).complete(req("hello"))


def test_lenient_mode_reuses_entries():
    backend = ScriptedBackend([("a", "1"), ("b", "2")], strict=False)
    assert [backend.complete(req(t)) for t in ("b", "a", "b")] == ["2", "1", "2"]


def test_streaming_deltas():
    deltas = []
    backend = ScriptedBackend([("", "abc")], chunk_size=1)
    assert complete_streaming(backend, req(), lambda d: deltas.append(d)) == "abc"
    assert deltas == ["a", "b", "c"]


def test_streaming_early_stop():
    seen = []

    def on_delta(d):
        seen.append(d)
        return "".join(seen).endswith("a[")

    out = ScriptedBackend([("", "xa[bcdef")], chunk_size=1).complete_streaming(req(), on_delta)
    assert out == "xa["
    assert "".join(seen) == out


@given(st.text(max_size=60), st.integers(1, 7))
def test_concatenation_property(reply, chunk):
    b1 = ScriptedBackend([("", reply)], chunk_size=chunk)
    b2 = ScriptedBackend([("", reply)], chunk_size=chunk)
    deltas = []
    streamed = b1.complete_streaming(req(), lambda d: deltas.append(d))
    assert streamed == "".join(deltas) == b2.complete(req()) == reply


def test_remote_complete_wire_format(stub, monkeypatch):
    monkeypatch.setenv("FINTEAM_API_KEY", "sekrit")
    stub.reply("finance")
    backend = RemoteBackend(stub.url, "fin-7b", backoff_base=0)
    assert backend.complete(req(stop_sequences=("END",))) == "finance"
    sent = stub.requests[0]
    assert sent["path"] == "/v1/chat/completions"
    assert sent["auth"] == "Bearer sekrit"
    body = sent["body"]
    assert body["model"] == "fin-7b" and body["stream"] is False and body["stop"] == ["END"]
    assert body["messages"] == [{"role": "system", "content": "sys"}, {"role": "user", "content": "hello"}]
    assert body["temperature"] == 0.1


def test_remote_truncates_at_stop(stub):
    stub.reply("answer END trailing")
    assert RemoteBackend(stub.url, "m", backoff_base=0).complete(req(stop_sequences=("END",))) == "answer "


def test_remote_500_three_times(stub):
    for _ in range(3):
        stub.error(500)
    backend = RemoteBackend(stub.url, "m", retries=2, backoff_base=0)
    with pytest.raises(TransportError) as info:
        backend.complete(req())
    assert info.value.attempts == 3
    assert len(stub.requests) == 3


@pytest.mark.parametrize("failures,retries,expected_requests,ok", [
    (0, 2, 1, True), (1, 2, 2, True), (2, 2, 3, True), (3, 2, 3, False), (1, 0, 1, False), (4, 5, 5, True),
])
def test_retry_bound(stub, failures, retries, expected_requests, ok):
    for _ in range(failures):
        stub.error(503)
    stub.reply("done")
    backend = RemoteBackend(stub.url, "m", retries=retries, backoff_base=0)
    if ok:
        assert backend.complete(req()) == "done"
    else:
        with pytest.raises(TransportError):
            backend.complete(req())
    assert len(stub.requests) == min(failures + 1, retries + 1) == expected_requests


def test_client_errors_are_not_retried(stub):
    stub.error(400)
    with pytest.raises(ResponseError):
        RemoteBackend(stub.url, "m", backoff_base=0).complete(req())
    assert len(stub.requests) == 1


def test_malformed_response(stub):
    stub.queue.append((200, {"unexpected": True}, None))
    with pytest.raises(ResponseError):
        RemoteBackend(stub.url, "m", backoff_base=0).complete(req())


def test_transport_error_when_unreachable():
    backend = RemoteBackend("http://127.0.0.1:9", "m", retries=1, backoff_base=0, timeout=0.5)
    with pytest.raises(TransportError) as info:
        backend.complete(req())
    assert info.value.attempts == 2


def test_remote_stream(stub):
    stub.stream(["fin", "ance"])
    deltas = []
    out = RemoteBackend(stub.url, "m", backoff_base=0).complete_streaming(req(), lambda d: deltas.append(d))
    assert out == "finance" and deltas == ["fin", "ance"]
    assert stub.requests[0]["body"]["stream"] is True


def test_remote_stream_early_stop_and_stop_sequence(stub):
    stub.stream(["ab", "c[", "de", "f"])
    out = RemoteBackend(stub.url, "m", backoff_base=0).complete_streaming(req(), lambda d: d.endswith("["))
    assert out == "abc["
    stub.stream(["hello ST", "OP tail"])
    out = RemoteBackend(stub.url, "m", backoff_base=0).complete_streaming(req(stop_sequences=("STOP",)),
                                                                         lambda d: False)
    assert out == "hello "
