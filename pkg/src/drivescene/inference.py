"""Chat-completions inference client and a deterministic local mock service.

Wire contract (``POST {endpoint}/v1/chat/completions``)::

    request  {"model": "vlm", "request_id": "r-0001",
              "messages": [{"role": "user", "content": [
                  {"type": "text", "text": "<prompt>"},
                  {"type": "image_url", "image_url": {"url": "<image_ref>"}}]}]}
    response {"id": "r-0001", "object": "chat.completion", "model": "vlm",
              "choices": [{"index": 0, "finish_reason": "stop", "logprobs": null,
                           "message": {"role": "assistant", "content": "<text>"}}]}

``choices[0].logprobs`` may carry ``{"content": [{"token": t, "logprob": x}, ...]}``.
"""
from __future__ import annotations

import errno
import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Mapping, Sequence

import httpx

from .errors import PortInUse, ProtocolError, ServiceUnavailable, Timeout

CHAT_PATH = "/v1/chat/completions"
ENDPOINT_ENV = "DRIVESCENE_ENDPOINT"


@dataclass(frozen=True)
class InferenceRequest:
    prompt: str
    image_ref: str
    model: str = "vlm"
    request_id: str = ""


@dataclass(frozen=True)
class InferenceResponse:
    request_id: str
    text: str
    logprobs: tuple[tuple[str, float], ...] | None = None
    latency_ms: float = 0.0


def request_body(req: InferenceRequest) -> dict[str, Any]:
    return {
        "model": req.model,
        "request_id": req.request_id,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": req.prompt},
                    {"type": "image_url", "image_url": {"url": req.image_ref}},
                ],
            }
        ],
    }


def parse_response(req: InferenceRequest, payload: Any, latency_ms: float) -> InferenceResponse:
    try:
        rid = payload["id"]
        choice = payload["choices"][0]
        text = choice["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed completion payload: {exc!r}") from None
    if rid != req.request_id:
        raise ProtocolError(f"response id {rid!r} does not match request id {req.request_id!r}")
    if not isinstance(text, str):
        raise ProtocolError("completion content is not a string")
    lp = choice.get("logprobs")
    logprobs = None
    if lp and lp.get("content") is not None:
        logprobs = tuple((str(t["token"]), float(t["logprob"])) for t in lp["content"])
    return InferenceResponse(rid, text, logprobs, latency_ms)


class InferenceClient:
    """Synchronous client with retries and bounded concurrency for batches.

    Connection failures, timeouts and 5xx answers are retried with
    exponential backoff (``backoff_s * 2**k``).  4xx answers and malformed
    payloads are not retried.
    """

    def __init__(
        self,
        endpoint: str,
        *,
        timeout_s: float = 30.0,
        attempts: int = 3,
        backoff_s: float = 0.1,
        max_in_flight: int = 8,
        transport: httpx.BaseTransport | None = None,
    ):
        if attempts < 1 or max_in_flight < 1:
            raise ValueError("attempts and max_in_flight must be >= 1")
        self.endpoint = endpoint.rstrip("/")
        self.attempts = attempts
        self.backoff_s = backoff_s
        self.max_in_flight = max_in_flight
        self._http = httpx.Client(
            timeout=timeout_s,
            transport=transport,
            limits=httpx.Limits(max_connections=max_in_flight),
        )

    def __enter__(self) -> InferenceClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        self._http.close()

    def infer(self, req: InferenceRequest) -> InferenceResponse:
        body = request_body(req)
        last: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            start = time.perf_counter()
            try:
                r = self._http.post(self.endpoint + CHAT_PATH, json=body)
            except httpx.TimeoutException as exc:
                last = exc
                continue
            except httpx.TransportError as exc:
                last = exc
                continue
            latency = (time.perf_counter() - start) * 1000.0
            if r.status_code >= 500:
                last = ServiceUnavailable(f"HTTP {r.status_code}")
                continue
            if r.status_code != 200:
                raise ProtocolError(f"HTTP {r.status_code} for {req.image_ref!r}: {r.text[:200]}")
            try:
                payload = r.json()
            except ValueError:
                raise ProtocolError("response body is not JSON") from None
            return parse_response(req, payload, latency)
        if isinstance(last, httpx.TimeoutException):
            raise Timeout(f"no answer from {self.endpoint} after {self.attempts} attempts")
        raise ServiceUnavailable(f"{self.endpoint} unavailable after {self.attempts} attempts: {last}")

    def infer_many(self, reqs: Sequence[InferenceRequest]) -> list[InferenceResponse]:
        """Run requests with at most ``max_in_flight`` outstanding; results in input order."""
        if not reqs:
            return []
        with ThreadPoolExecutor(max_workers=min(self.max_in_flight, len(reqs))) as pool:
            return list(pool.map(self.infer, reqs))


def label_fn(client: InferenceClient, model: str = "vlm") -> Callable[[str, str], str]:
    """Adapter ``(prompt, image_ref) -> text`` used by the prompt optimizer and miner."""
    def call(prompt: str, image_ref: str) -> str:
        rid = hashlib.sha256(f"{image_ref}\0{prompt}".encode()).hexdigest()[:16]
        return client.infer(InferenceRequest(prompt, image_ref, model, rid)).text

    return call


# ---------------------------------------------------------------------------
# mock service

# image_ref -> response text, or a callable of the prompt text
Script = Mapping[str, Any]


class MockInferenceServer:
    """Serves scripted completions keyed by image_ref on a local port.

    ``fail_first`` answers the first k requests with HTTP 503 to exercise
    retries; ``delay_s`` sleeps before answering.
    """

    def __init__(self, script: Script, port: int = 0, *, fail_first: int = 0, delay_s: float = 0.0):
        if not script:
            raise ValueError("script must not be empty")
        self.script = dict(script)
        self.fail_first = fail_first
        self.delay_s = delay_s
        self.log: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self._count = 0
        handler = self._make_handler()
        try:
            self._server = ThreadingHTTPServer(("127.0.0.1", port), handler)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"port {port} is already in use") from None
            raise
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self) -> MockInferenceServer:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _make_handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, code: int, payload: dict[str, Any]) -> None:
                data = json.dumps(payload).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                if server.delay_s:
                    time.sleep(server.delay_s)
                with server._lock:
                    server._count += 1
                    failing = server._count <= server.fail_first
                if failing:
                    return self._send(503, {"error": {"message": "scripted failure"}})
                if self.path != CHAT_PATH:
                    return self._send(404, {"error": {"message": f"no route {self.path}"}})
                try:
                    body = json.loads(raw)
                    content = body["messages"][-1]["content"]
                    prompt = next(c["text"] for c in content if c["type"] == "text")
                    ref = next(c["image_url"]["url"] for c in content if c["type"] == "image_url")
                except (ValueError, KeyError, IndexError, TypeError, StopIteration):
                    return self._send(400, {"error": {"message": "malformed request"}})
                with server._lock:
                    server.log.append(body)
                entry = server.script.get(ref)
                if entry is None:
                    return self._send(404, {"error": {"message": f"unscripted image_ref {ref!r}"}})
                text = entry(prompt) if callable(entry) else entry
                self._send(
                    200,
                    {
                        "id": body.get("request_id", ""),
                        "object": "chat.completion",
                        "model": body.get("model", ""),
                        "choices": [
                            {
                                "index": 0,
                                "finish_reason": "stop",
                                "logprobs": None,
                                "message": {"role": "assistant", "content": text},
                            }
                        ],
                    },
                )

        return Handler


def mock_inference_server(script: Script, port: int = 0, **kw) -> MockInferenceServer:
    return MockInferenceServer(script, port, **kw)
