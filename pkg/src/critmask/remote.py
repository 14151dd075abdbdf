"""HTTP completion-backend client and a reference server for the wire contract.

Wire contract (JSON bodies):

  POST {endpoint}/v1/completions
    {"model": str, "prompt": str, "max_tokens": int, "temperature": float,
     "top_logprobs": int, "echo": bool, "mode": "greedy"|"sampled",
     "seed": int?, "forced_token_ids": [int]?}
  -> {"tokens": [{"text", "id", "logprob", "top": [{"text", "id", "logprob"}]}],
      "prompt_tokens": [...]           # present when echo is set
      "finished": bool, "stop_reason": str}

  GET {endpoint}/v1/capabilities
  -> {"tag", "max_topk", "supports_force_score", "supports_attention", "max_context"}

Authentication is a bearer token read from an environment variable. Transport
failures are retried with exponential backoff; request keys make retries
idempotent. Backends that cannot return ranked per-position top-k
log-probabilities are rejected at descriptor validation, not approximated.
"""

from __future__ import annotations

import json
import os
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

import requests

from .core import BackendError, CapabilityError, DataError
from .generator import (
    Backend,
    BackendDescriptor,
    DecodeMode,
    DecodeRequest,
    Generation,
    TopAlt,
)

DEFAULT_TOKEN_ENV = "CRITMASK_API_TOKEN"


class RemoteBackend:
    """Client for a completion service that returns per-token top-k logprobs."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        token_env: str = DEFAULT_TOKEN_ENV,
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 0.1,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._session = session or requests.Session()
        token = os.environ.get(token_env, "")
        self._headers = {"Content-Type": "application/json"}
        if token:
            self._headers["Authorization"] = f"Bearer {token}"
        self._descriptor = self._fetch_descriptor()

    def _fetch_descriptor(self) -> BackendDescriptor:
        payload = self._http("GET", "/v1/capabilities", None)
        try:
            return BackendDescriptor(
                tag=str(payload["tag"]),
                max_topk=int(payload["max_topk"]),
                supports_force_score=bool(payload["supports_force_score"]),
                supports_attention=bool(payload["supports_attention"]),
                max_context=int(payload["max_context"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed capabilities response: {exc}") from exc

    def descriptor(self) -> BackendDescriptor:
        return self._descriptor

    def _http(self, method: str, path: str, body: dict | None) -> dict:
        url = self.endpoint + path
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = self._session.request(
                    method,
                    url,
                    data=None if body is None else json.dumps(body),
                    headers=self._headers,
                    timeout=self.timeout,
                )
                if resp.status_code >= 500:
                    raise BackendError(f"{url}: server error {resp.status_code}")
                if resp.status_code >= 400:
                    raise BackendError(f"{url}: request rejected ({resp.status_code}): {resp.text}")
                return resp.json()
            except (requests.ConnectionError, requests.Timeout, BackendError) as exc:
                if isinstance(exc, BackendError) and "rejected" in str(exc):
                    raise  # 4xx is not retryable
                last_error = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff * (2**attempt))
        raise BackendError(f"{url}: failed after {self.max_retries} attempts: {last_error}")

    def generate(self, request: DecodeRequest) -> Generation:
        body = {
            "model": self.model,
            "prompt": request.prompt,
            "max_tokens": request.max_new_tokens,
            "top_logprobs": self._descriptor.max_topk,
            "echo": False,
            "mode": request.mode.kind,
        }
        if request.mode.kind == "sampled":
            body["temperature"] = request.mode.temperature
            body["seed"] = request.mode.seed
        if request.forced_prefix:
            body["forced_token_ids"] = list(request.forced_prefix)
        payload = self._http("POST", "/v1/completions", body)
        return _generation_from_payload(payload)

    def generate_many(self, requests_: Sequence[DecodeRequest]) -> list[Generation]:
        return [self.generate(r) for r in requests_]

    def force_score(self, prompt: str, response_text: str):
        """Score a fixed text under the remote model via echo."""
        if not self._descriptor.supports_force_score:
            raise CapabilityError(f"backend {self._descriptor.tag!r} cannot force-score")
        body = {
            "model": self.model,
            "prompt": prompt + response_text,
            "max_tokens": 0,
            "top_logprobs": self._descriptor.max_topk,
            "echo": True,
            "mode": "greedy",
        }
        payload = self._http("POST", "/v1/completions", body)
        tokens = payload.get("prompt_tokens")
        if tokens is None:
            raise BackendError("echo response missing prompt_tokens")
        texts = [str(t["text"]) for t in tokens]
        split = _boundary_index(texts, prompt)
        scored = tokens[split:]
        return (
            tuple(str(t["text"]) for t in scored),
            tuple(int(t["id"]) for t in scored),
            tuple(min(0.0, float(t["logprob"])) for t in scored),
            tuple(_alts_from(t) for t in scored),
        )


def _boundary_index(texts: list[str], prompt: str) -> int:
    consumed = 0
    for i, text in enumerate(texts):
        if consumed == len(prompt):
            return i
        consumed += len(text)
        if consumed > len(prompt):
            break
    if consumed == len(prompt):
        return len(texts)
    raise DataError(
        "prompt/response boundary does not align with a token boundary under the "
        "remote tokenization"
    )


def _alts_from(token_payload: dict) -> tuple[TopAlt, ...]:
    return tuple(
        TopAlt(str(a["text"]), int(a["id"]), float(a["logprob"]))
        for a in token_payload.get("top", [])
    )


def _generation_from_payload(payload: dict) -> Generation:
    try:
        tokens = payload["tokens"]
        return Generation(
            token_texts=tuple(str(t["text"]) for t in tokens),
            token_ids=tuple(int(t["id"]) for t in tokens),
            chosen_logprob=tuple(min(0.0, float(t["logprob"])) for t in tokens),
            topk=tuple(_alts_from(t) for t in tokens),
            finished=bool(payload["finished"]),
            stop_reason=str(payload.get("stop_reason", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendError(f"malformed completion response: {exc}") from exc


class BackendServer:
    """Reference HTTP server exposing a local backend over the wire contract."""

    def __init__(self, backend: Backend, host: str = "127.0.0.1", port: int = 0):
        self.backend = backend
        handler = _make_handler(backend)
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "BackendServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self) -> "BackendServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def _make_handler(backend: Backend):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):  # keep test output quiet
            pass

        def _send(self, status: int, payload: dict) -> None:
            data = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/v1/capabilities":
                d = backend.descriptor()
                self._send(
                    200,
                    {
                        "tag": d.tag,
                        "max_topk": d.max_topk,
                        "supports_force_score": d.supports_force_score,
                        "supports_attention": False,  # tensors do not travel over the wire
                        "max_context": d.max_context,
                    },
                )
            else:
                self._send(404, {"error": f"unknown path {self.path}"})

        def do_POST(self):
            if self.path != "/v1/completions":
                self._send(404, {"error": f"unknown path {self.path}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length).decode("utf-8"))
                self._send(200, _handle_completion(backend, body))
            except (DataError, CapabilityError) as exc:
                self._send(400, {"error": str(exc)})
            except Exception as exc:  # noqa: BLE001 - surface anything as a 500
                self._send(500, {"error": str(exc)})

    return Handler


def _handle_completion(backend: Backend, body: dict) -> dict:
    echo = bool(body.get("echo", False))
    prompt = str(body["prompt"])
    if echo and int(body.get("max_tokens", 0)) == 0:
        if not (hasattr(backend, "force_score") and hasattr(backend, "tokenize")):
            raise CapabilityError("backend cannot force-score")
        # Echo-score the whole prompt. The first token has no context position,
        # so it is reported with logprob 0 and an empty top-k.
        ids = backend.tokenize(prompt)  # type: ignore[attr-defined]
        if len(ids) < 2:
            raise DataError("echo scoring needs at least two tokens")
        first_text = backend.tokenizer.texts([ids[0]])[0]  # type: ignore[attr-defined]
        texts, tids, logprobs, topk = backend.force_score(  # type: ignore[attr-defined]
            first_text, prompt[len(first_text):]
        )
        prompt_tokens = [{"text": first_text, "id": ids[0], "logprob": 0.0, "top": []}]
        prompt_tokens += [
            {
                "text": t,
                "id": i,
                "logprob": lp,
                "top": [{"text": a.text, "id": a.token_id, "logprob": a.logprob} for a in alts],
            }
            for t, i, lp, alts in zip(texts, tids, logprobs, topk)
        ]
        return {"tokens": [], "prompt_tokens": prompt_tokens, "finished": True, "stop_reason": "echo"}
    mode = str(body.get("mode", "greedy"))
    decode_mode = (
        DecodeMode("greedy")
        if mode == "greedy"
        else DecodeMode("sampled", temperature=float(body["temperature"]), seed=int(body["seed"]))
    )
    request = DecodeRequest(
        key="remote",
        prompt=prompt,
        forced_prefix=tuple(int(x) for x in body.get("forced_token_ids", [])),
        max_new_tokens=int(body["max_tokens"]),
        mode=decode_mode,
    )
    gen = backend.generate(request)
    return {
        "tokens": [
            {
                "text": gen.token_texts[t],
                "id": gen.token_ids[t],
                "logprob": gen.chosen_logprob[t],
                "top": [
                    {"text": a.text, "id": a.token_id, "logprob": a.logprob}
                    for a in gen.topk[t]
                ],
            }
            for t in range(len(gen.token_ids))
        ],
        "finished": gen.finished,
        "stop_reason": gen.stop_reason,
    }
