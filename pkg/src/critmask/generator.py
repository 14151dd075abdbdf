"""Uniform decoding abstraction over backends.

A backend produces generations with per-position chosen log-probabilities and
ranked top-k alternatives. The in-repo toy backend decodes whole request
batches in lockstep (one vectorized forward per step), which is where the
batched-annotation speedup comes from; remote backends parallelize over HTTP
connections instead. ``run_batch`` guarantees order-independent assembly and
per-request error isolation, so results never depend on scheduling.
"""

from __future__ import annotations

import hashlib
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple, Protocol, Sequence, runtime_checkable

import numpy as np

from .core import BackendError, CapabilityError, DataError
from .tinylm.losses import log_softmax
from .tinylm.model import DecodeSession, ModelParams, attention_received, forward
from .tinylm.tokenizer import ToyTokenizer

log = logging.getLogger(__name__)

# Requests are grouped into fixed-size chunks regardless of parallelism so the
# arithmetic inside a chunk, and therefore every output byte, is identical for
# any worker count.
BATCH_CHUNK = 64

GREEDY = "greedy"
SAMPLED = "sampled"


class TopAlt(NamedTuple):
    text: str
    token_id: int
    logprob: float


@dataclass(frozen=True)
class BackendDescriptor:
    tag: str
    max_topk: int
    supports_force_score: bool
    supports_attention: bool
    max_context: int

    def validate_for(self, k: int) -> None:
        if self.max_topk < k:
            raise CapabilityError(
                f"backend {self.tag!r} stores top-{self.max_topk} alternatives, need k={k}"
            )


@dataclass(frozen=True)
class DecodeMode:
    kind: str  # "greedy" | "sampled"
    temperature: float | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in (GREEDY, SAMPLED):
            raise DataError(f"unknown decode mode {self.kind!r}")
        if self.kind == SAMPLED:
            if self.temperature is None or self.temperature <= 0:
                raise DataError("sampled decoding requires temperature > 0; use greedy for argmax")
            if self.seed is None:
                raise DataError("sampled decoding requires a seed")


@dataclass(frozen=True)
class DecodeRequest:
    key: str
    prompt: str
    forced_prefix: tuple[int, ...] = ()
    max_new_tokens: int = 1
    mode: DecodeMode = DecodeMode(GREEDY)

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise DataError("max_new_tokens must be >= 1")


@dataclass(frozen=True)
class Generation:
    """Newly generated tokens for one request (the forced prefix is not echoed)."""

    token_texts: tuple[str, ...]
    token_ids: tuple[int, ...]
    chosen_logprob: tuple[float, ...]
    topk: tuple[tuple[TopAlt, ...], ...]
    finished: bool
    stop_reason: str

    @property
    def text(self) -> str:
        return "".join(self.token_texts)


@dataclass(frozen=True)
class Trajectory:
    """A decoded response with per-position log-probabilities and alternatives."""

    sample_id: str
    prompt: str
    token_texts: tuple[str, ...]
    token_ids: tuple[int, ...]
    chosen_logprob: tuple[float, ...]
    topk: tuple[tuple[TopAlt, ...], ...]
    decode_mode: str
    finished: bool

    def __post_init__(self) -> None:
        n = len(self.token_texts)
        if not (len(self.token_ids) == len(self.chosen_logprob) == len(self.topk) == n):
            raise DataError(f"trajectory {self.sample_id!r}: per-position lists disagree")
        if self.decode_mode not in (GREEDY, SAMPLED):
            raise DataError(f"unknown decode mode {self.decode_mode!r}")
        if any(lp > 0 for lp in self.chosen_logprob):
            raise DataError("chosen log-probabilities must be <= 0")
        for t, alts in enumerate(self.topk):
            for a, b in zip(alts, alts[1:]):
                if (b.logprob, -b.token_id) > (a.logprob, -a.token_id):
                    raise DataError(f"topk at position {t} not sorted by (logprob desc, id asc)")
            if self.decode_mode == GREEDY and alts and alts[0].token_id != self.token_ids[t]:
                raise DataError(f"greedy trajectory: chosen token at {t} is not rank-1")

    @property
    def text(self) -> str:
        return "".join(self.token_texts)

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class RequestFailure:
    key: str
    error: str


@runtime_checkable
class Backend(Protocol):
    def descriptor(self) -> BackendDescriptor: ...

    def generate(self, request: DecodeRequest) -> Generation: ...

    def generate_many(self, requests: Sequence[DecodeRequest]) -> list[Generation]: ...

    def force_score(
        self, prompt: str, response_text: str
    ) -> tuple[tuple[str, ...], tuple[int, ...], tuple[float, ...], tuple[tuple[TopAlt, ...], ...]]: ...


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from arbitrary labels (run seed, sample id, attempt...)."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _rank_topk(logprob_row: np.ndarray, depth: int, texts_of) -> tuple[TopAlt, ...]:
    """Top ``depth`` alternatives ranked by (logprob desc, token_id asc)."""
    v = logprob_row.shape[0]
    depth = min(depth, v)
    # argsort on (-logprob, id): stable sort over ids is implicit since ids are the index order.
    order = np.argsort(-logprob_row, kind="stable")[:depth]
    return tuple(TopAlt(texts_of(int(i)), int(i), float(logprob_row[int(i)])) for i in order)


class ToyBackend:
    """Decoding backend over the in-repo toy model.

    Generation stops at <eos>, at the completion of a ``#### <number>`` answer
    group, or at the token budget, whichever comes first. A lock serializes
    decode calls so the backend stays safe under concurrent submission.
    """

    def __init__(
        self,
        model: ModelParams,
        tokenizer: ToyTokenizer,
        *,
        tag: str = "toy",
        store_topk: int = 8,
    ):
        if model.cfg.vocab_size != tokenizer.vocab_size:
            raise DataError("model and tokenizer vocabulary sizes disagree")
        self.model = model
        self.tokenizer = tokenizer
        self.tag = tag
        self.store_topk = min(store_topk, tokenizer.vocab_size)
        self._lock = threading.Lock()
        self._marker_id = tokenizer.token_to_id.get("####")

    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(
            tag=self.tag,
            max_topk=self.store_topk,
            supports_force_score=True,
            supports_attention=True,
            max_context=self.model.cfg.context_len,
        )

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    # -- generation ---------------------------------------------------------

    def generate(self, request: DecodeRequest) -> Generation:
        return self.generate_many([request])[0]

    def generate_many(self, requests: Sequence[DecodeRequest]) -> list[Generation]:
        with self._lock:
            return self._generate_locked(list(requests))

    def _generate_locked(self, requests: list[DecodeRequest]) -> list[Generation]:
        if not requests:
            return []
        prefixes: list[list[int]] = []
        budgets: list[int] = []
        for req in requests:
            prefix = self.tokenizer.encode(req.prompt) + list(req.forced_prefix)
            if not prefix:
                raise DataError(f"request {req.key!r}: empty prompt")
            if len(prefix) >= self.model.cfg.context_len:
                raise DataError(
                    f"request {req.key!r}: prompt length {len(prefix)} exceeds context "
                    f"{self.model.cfg.context_len}"
                )
            prefixes.append(prefix)
            budgets.append(req.max_new_tokens)
        capacity = min(
            self.model.cfg.context_len, max(len(p) + b for p, b in zip(prefixes, budgets))
        )
        session = DecodeSession(self.model, prefixes, capacity)
        rngs = [
            np.random.default_rng(req.mode.seed) if req.mode.kind == SAMPLED else None
            for req in requests
        ]
        watchers = [_StopWatcher(self.tokenizer, self._marker_id) for _ in requests]
        outs: list[_GenAccum] = [_GenAccum() for _ in requests]
        active = list(range(len(requests)))
        while active:
            rows = np.array(active)
            logprobs = log_softmax(session.last_logits[rows])
            continue_rows: list[int] = []
            continue_tokens: list[int] = []
            for j, r in enumerate(active):
                req = requests[r]
                row = logprobs[j]
                if req.mode.kind == GREEDY:
                    tok = int(np.argmax(row))  # ties resolve to the lowest id
                else:
                    temp = float(req.mode.temperature)  # type: ignore[arg-type]
                    scaled = session.last_logits[rows[j]] / temp
                    p = np.exp(scaled - scaled.max())
                    p /= p.sum()
                    tok = int(rngs[r].choice(len(p), p=p))  # type: ignore[union-attr]
                out = outs[r]
                watcher = watchers[r]
                if tok == self.tokenizer.eos_id:
                    out.finish("eos")
                    continue
                if watcher.would_stop(tok):
                    out.finish("answer")
                    continue
                out.token_ids.append(tok)
                out.chosen_logprob.append(min(0.0, float(row[tok])))
                out.topk.append(_rank_topk(row, self.store_topk, self._token_text))
                watcher.feed(tok)
                if len(out.token_ids) >= req.max_new_tokens or session.lengths[r] >= session.capacity - 1:
                    out.finish("length")
                else:
                    continue_rows.append(r)
                    continue_tokens.append(tok)
            if continue_rows:
                session.append(np.array(continue_rows), np.array(continue_tokens, dtype=np.int64))
            active = continue_rows
        return [
            Generation(
                token_texts=tuple(self._token_text(t) for t in out.token_ids),
                token_ids=tuple(out.token_ids),
                chosen_logprob=tuple(out.chosen_logprob),
                topk=tuple(out.topk),
                finished=out.stop_reason in ("eos", "answer"),
                stop_reason=out.stop_reason or "length",
            )
            for out in outs
        ]

    def _token_text(self, token_id: int) -> str:
        tok = self.tokenizer.vocab[token_id]
        return "" if tok == self.tokenizer.vocab[self.tokenizer.eos_id] else tok

    # -- scoring ------------------------------------------------------------

    def force_score(self, prompt: str, response_text: str):
        """Per-position (chosen logprob, topk) along the backend's own tokenization."""
        prompt_ids = self.tokenizer.encode(prompt)
        response_ids = self.tokenizer.encode(response_text)
        if not response_ids:
            raise DataError("force_score: empty response")
        with self._lock:
            logprobs = self._response_logprobs(prompt_ids, response_ids)
        texts = tuple(self._token_text(t) for t in response_ids)
        chosen = tuple(
            min(0.0, float(logprobs[t, tok])) for t, tok in enumerate(response_ids)
        )
        topk = tuple(
            _rank_topk(logprobs[t], self.store_topk, self._token_text)
            for t in range(len(response_ids))
        )
        return texts, tuple(response_ids), chosen, topk

    def _response_logprobs(self, prompt_ids: list[int], response_ids: list[int]) -> np.ndarray:
        ids = prompt_ids + response_ids
        if len(ids) > self.model.cfg.context_len:
            raise DataError(
                f"force_score: sequence length {len(ids)} exceeds context "
                f"{self.model.cfg.context_len}"
            )
        logits = forward(self.model, ids)
        start = len(prompt_ids) - 1
        return log_softmax(logits[start : start + len(response_ids)])

    def response_distributions(self, prompt: str, response_ids: Sequence[int]) -> np.ndarray:
        """Full next-token probability rows at each response position."""
        prompt_ids = self.tokenizer.encode(prompt)
        with self._lock:
            lp = self._response_logprobs(prompt_ids, list(response_ids))
        return np.exp(lp)

    def attention_received_scores(self, prompt: str, response_ids: Sequence[int]) -> np.ndarray:
        """attention_received over prompt+response, sliced to response positions."""
        prompt_ids = self.tokenizer.encode(prompt)
        ids = prompt_ids + list(response_ids)
        with self._lock:
            scores = attention_received(self.model, ids)
        return scores[len(prompt_ids) :]


class _GenAccum:
    __slots__ = ("token_ids", "chosen_logprob", "topk", "stop_reason")

    def __init__(self):
        self.token_ids: list[int] = []
        self.chosen_logprob: list[float] = []
        self.topk: list[tuple[TopAlt, ...]] = []
        self.stop_reason: str | None = None

    @property
    def finished(self) -> bool:
        return self.stop_reason is not None

    def finish(self, reason: str) -> None:
        self.stop_reason = reason


class _StopWatcher:
    """Tracks the ``#### <number>`` answer-group stop condition."""

    def __init__(self, tokenizer: ToyTokenizer, marker_id: int | None):
        self.tokenizer = tokenizer
        self.marker_id = marker_id
        self.after_marker = False
        self.digits_seen = 0
        self.dot_seen = False

    def feed(self, token_id: int) -> None:
        if self.marker_id is not None and token_id == self.marker_id:
            self.after_marker = True
            self.digits_seen = 0
            self.dot_seen = False
            return
        if not self.after_marker:
            return
        tok = self.tokenizer.vocab[token_id]
        if token_id in self.tokenizer.digit_ids:
            self.digits_seen += 1
        elif self.digits_seen == 0 and tok in (" ", "-", "+"):
            pass  # leading space or sign before the number
        elif self.digits_seen > 0 and tok == "." and not self.dot_seen:
            self.dot_seen = True
        else:
            self.after_marker = False  # malformed group; keep generating

    def would_stop(self, token_id: int) -> bool:
        """True when the pending answer group is complete and this token would leave it."""
        if not self.after_marker or self.digits_seen == 0:
            return False
        if token_id in self.tokenizer.digit_ids:
            return False
        tok = self.tokenizer.vocab[token_id]
        if tok == "." and not self.dot_seen:
            return False
        return True


def greedy_decode(
    backend: Backend,
    prompt: str,
    max_new_tokens: int,
    *,
    sample_id: str = "",
) -> Trajectory:
    """Greedy trajectory for a prompt; every chosen token is the rank-1 alternative."""
    request = DecodeRequest(
        key=f"greedy|{sample_id}", prompt=prompt, max_new_tokens=max_new_tokens
    )
    gen = backend.generate(request)
    return _to_trajectory(sample_id, prompt, gen, GREEDY)


def sample_decode(
    backend: Backend,
    prompt: str,
    temperature: float,
    seed: int,
    max_new_tokens: int,
    *,
    sample_id: str = "",
) -> Trajectory:
    """Temperature sampling; deterministic on the toy backend given the seed."""
    if temperature <= 0:
        raise DataError("temperature must be > 0; use greedy_decode for argmax decoding")
    request = DecodeRequest(
        key=f"sample|{sample_id}|{seed}",
        prompt=prompt,
        max_new_tokens=max_new_tokens,
        mode=DecodeMode(SAMPLED, temperature=temperature, seed=seed),
    )
    gen = backend.generate(request)
    return _to_trajectory(sample_id, prompt, gen, SAMPLED)


def _to_trajectory(sample_id: str, prompt: str, gen: Generation, mode: str) -> Trajectory:
    return Trajectory(
        sample_id=sample_id,
        prompt=prompt,
        token_texts=gen.token_texts,
        token_ids=gen.token_ids,
        chosen_logprob=gen.chosen_logprob,
        topk=gen.topk,
        decode_mode=mode,
        finished=gen.finished,
    )


def topk_alternatives(trajectory: Trajectory, position: int, k: int) -> list[TopAlt]:
    """Ranked alternatives 2..k at a position: the k-1 best non-chosen candidates."""
    if not (0 <= position < trajectory.length):
        raise DataError(f"position {position} out of range")
    stored = trajectory.topk[position]
    chosen = trajectory.token_ids[position]
    others = [alt for alt in stored if alt.token_id != chosen]
    if len(others) < k - 1:
        raise DataError(
            f"position {position}: stored top-k depth {len(stored)} cannot provide "
            f"{k - 1} alternatives"
        )
    return others[: k - 1]


def run_batch(
    backend: Backend,
    requests: Sequence[DecodeRequest],
    parallelism: int = 1,
) -> dict[str, Generation | RequestFailure]:
    """Evaluate requests, keyed by request key; order- and parallelism-independent.

    Individual failures are isolated per key. Requests are dispatched in fixed
    chunks so the result values never depend on the worker count.
    """
    if parallelism < 1:
        raise DataError("parallelism must be >= 1")
    keys = [r.key for r in requests]
    if len(set(keys)) != len(keys):
        raise DataError("duplicate request keys")
    if not requests:
        return {}
    chunks = [list(requests[i : i + BATCH_CHUNK]) for i in range(0, len(requests), BATCH_CHUNK)]
    results: dict[str, Generation | RequestFailure] = {}
    if parallelism == 1:
        chunk_outs = [_run_chunk(backend, chunk) for chunk in chunks]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            chunk_outs = list(pool.map(lambda c: _run_chunk(backend, c), chunks))
    for chunk, outs in zip(chunks, chunk_outs):
        for req, out in zip(chunk, outs):
            results[req.key] = out
    assert len(results) == len(requests)
    return results


def _run_chunk(
    backend: Backend, chunk: list[DecodeRequest]
) -> list[Generation | RequestFailure]:
    try:
        return list(backend.generate_many(chunk))
    except Exception:
        # Isolate the failing request(s) by falling back to one-at-a-time.
        outs: list[Generation | RequestFailure] = []
        for req in chunk:
            try:
                outs.append(backend.generate(req))
            except Exception as exc:
                log.warning("request %s failed: %s", req.key, exc)
                outs.append(RequestFailure(key=req.key, error=str(exc)))
        return outs
