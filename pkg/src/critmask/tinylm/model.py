"""A small autoregressive transformer in float64 numpy with exact analytic gradients.

The model exists to verify loss/gradient math and run desk-scale experiments,
not to be fast. Everything is deterministic: initialization comes from a
seeded generator, forward passes are pure functions of the parameters, and
gradient accumulation is order-fixed.

Architecture: learned token + position embeddings, pre-RMSNorm causal
multi-head self-attention and GELU feed-forward blocks with residuals, a
final RMSNorm, and an output projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.special import erf

from ..core import DataError

_NORM_EPS = 1e-6
_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int
    embed_dim: int
    n_heads: int
    n_layers: int
    ffn_dim: int
    seed: int

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads != 0:
            raise DataError("embed_dim must be divisible by n_heads")
        for name in ("vocab_size", "context_len", "embed_dim", "n_heads", "n_layers", "ffn_dim"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")


class ModelParams:
    """Parameter container; mutable tensors, immutable shape config."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig) -> "ModelParams":
        rng = np.random.default_rng(cfg.seed)
        d, f, v = cfg.embed_dim, cfg.ffn_dim, cfg.vocab_size

        def w(*shape: int, scale: float = 0.1) -> np.ndarray:
            return rng.normal(0.0, scale, size=shape)

        params: dict[str, np.ndarray] = {
            "tok_emb": w(v, d),
            "pos_emb": w(cfg.context_len, d),
        }
        for i in range(cfg.n_layers):
            params[f"l{i}.att_norm_g"] = np.ones(d)
            for name in ("wq", "wk", "wv", "wo"):
                params[f"l{i}.{name}"] = w(d, d)
            params[f"l{i}.ffn_norm_g"] = np.ones(d)
            params[f"l{i}.w1"] = w(d, f)
            params[f"l{i}.b1"] = np.zeros(f)
            params[f"l{i}.w2"] = w(f, d)
            params[f"l{i}.b2"] = np.zeros(d)
        params["out_norm_g"] = np.ones(d)
        params["w_out"] = w(d, v)
        return cls(cfg, params)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.params.items()})


def _rmsnorm(x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)
    return x / rms * g, rms


def _rmsnorm_backward(
    dy: np.ndarray, x: np.ndarray, g: np.ndarray, rms: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    n = x / rms
    dg = np.sum(dy * n, axis=tuple(range(dy.ndim - 1)))
    dn = dy * g
    d = x.shape[-1]
    dx = dn / rms - x * np.sum(dn * x, axis=-1, keepdims=True) / (d * rms**3)
    return dx, dg


def _gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GELU value plus the erf term, which the backward pass reuses."""
    e = erf(x / _SQRT2)
    return 0.5 * x * (1.0 + e), e


def _gelu_grad(x: np.ndarray, e: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + e) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def forward(
    model: ModelParams,
    token_ids: np.ndarray | list[int],
    *,
    want_cache: bool = False,
    want_attention: bool = False,
):
    """Per-position logit rows for one sequence or a batch.

    1D input of length T yields [T, vocab] logits; 2D [B, T] yields [B, T, vocab].
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise DataError("token_ids must be a nonempty sequence")
    if ids.shape[1] > model.cfg.context_len:
        raise DataError(
            f"sequence length {ids.shape[1]} exceeds context length {model.cfg.context_len}"
        )
    if ids.min() < 0 or ids.max() >= model.cfg.vocab_size:
        raise DataError("token id out of vocabulary range")
    logits, cache, att = _forward_batch(model, ids, want_attention=want_attention)
    if single:
        logits = logits[0]
        if att is not None:
            att = att[0]
    if want_cache and want_attention:
        return logits, cache, att
    if want_cache:
        return logits, cache
    if want_attention:
        return logits, att
    return logits


def _forward_batch(model: ModelParams, ids: np.ndarray, *, want_attention: bool = False):
    cfg = model.cfg
    p = model.params
    b, t = ids.shape
    hd = cfg.embed_dim // cfg.n_heads
    gamma = 1.0 / np.sqrt(hd)
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)

    x = p["tok_emb"][ids] + p["pos_emb"][:t]
    cache: dict = {"ids": ids, "layers": []}
    last_att = None
    for i in range(cfg.n_layers):
        lc: dict = {"x_in": x}
        a, a_rms = _rmsnorm(x, p[f"l{i}.att_norm_g"])
        lc["a"], lc["a_rms"] = a, a_rms
        q = _split_heads(a @ p[f"l{i}.wq"], cfg.n_heads)
        k = _split_heads(a @ p[f"l{i}.wk"], cfg.n_heads)
        v = _split_heads(a @ p[f"l{i}.wv"], cfg.n_heads)
        scores = (q @ k.swapaxes(-1, -2)) * gamma
        scores = np.where(mask, -np.inf, scores)
        att = _softmax_lastdim(scores)
        oh = att @ v
        merged = _merge_heads(oh)
        o = merged @ p[f"l{i}.wo"]
        lc.update(q=q, k=k, v=v, att=att, merged=merged)
        x = x + o
        lc["x_mid"] = x
        bnorm, b_rms = _rmsnorm(x, p[f"l{i}.ffn_norm_g"])
        lc["b"], lc["b_rms"] = bnorm, b_rms
        h1 = bnorm @ p[f"l{i}.w1"] + p[f"l{i}.b1"]
        h, h_erf = _gelu(h1)
        lc["h1"], lc["h"], lc["h_erf"] = h1, h, h_erf
        x = x + h @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
        cache["layers"].append(lc)
        if i == cfg.n_layers - 1:
            last_att = att
    cache["x_final"] = x
    fnorm, f_rms = _rmsnorm(x, p["out_norm_g"])
    cache["f"], cache["f_rms"] = fnorm, f_rms
    logits = fnorm @ p["w_out"]
    return logits, cache, (last_att if want_attention else None)


def _softmax_lastdim(scores: np.ndarray) -> np.ndarray:
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def backward(model: ModelParams, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients for a batched forward pass, given dLoss/dlogits."""
    cfg = model.cfg
    p = model.params
    ids = cache["ids"]
    b, t = ids.shape
    hd = cfg.embed_dim // cfg.n_heads
    gamma = 1.0 / np.sqrt(hd)
    if dlogits.ndim == 2:
        dlogits = dlogits[None, :, :]
    grads: dict[str, np.ndarray] = {}

    def flat_outer(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        # sum over batch and position of x_t^T y_t
        return x.reshape(-1, x.shape[-1]).T @ y.reshape(-1, y.shape[-1])

    f = cache["f"]
    grads["w_out"] = flat_outer(f, dlogits)
    df = dlogits @ p["w_out"].T
    dx, grads["out_norm_g"] = _rmsnorm_backward(df, cache["x_final"], p["out_norm_g"], cache["f_rms"])

    for i in reversed(range(cfg.n_layers)):
        lc = cache["layers"][i]
        # Feed-forward block.
        grads[f"l{i}.b2"] = dx.sum(axis=(0, 1))
        grads[f"l{i}.w2"] = flat_outer(lc["h"], dx)
        dh = dx @ p[f"l{i}.w2"].T
        dh1 = dh * _gelu_grad(lc["h1"], lc["h_erf"])
        grads[f"l{i}.b1"] = dh1.sum(axis=(0, 1))
        grads[f"l{i}.w1"] = flat_outer(lc["b"], dh1)
        db = dh1 @ p[f"l{i}.w1"].T
        dx_mid, grads[f"l{i}.ffn_norm_g"] = _rmsnorm_backward(
            db, lc["x_mid"], p[f"l{i}.ffn_norm_g"], lc["b_rms"]
        )
        dx_mid = dx_mid + dx  # residual
        # Attention block.
        grads[f"l{i}.wo"] = flat_outer(lc["merged"], dx_mid)
        doh = _split_heads(dx_mid @ p[f"l{i}.wo"].T, cfg.n_heads)
        att = lc["att"]
        datt = doh @ lc["v"].swapaxes(-1, -2)
        dv = att.swapaxes(-1, -2) @ doh
        dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
        dq = (dscores @ lc["k"]) * gamma
        dk = (dscores.swapaxes(-1, -2) @ lc["q"]) * gamma
        dq_m, dk_m, dv_m = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        da = dq_m @ p[f"l{i}.wq"].T + dk_m @ p[f"l{i}.wk"].T + dv_m @ p[f"l{i}.wv"].T
        grads[f"l{i}.wq"] = flat_outer(lc["a"], dq_m)
        grads[f"l{i}.wk"] = flat_outer(lc["a"], dk_m)
        grads[f"l{i}.wv"] = flat_outer(lc["a"], dv_m)
        dx_attn_in, grads[f"l{i}.att_norm_g"] = _rmsnorm_backward(
            da, lc["x_in"], p[f"l{i}.att_norm_g"], lc["a_rms"]
        )
        dx = dx_mid + dx_attn_in

    grads["pos_emb"] = np.zeros_like(p["pos_emb"])
    grads["pos_emb"][:t] = dx.sum(axis=0)
    grads["tok_emb"] = np.zeros_like(p["tok_emb"])
    np.add.at(grads["tok_emb"], ids.reshape(-1), dx.reshape(-1, cfg.embed_dim))
    return grads


def attention_received(model: ModelParams, token_ids: np.ndarray | list[int]) -> np.ndarray:
    """Per-token received-attention score.

    Score at position t: mean over final-layer heads of the attention mass
    directed at t from all strictly later query positions, divided by the
    number of later positions. The last position scores 0 by convention.
    """
    _, att = forward(model, token_ids, want_attention=True)
    h, t, _ = att.shape
    scores = np.zeros(t)
    for pos in range(t - 1):
        later = att[:, pos + 1 :, pos]  # [heads, n_later]
        scores[pos] = later.sum(axis=1).mean() / (t - 1 - pos)
    return scores


class DecodeSession:
    """Lockstep incremental decoding over a batch of rows with per-row lengths.

    Each row holds an independent prefix; per-layer key/value caches make one
    generation step cost O(current length) per row instead of a full re-run.
    Finished rows are simply dropped from the active set by the caller.
    """

    def __init__(self, model: ModelParams, prefixes: list[list[int]], capacity: int):
        cfg = model.cfg
        if capacity > cfg.context_len:
            capacity = cfg.context_len
        self.model = model
        self.capacity = capacity
        nb = len(prefixes)
        hd = cfg.embed_dim // cfg.n_heads
        self.lengths = np.array([len(p) for p in prefixes], dtype=np.int64)
        if self.lengths.min() < 1:
            raise DataError("empty prefix")
        if self.lengths.max() > capacity:
            raise DataError(
                f"prefix length {int(self.lengths.max())} exceeds capacity {capacity}"
            )
        self.ids = np.zeros((nb, capacity), dtype=np.int64)
        for r, prefix in enumerate(prefixes):
            self.ids[r, : len(prefix)] = prefix
        self.k_cache = [
            np.zeros((nb, cfg.n_heads, capacity, hd)) for _ in range(cfg.n_layers)
        ]
        self.v_cache = [
            np.zeros((nb, cfg.n_heads, capacity, hd)) for _ in range(cfg.n_layers)
        ]
        self.last_logits = np.zeros((nb, cfg.vocab_size))
        self._prefill()

    def _prefill(self) -> None:
        t = int(self.lengths.max())
        logits, cache, _ = _forward_batch(self.model, self.ids[:, :t])
        for i in range(self.model.cfg.n_layers):
            lc = cache["layers"][i]
            self.k_cache[i][:, :, :t, :] = lc["k"]
            self.v_cache[i][:, :, :t, :] = lc["v"]
        rows = np.arange(self.ids.shape[0])
        self.last_logits = logits[rows, self.lengths - 1]

    def can_extend(self, rows: np.ndarray) -> np.ndarray:
        return self.lengths[rows] < self.capacity

    def append(self, rows: np.ndarray, token_ids: np.ndarray) -> None:
        """Append one token per given row and refresh those rows' next-token logits."""
        if len(rows) == 0:
            return
        cfg = self.model.cfg
        p = self.model.params
        hd = cfg.embed_dim // cfg.n_heads
        gamma = 1.0 / np.sqrt(hd)
        pos = self.lengths[rows]
        if np.any(pos >= self.capacity):
            raise DataError("decode exceeded session capacity")
        self.ids[rows, pos] = token_ids

        x = p["tok_emb"][token_ids] + p["pos_emb"][pos]  # [R, D]
        kmax = int(pos.max()) + 1
        key_idx = np.arange(kmax)
        key_mask = key_idx[None, :] > pos[:, None]  # [R, kmax], True = masked
        for i in range(cfg.n_layers):
            a, _ = _rmsnorm(x, p[f"l{i}.att_norm_g"])
            q = (a @ p[f"l{i}.wq"]).reshape(-1, cfg.n_heads, hd)
            k = (a @ p[f"l{i}.wk"]).reshape(-1, cfg.n_heads, hd)
            v = (a @ p[f"l{i}.wv"]).reshape(-1, cfg.n_heads, hd)
            self.k_cache[i][rows, :, pos, :] = k
            self.v_cache[i][rows, :, pos, :] = v
            keys = self.k_cache[i][rows][:, :, :kmax, :]  # [R, H, kmax, hd]
            vals = self.v_cache[i][rows][:, :, :kmax, :]
            scores = (keys @ q[..., None])[..., 0] * gamma  # [R, H, kmax]
            scores = np.where(key_mask[:, None, :], -np.inf, scores)
            att = _softmax_lastdim(scores)
            oh = (att[:, :, None, :] @ vals)[:, :, 0, :]  # [R, H, hd]
            x = x + oh.reshape(-1, cfg.embed_dim) @ p[f"l{i}.wo"]
            bnorm, _ = _rmsnorm(x, p[f"l{i}.ffn_norm_g"])
            h, _ = _gelu(bnorm @ p[f"l{i}.w1"] + p[f"l{i}.b1"])
            x = x + h @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
        fnorm, _ = _rmsnorm(x, p["out_norm_g"])
        self.last_logits[rows] = fnorm @ p["w_out"]
        self.lengths[rows] = pos + 1


def save_checkpoint(model: ModelParams, vocab: tuple[str, ...], path: str | Path) -> None:
    """Versioned tensor dump with a JSON header carrying config and vocabulary."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "vocab": list(vocab),
    }
    arrays = {f"param::{k}": v for k, v in model.params.items()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, tuple[str, ...]]:
    with np.load(path) as data:
        if "__meta__" not in data:
            raise DataError(f"{path}: not a model checkpoint (missing header)")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        cfg = ModelConfig(**meta["config"])
        params = {
            key[len("param::") :]: data[key] for key in data.files if key.startswith("param::")
        }
    model = ModelParams(cfg, params)
    expected = set(ModelParams.init(cfg).params)
    if set(params) != expected:
        raise DataError(f"{path}: checkpoint parameter set does not match config")
    return model, tuple(meta["vocab"])
