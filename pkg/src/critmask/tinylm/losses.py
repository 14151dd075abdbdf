"""Training objectives and their exact logit-space gradients.

All three objectives reduce per-position cross-entropy terms and differ only
in the per-position weighting, so each gradient is the standard softmax CE
row (p - onehot) scaled per position:

  sft: every unpadded position weighs 1/N (mean CE).
  cft: position t weighs w_t / Z with Z the total batch weight; zero-weight
       positions get exactly-zero gradient rows.
  dft: position t weighs its own detached gold probability over N, so the
       gradient flows only through the CE factor.
"""

from __future__ import annotations

import numpy as np

from ..core import DataError


def softmax_row(logit_row: np.ndarray | list[float]) -> np.ndarray:
    """Probability row for one logit row; invariant under constant shifts."""
    z = np.asarray(logit_row, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise DataError("softmax_row expects a nonempty 1D row")
    if not np.all(np.isfinite(z)):
        raise DataError("softmax_row requires finite logits")
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Stable log-probabilities along the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def token_ce_grad(prob_row: np.ndarray | list[float], gold_index: int) -> np.ndarray:
    """d(-log p_gold)/dlogits for one position: the probability row minus onehot."""
    p = np.asarray(prob_row, dtype=np.float64)
    if p.ndim != 1:
        raise DataError("prob_row must be 1D")
    if not (0 <= gold_index < p.size):
        raise DataError(f"gold index {gold_index} out of range for row of size {p.size}")
    grad = p.copy()
    grad[gold_index] -= 1.0
    return grad


def per_token_ce(logits: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """-log p[gold] at every position; shapes [.., T, V] and [.., T]."""
    lp = log_softmax(logits)
    return -np.take_along_axis(lp, gold[..., None], axis=-1)[..., 0]


def sft_loss(logits: np.ndarray, gold: np.ndarray, padding_mask: np.ndarray) -> float:
    """Mean cross-entropy over unpadded positions."""
    mask = np.asarray(padding_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise DataError("sft_loss: all positions are padded")
    ce = per_token_ce(np.asarray(logits), np.asarray(gold))
    return float(np.sum(ce * mask) / n)


def sft_grad_wrt_logits(logits: np.ndarray, gold: np.ndarray, padding_mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(padding_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise DataError("sft_loss: all positions are padded")
    weights = mask.astype(np.float64) / n
    return _weighted_ce_grad(np.asarray(logits), np.asarray(gold), weights)


def cft_loss(logits: np.ndarray, gold: np.ndarray, weights: np.ndarray) -> float:
    """Weighted mean of per-token CE: sum(w_t * ce_t) / sum(w_t)."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise DataError("cft_loss: negative weight")
    z = float(w.sum())
    if z <= 0:
        raise DataError("cft_loss: total weight is zero")
    ce = per_token_ce(np.asarray(logits), np.asarray(gold))
    return float(np.sum(ce * w) / z)


def cft_grad_wrt_logits(logits: np.ndarray, gold: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-position gradient rows (w_t/Z)(p - onehot); exact zeros where w_t = 0."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise DataError("cft_loss: negative weight")
    z = float(w.sum())
    if z <= 0:
        raise DataError("cft_loss: total weight is zero")
    return _weighted_ce_grad(np.asarray(logits), np.asarray(gold), w / z)


def dft_loss(logits: np.ndarray, gold: np.ndarray, padding_mask: np.ndarray) -> float:
    """Mean over unpadded positions of pbar_gold * CE with pbar detached."""
    mask = np.asarray(padding_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise DataError("dft_loss: all positions are padded")
    logits = np.asarray(logits)
    gold = np.asarray(gold)
    ce = per_token_ce(logits, gold)
    p_gold = np.exp(-ce)  # probability of the gold token
    return float(np.sum(p_gold * ce * mask) / n)


def dft_grad_wrt_logits(logits: np.ndarray, gold: np.ndarray, padding_mask: np.ndarray) -> np.ndarray:
    """Gradient of dft_loss with the probability factor treated as a constant."""
    mask = np.asarray(padding_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise DataError("dft_loss: all positions are padded")
    logits = np.asarray(logits)
    gold = np.asarray(gold)
    ce = per_token_ce(logits, gold)
    weights = np.exp(-ce) * mask / n
    return _weighted_ce_grad(logits, gold, weights)


def _weighted_ce_grad(logits: np.ndarray, gold: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_t w_t * d(ce_t)/dlogits, with w_t == 0 rows exactly zero."""
    lp = log_softmax(logits)
    probs = np.exp(lp)
    grad = probs.copy()
    idx = gold[..., None]
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=-1) - 1.0, axis=-1)
    return grad * weights[..., None]


def position_entropy(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats of each position's next-token distribution."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DataError("position_entropy requires finite logits")
    lp = log_softmax(z)
    p = np.exp(lp)
    return -np.sum(np.where(p > 0, p * lp, 0.0), axis=-1)
