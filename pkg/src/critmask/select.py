"""Alternative token-selection strategies: entropy/attention baselines with
fraction matching, probability (dft) weights, cross-model transfer scores,
and the number-only mask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import CapabilityError, DataError, MaskedExample, Sample
from .evalx import token_category
from .generator import Backend, Trajectory
from .tinylm.losses import position_entropy

SCORE_SOURCES = ("entropy", "attention", "transfer", "dft_prob")


@dataclass(frozen=True)
class ScoreVector:
    sample_id: str
    scores: tuple[float, ...]
    source: str
    approximate: bool = False  # truncated top-k entropy rather than the full distribution

    def __post_init__(self) -> None:
        if self.source not in SCORE_SOURCES:
            raise DataError(f"unknown score source {self.source!r}")
        if any(not math.isfinite(s) for s in self.scores):
            raise DataError("scores must be finite")


def entropy_scores(trajectory: Trajectory, backend: Backend | None = None) -> ScoreVector:
    """Per-position predictive entropy in nats.

    Uses the backend's full distributions when it can provide them; otherwise
    the stored top-k probabilities plus a single residual bucket holding the
    leftover mass (exact whenever top-k covers everything).
    """
    if backend is not None and hasattr(backend, "response_distributions"):
        probs = backend.response_distributions(trajectory.prompt, list(trajectory.token_ids))
        ent = -np.sum(np.where(probs > 0, probs * np.log(probs), 0.0), axis=-1)
        return ScoreVector(trajectory.sample_id, tuple(float(e) for e in ent), "entropy")
    scores = []
    for t, alts in enumerate(trajectory.topk):
        if not alts:
            raise DataError(f"position {t}: no stored log-probabilities for entropy")
        p = np.array([math.exp(a.logprob) for a in alts])
        residual = max(0.0, 1.0 - float(p.sum()))
        buckets = np.append(p, residual) if residual > 0 else p
        scores.append(float(-np.sum(np.where(buckets > 0, buckets * np.log(buckets), 0.0))))
    return ScoreVector(trajectory.sample_id, tuple(scores), "entropy", approximate=True)


def top_fraction_mask(scores: ScoreVector, fraction: float) -> tuple[int, ...]:
    """Binary mask selecting round(fraction*T) highest-scoring positions.

    Rounding is half-up; ties break toward the lower position index.
    """
    if not (0 <= fraction <= 1):
        raise DataError("fraction must be in [0, 1]")
    t = len(scores.scores)
    count = int(math.floor(fraction * t + 0.5))
    count = min(count, t)
    if count == 0:
        return (0,) * t
    order = np.argsort(-np.asarray(scores.scores), kind="stable")
    mask = [0] * t
    for idx in order[:count]:
        mask[int(idx)] = 1
    return tuple(mask)


def attention_scores(trajectory: Trajectory, backend: Backend) -> ScoreVector:
    """Received-attention scores for response positions (toy backend only)."""
    if not backend.descriptor().supports_attention or not hasattr(
        backend, "attention_received_scores"
    ):
        raise CapabilityError(
            f"backend {backend.descriptor().tag!r} cannot expose attention tensors"
        )
    scores = backend.attention_received_scores(trajectory.prompt, list(trajectory.token_ids))
    return ScoreVector(trajectory.sample_id, tuple(float(s) for s in scores), "attention")


def dft_prob_weights(trajectory: Trajectory) -> ScoreVector:
    """The dft weighting signal: the model's probability of each chosen token."""
    return ScoreVector(
        trajectory.sample_id,
        tuple(math.exp(lp) for lp in trajectory.chosen_logprob),
        "dft_prob",
    )


def transfer_scores(
    prompt: str,
    response_text: str,
    backend_tuned: Backend,
    backend_base: Backend,
    *,
    sample_id: str = "",
) -> ScoreVector:
    """Per-token probability gap between a selectively-tuned model and its base.

    Both backends force-score the same text; their tokenizations must agree.
    """
    for b in (backend_tuned, backend_base):
        if not b.descriptor().supports_force_score:
            raise CapabilityError(f"backend {b.descriptor().tag!r} cannot force-score")
    _, ids_a, lp_a, _ = backend_tuned.force_score(prompt, response_text)
    _, ids_b, lp_b, _ = backend_base.force_score(prompt, response_text)
    if ids_a != ids_b:
        raise DataError(
            "tokenization mismatch between backends; transfer scores must be computed "
            "under the target model's own tokenization (force-score the raw text there)"
        )
    scores = tuple(math.exp(a) - math.exp(b) for a, b in zip(lp_a, lp_b))
    return ScoreVector(sample_id, scores, "transfer")


def number_mask(trajectory: Trajectory) -> tuple[int, ...]:
    """Weight 1 exactly at tokens classified as numbers."""
    return tuple(
        1 if token_category(text) == "number" else 0 for text in trajectory.token_texts
    )


def mask_to_example(
    sample: Sample,
    trajectory: Trajectory,
    weights: tuple[float, ...] | tuple[int, ...],
    policy: str,
    backend_tag: str,
) -> MaskedExample | None:
    """Build a masked record, or None when every weight is zero (record dropped)."""
    if len(weights) != trajectory.length:
        raise DataError("weights length does not match trajectory length")
    if not any(w > 0 for w in weights):
        return None
    return MaskedExample(
        sample_id=sample.id,
        question=sample.question,
        token_texts=trajectory.token_texts,
        token_ids=trajectory.token_ids,
        weights=tuple(float(w) for w in weights),
        policy=policy,
        backend_tag=backend_tag,
    )
