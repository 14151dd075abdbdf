"""Evaluation and analysis: Pass@N, output entropy, token-category statistics."""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import BackendError, DataError, Sample, default_prompt
from .generator import (
    Backend,
    DecodeMode,
    DecodeRequest,
    RequestFailure,
    Trajectory,
    derive_seed,
    run_batch,
)
from .verifier import verify

log = logging.getLogger(__name__)

CATEGORIES = ("number", "operator", "punctuation", "special", "word", "other")

_NUMBER_TOKEN_RE = re.compile(r"[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?")
_OPERATORS = frozenset("+-*/×÷=<>^%") | {"−"}
_PUNCTUATION = frozenset(".,;:!?'\"()[]{}")


def token_category(token_text: str) -> str:
    """Classify one token: number > operator > punctuation > special > word > other."""
    s = token_text.strip()
    if not s:
        return "other"
    if _NUMBER_TOKEN_RE.fullmatch(s):
        return "number"
    if s in _OPERATORS:
        return "operator"
    if len(s) == 1 and s in _PUNCTUATION:
        return "punctuation"
    if not any(ch.isalnum() for ch in s):
        return "special"
    if s.isalpha():
        return "word"
    return "other"


@dataclass(frozen=True)
class PassAtNReport:
    per_question: dict[str, tuple[int, ...]]
    pass_at: dict[int, float]

    def as_dict(self) -> dict:
        return {
            "per_question": {k: list(v) for k, v in self.per_question.items()},
            "pass_at": {str(n): rate for n, rate in sorted(self.pass_at.items())},
        }


def pass_at_n(correctness: Mapping[str, Sequence[int]]) -> PassAtNReport:
    """Pass@n for n = 1..N from per-question correctness bit rows.

    Pass@n of a question is 1 iff any of its first n bits is 1; aggregates are
    means over questions and are non-decreasing in n.
    """
    if not correctness:
        raise DataError("empty correctness matrix")
    lengths = {len(bits) for bits in correctness.values()}
    if 0 in lengths:
        raise DataError("every question needs at least one sample")
    if len(lengths) != 1:
        raise DataError(f"ragged correctness matrix: row lengths {sorted(lengths)}")
    n_max = lengths.pop()
    per_question = {}
    for qid, bits in correctness.items():
        if any(b not in (0, 1) for b in bits):
            raise DataError(f"question {qid!r}: correctness bits must be 0 or 1")
        per_question[qid] = tuple(int(b) for b in bits)
    pass_at = {}
    for n in range(1, n_max + 1):
        pass_at[n] = float(
            np.mean([1 if any(bits[:n]) else 0 for bits in per_question.values()])
        )
    return PassAtNReport(per_question=per_question, pass_at=pass_at)


def collect_pass_data(
    samples: Sequence[Sample],
    backend: Backend,
    n: int,
    seed: int,
    *,
    temperature: float = 1.0,
    max_new_tokens: int | None = None,
    prompt_builder=default_prompt,
    parallelism: int = 1,
) -> dict[str, list[int]]:
    """N verified samples per question; sample i of question q is seeded by (seed, q, i)."""
    if n < 1:
        raise DataError("n must be >= 1")
    budget = max_new_tokens or backend.descriptor().max_context
    requests = []
    for sample in samples:
        for i in range(n):
            requests.append(
                DecodeRequest(
                    key=f"pass|{sample.id}|{i}",
                    prompt=prompt_builder(sample),
                    max_new_tokens=budget,
                    mode=DecodeMode(
                        "sampled", temperature=temperature, seed=derive_seed(seed, sample.id, i)
                    ),
                )
            )
    results = run_batch(backend, requests, parallelism=parallelism)
    matrix: dict[str, list[int]] = {}
    for sample in samples:
        bits = []
        for i in range(n):
            outcome = results[f"pass|{sample.id}|{i}"]
            if isinstance(outcome, RequestFailure):
                log.warning("sample %s draw %d failed (%s); counted incorrect",
                            sample.id, i, outcome.error)
                bits.append(0)
            else:
                bits.append(verify(outcome.text, sample))
        matrix[sample.id] = bits
    return matrix


def _trajectory_entropies(trajectory: Trajectory, backend: Backend | None) -> list[float]:
    from .select import entropy_scores  # local import to avoid a module cycle

    return list(entropy_scores(trajectory, backend).scores)


def mean_output_entropy(trajectories: Sequence[Trajectory], backend: Backend | None = None) -> float:
    """Mean per-position predictive entropy over all positions of all trajectories."""
    if not trajectories:
        raise DataError("no trajectories")
    values: list[float] = []
    for traj in trajectories:
        values.extend(_trajectory_entropies(traj, backend))
    if not values:
        raise DataError("trajectories contain no positions")
    return float(np.mean(values))


@dataclass(frozen=True)
class GroupStats:
    count: int
    confidence: float | None  # mean probability of the chosen token
    perplexity: float | None  # exp of mean negative log-probability
    mean_entropy: float | None
    category_histogram: dict[str, int]


@dataclass(frozen=True)
class TokenStatsReport:
    critical: GroupStats
    normal: GroupStats
    entropy_unit: str = "nats"

    def as_dict(self) -> dict:
        def group(g: GroupStats) -> dict:
            return {
                "count": g.count,
                "confidence": g.confidence,
                "perplexity": g.perplexity,
                "mean_entropy": g.mean_entropy,
                "category_histogram": dict(g.category_histogram),
            }

        return {
            "critical": group(self.critical),
            "normal": group(self.normal),
            "entropy_unit": self.entropy_unit,
        }

    def render_table(self) -> str:
        rows = [
            ("Metric", "Critical", "Normal"),
            ("Count", str(self.critical.count), str(self.normal.count)),
            ("Confidence", _fmt(self.critical.confidence), _fmt(self.normal.confidence)),
            ("Perplexity", _fmt(self.critical.perplexity), _fmt(self.normal.perplexity)),
            ("Entropy", _fmt(self.critical.mean_entropy), _fmt(self.normal.mean_entropy)),
        ]
        for cat in CATEGORIES:
            rows.append(
                (
                    f"# {cat}",
                    str(self.critical.category_histogram.get(cat, 0)),
                    str(self.normal.category_histogram.get(cat, 0)),
                )
            )
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)


def _fmt(x: float | None) -> str:
    return "-" if x is None else f"{x:.4f}"


def token_stats(
    trajectories: Sequence[Trajectory],
    masks: Sequence[Sequence[float]],
    backend: Backend | None = None,
) -> TokenStatsReport:
    """Confidence/perplexity/entropy and category histograms, split by mask positivity."""
    if len(trajectories) != len(masks):
        raise DataError("trajectories and masks disagree in length")
    probs: dict[str, list[float]] = {"critical": [], "normal": []}
    logps: dict[str, list[float]] = {"critical": [], "normal": []}
    ents: dict[str, list[float]] = {"critical": [], "normal": []}
    hists: dict[str, Counter] = {"critical": Counter(), "normal": Counter()}
    for traj, mask in zip(trajectories, masks):
        if len(mask) != traj.length:
            raise DataError(f"trajectory {traj.sample_id!r}: mask misaligned")
        entropies = _trajectory_entropies(traj, backend)
        for t in range(traj.length):
            group = "critical" if mask[t] > 0 else "normal"
            lp = traj.chosen_logprob[t]
            probs[group].append(math.exp(lp))
            logps[group].append(lp)
            ents[group].append(entropies[t])
            hists[group][token_category(traj.token_texts[t])] += 1

    def build(group: str) -> GroupStats:
        n = len(probs[group])
        if n == 0:
            return GroupStats(0, None, None, None, {})
        return GroupStats(
            count=n,
            confidence=float(np.mean(probs[group])),
            perplexity=float(np.exp(-np.mean(logps[group]))),
            mean_entropy=float(np.mean(ents[group])),
            category_histogram=dict(hists[group]),
        )

    return TokenStatsReport(critical=build("critical"), normal=build("normal"))
