"""Counterfactual criticality annotation.

For every position t of a verified-correct trajectory, each rank-j alternative
(j = 2..k) is substituted in place of the chosen token and the continuation is
regenerated greedily. A position's failure count is the number of substituted
continuations whose final answer no longer verifies. Policies map failure
counts to weights:

  strict2   1 iff the rank-2 substitution fails
  strict3   1 iff the rank-2 and rank-3 substitutions both fail
  union3    1 iff at least one of ranks 2..3 fails
  graded3   the failure count itself (0, 1 or 2)

Unevaluable ranks (vocabulary exhausted, rollout errors after retries) never
count as failures: under strict policies the position conservatively gets
weight zero. A false negative only shrinks the training mask; a false
positive would corrupt it.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

from .core import BackendError, DataError, MaskedExample, RunConfig, Sample, default_prompt
from .generator import (
    Backend,
    DecodeMode,
    DecodeRequest,
    Generation,
    RequestFailure,
    Trajectory,
    derive_seed,
    greedy_decode,
    run_batch,
    sample_decode,
    topk_alternatives,
)
from .verifier import verify

log = logging.getLogger(__name__)

PromptBuilder = Callable[[Sample], str]


@dataclass(frozen=True)
class CriticalityPolicy:
    kind: str
    k: int

    def __post_init__(self) -> None:
        if self.kind not in ("strict2", "strict3", "union3", "graded3"):
            raise DataError(f"unknown policy kind {self.kind!r}")
        min_k = 2 if self.kind == "strict2" else 3
        if self.k < min_k:
            raise DataError(f"policy {self.kind!r} requires k >= {min_k}")

    @property
    def ranks(self) -> tuple[int, ...]:
        return (2,) if self.kind == "strict2" else (2, 3)

    def weight(self, failures: int, evaluated: int) -> float:
        """Map (#failed ranks, #evaluated ranks) to this policy's token weight."""
        n_ranks = len(self.ranks)
        if self.kind in ("strict2", "strict3"):
            return 1.0 if (evaluated == n_ranks and failures == n_ranks) else 0.0
        if self.kind == "union3":
            return 1.0 if failures >= 1 else 0.0
        return float(failures)  # graded3


def policy_from_config(config: RunConfig) -> CriticalityPolicy:
    return CriticalityPolicy(kind=config.policy, k=config.k)


@dataclass(frozen=True)
class CriticalityMask:
    sample_id: str
    weights: tuple[float, ...]
    policy: CriticalityPolicy
    failures_per_position: tuple[int, ...]
    fraction_positive: float

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.failures_per_position):
            raise DataError("mask arrays disagree in length")
        got = sum(1 for w in self.weights if w > 0) / max(1, len(self.weights))
        if abs(got - self.fraction_positive) > 1e-12:
            raise DataError("fraction_positive does not match weights")

    @property
    def positive_count(self) -> int:
        return sum(1 for w in self.weights if w > 0)


@dataclass(frozen=True)
class AnnotationStats:
    num_samples: int
    num_greedy_correct: int
    num_sampled_correct: int
    mean_tokens: float
    critical_ratio: float
    wall_clock_batched: float
    wall_clock_sequential: float | None = None

    def as_dict(self) -> dict:
        out = {
            "num_samples": self.num_samples,
            "num_greedy_correct": self.num_greedy_correct,
            "num_sampled_correct": self.num_sampled_correct,
            "mean_tokens": self.mean_tokens,
            "critical_ratio": self.critical_ratio,
            "wall_clock_batched_s": self.wall_clock_batched,
        }
        if self.wall_clock_sequential is not None:
            out["wall_clock_sequential_s"] = self.wall_clock_sequential
        return out


def default_max_new(trajectory: Trajectory, config: RunConfig) -> int:
    """Continuation budget: configured cap, or twice the trajectory length."""
    if config.max_continuation_tokens is not None:
        return config.max_continuation_tokens
    return max(1, 2 * trajectory.length)


def build_correct_set(
    samples: Sequence[Sample],
    backend: Backend,
    config: RunConfig,
    *,
    prompt_builder: PromptBuilder = default_prompt,
    max_new_tokens: int | None = None,
) -> list[tuple[Sample, Trajectory]]:
    """Greedy-decode every sample and retain exactly those that verify correct."""
    backend.descriptor().validate_for(config.k)
    correct: list[tuple[Sample, Trajectory]] = []
    budget = max_new_tokens or backend.descriptor().max_context
    for sample in samples:
        try:
            traj = greedy_decode(
                backend, prompt_builder(sample), budget, sample_id=sample.id
            )
        except (DataError, BackendError) as exc:
            log.warning("sample %s skipped: greedy decode failed: %s", sample.id, exc)
            continue
        if verify(traj.text, sample) == 1:
            correct.append((sample, traj))
    return correct


def sample_until_correct(
    sample: Sample,
    backend: Backend,
    config: RunConfig,
    *,
    prompt_builder: PromptBuilder = default_prompt,
    max_new_tokens: int | None = None,
) -> tuple[Trajectory, int] | None:
    """Sample at the configured temperature until a trajectory verifies, or give up.

    Attempt i uses a seed derived from (config.seed, sample.id, i), so reruns
    and partial retries are reproducible.
    """
    budget = max_new_tokens or backend.descriptor().max_context
    for attempt in range(config.sampling_max_attempts):
        seed = derive_seed(config.seed, sample.id, attempt)
        try:
            traj = sample_decode(
                backend,
                prompt_builder(sample),
                config.sampling_temperature,
                seed,
                budget,
                sample_id=sample.id,
            )
        except (DataError, BackendError) as exc:
            log.warning("sample %s attempt %d failed: %s", sample.id, attempt, exc)
            continue
        if verify(traj.text, sample) == 1:
            return traj, attempt
    return None


def counterfactual_batch(
    trajectory: Trajectory,
    j: int,
    *,
    max_new_tokens: int,
) -> tuple[list[DecodeRequest], list[int], dict[str, tuple[int, str]]]:
    """One request per position with the rank-j alternative substituted.

    Returns (requests, skipped_positions, key -> (position, substituted text)).
    Positions whose stored alternatives cannot supply rank j are skipped with
    a log entry.
    """
    requests: list[DecodeRequest] = []
    skipped: list[int] = []
    meta: dict[str, tuple[int, str]] = {}
    for t in range(trajectory.length):
        try:
            alt = topk_alternatives(trajectory, t, j)[j - 2]
        except DataError as exc:
            log.info("trajectory %s position %d rank %d not evaluable: %s",
                     trajectory.sample_id, t, j, exc)
            skipped.append(t)
            continue
        key = f"{trajectory.sample_id}|t={t}|j={j}"
        requests.append(
            DecodeRequest(
                key=key,
                prompt=trajectory.prompt,
                forced_prefix=trajectory.token_ids[:t] + (alt.token_id,),
                max_new_tokens=max_new_tokens,
                mode=DecodeMode("greedy"),
            )
        )
        meta[key] = (t, alt.text)
    return requests, skipped, meta


def _mask_from_counts(
    trajectory: Trajectory,
    policy: CriticalityPolicy,
    failures: list[int],
    evaluated: list[int],
) -> CriticalityMask:
    weights = tuple(
        policy.weight(failures[t], evaluated[t]) for t in range(trajectory.length)
    )
    positive = sum(1 for w in weights if w > 0)
    return CriticalityMask(
        sample_id=trajectory.sample_id,
        weights=weights,
        policy=policy,
        failures_per_position=tuple(failures),
        fraction_positive=positive / max(1, trajectory.length),
    )


def annotate_trajectory(
    sample: Sample,
    trajectory: Trajectory,
    backend: Backend,
    policy: CriticalityPolicy,
    config: RunConfig,
) -> CriticalityMask:
    """Batched counterfactual annotation of one verified-correct trajectory."""
    if verify(trajectory.text, sample) != 1:
        raise DataError(f"trajectory {trajectory.sample_id!r} does not verify; refuse to mask")
    max_new = default_max_new(trajectory, config)
    requests: list[DecodeRequest] = []
    meta: dict[str, tuple[int, str]] = {}
    for j in policy.ranks:
        reqs_j, _, meta_j = counterfactual_batch(trajectory, j, max_new_tokens=max_new)
        requests.extend(reqs_j)
        meta.update(meta_j)
    results = run_batch(backend, requests, parallelism=config.parallelism)
    failures = [0] * trajectory.length
    evaluated = [0] * trajectory.length
    for key, outcome in results.items():
        t, alt_text = meta[key]
        if isinstance(outcome, RequestFailure):
            log.warning("rollout %s failed (%s); rank left unevaluated", key, outcome.error)
            continue
        evaluated[t] += 1
        if _continuation_verifies(sample, trajectory, t, alt_text, outcome) == 0:
            failures[t] += 1
    return _mask_from_counts(trajectory, policy, failures, evaluated)


def annotate_trajectory_sequential(
    sample: Sample,
    trajectory: Trajectory,
    backend: Backend,
    policy: CriticalityPolicy,
    config: RunConfig,
) -> CriticalityMask:
    """Reference annotator: one rollout at a time, straight-line code."""
    if verify(trajectory.text, sample) != 1:
        raise DataError(f"trajectory {trajectory.sample_id!r} does not verify; refuse to mask")
    max_new = default_max_new(trajectory, config)
    failures = [0] * trajectory.length
    evaluated = [0] * trajectory.length
    for t in range(trajectory.length):
        for j in policy.ranks:
            try:
                alt = topk_alternatives(trajectory, t, j)[j - 2]
            except DataError:
                continue
            request = DecodeRequest(
                key=f"{trajectory.sample_id}|t={t}|j={j}",
                prompt=trajectory.prompt,
                forced_prefix=trajectory.token_ids[:t] + (alt.token_id,),
                max_new_tokens=max_new,
                mode=DecodeMode("greedy"),
            )
            try:
                gen = backend.generate(request)
            except Exception as exc:
                log.warning("rollout %s failed (%s); rank left unevaluated", request.key, exc)
                continue
            evaluated[t] += 1
            if _continuation_verifies(sample, trajectory, t, alt.text, gen) == 0:
                failures[t] += 1
    return _mask_from_counts(trajectory, policy, failures, evaluated)


def _continuation_verifies(
    sample: Sample,
    trajectory: Trajectory,
    t: int,
    alt_text: str,
    generation: Generation,
) -> int:
    """Verify the full perturbed response: original prefix + alternative + continuation."""
    response = "".join(trajectory.token_texts[:t]) + alt_text + generation.text
    return verify(response, sample)


@dataclass(frozen=True)
class AnnotationFailure:
    sample_id: str
    stage: str
    error: str


def annotate_dataset(
    samples: Sequence[Sample],
    backend: Backend,
    policy: CriticalityPolicy,
    config: RunConfig,
    *,
    sequential: bool = False,
    include_sampled: bool = False,
    prompt_builder: PromptBuilder = default_prompt,
    max_new_tokens: int | None = None,
) -> tuple[list[MaskedExample], AnnotationStats, list[AnnotationFailure]]:
    """Annotate a corpus and emit masked training records plus run statistics.

    Trajectories whose mask is all-zero are excluded from the dataset (the
    selective loss would give them zero weight anyway) but still counted in
    the statistics. Per-sample errors are aggregated, never fatal.
    """
    backend.descriptor().validate_for(policy.k)
    t0 = time.perf_counter()
    correct = build_correct_set(
        samples, backend, config, prompt_builder=prompt_builder, max_new_tokens=max_new_tokens
    )
    num_greedy = len(correct)
    num_sampled = 0
    if include_sampled:
        greedy_ids = {s.id for s, _ in correct}
        for sample in samples:
            if sample.id in greedy_ids:
                continue
            hit = sample_until_correct(
                sample, backend, config,
                prompt_builder=prompt_builder, max_new_tokens=max_new_tokens,
            )
            if hit is not None:
                correct.append((sample, hit[0]))
                num_sampled += 1

    annotate_one = annotate_trajectory_sequential if sequential else annotate_trajectory
    records: list[MaskedExample] = []
    failures: list[AnnotationFailure] = []
    total_tokens = 0
    total_positive = 0
    n_annotated = 0
    for sample, traj in correct:
        try:
            mask = annotate_one(sample, traj, backend, policy, config)
        except (DataError, BackendError) as exc:
            log.warning("sample %s skipped during annotation: %s", sample.id, exc)
            failures.append(AnnotationFailure(sample.id, "annotate", str(exc)))
            continue
        n_annotated += 1
        total_tokens += traj.length
        total_positive += mask.positive_count
        if mask.positive_count == 0:
            log.info("sample %s: all-zero mask, excluded from dataset", sample.id)
            continue
        records.append(
            MaskedExample(
                sample_id=sample.id,
                question=sample.question,
                token_texts=traj.token_texts,
                token_ids=traj.token_ids,
                weights=mask.weights,
                policy=policy.kind,
                backend_tag=backend.descriptor().tag,
            )
        )
    elapsed = time.perf_counter() - t0
    stats = AnnotationStats(
        num_samples=len(samples),
        num_greedy_correct=num_greedy,
        num_sampled_correct=num_sampled,
        mean_tokens=(total_tokens / n_annotated) if n_annotated else 0.0,
        critical_ratio=(total_positive / total_tokens) if total_tokens else 0.0,
        wall_clock_batched=elapsed,
        wall_clock_sequential=elapsed if sequential else None,
    )
    return records, stats, failures
