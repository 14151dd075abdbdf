"""Deterministic arithmetic-chain corpus generator.

Questions describe a chain of operations ("start with 7 ; add 4 ; times 2");
reference solutions spell out every intermediate step and end with a
``#### <result>`` marker. Filler words at the start of each solution step are
drawn uniformly from interchangeable synonyms, so those positions are
redundant by construction while every digit is decisive. All op clauses
have identical token geometry (word, space, digit), which keeps the task
learnable by a very small model.
"""

from __future__ import annotations

import numpy as np

from ..core import Sample
from ..verifier import verify

FILLERS = ("then", "next", "now", "so")

_OPS = ("add", "subtract", "times")


def synth_corpus(
    seed: int,
    size: int,
    *,
    min_steps: int = 2,
    max_steps: int = 4,
    max_value: int = 9,
    id_prefix: str = "synth",
) -> tuple[list[Sample], list[str]]:
    """Generate ``size`` samples plus aligned reference solutions, deterministically."""
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng(seed)
    samples: list[Sample] = []
    solutions: list[str] = []
    seen_questions: set[str] = set()
    idx = 0
    while len(samples) < size:
        question, solution, answer = _one_problem(rng, min_steps, max_steps, max_value)
        if question in seen_questions:
            continue
        seen_questions.add(question)
        sample = Sample(
            id=f"{id_prefix}-{idx:05d}",
            question=question,
            gold_answer=str(answer),
            task_kind="numeric",
        )
        assert verify(solution, sample) == 1, "reference solution must self-verify"
        samples.append(sample)
        solutions.append(solution)
        idx += 1
    return samples, solutions


def _one_problem(
    rng: np.random.Generator, min_steps: int, max_steps: int, max_value: int
) -> tuple[str, str, int]:
    n_steps = int(rng.integers(min_steps, max_steps + 1))
    value = int(rng.integers(2, min(10, max_value + 1)))
    clauses = [f"start with {value}"]
    steps: list[tuple[int, str, int, int]] = []
    for _ in range(n_steps):
        candidates = []
        if value < max_value:
            candidates.append("add")
        if value >= 2:
            candidates.append("subtract")
        if 2 * value <= max_value and value >= 1:
            candidates.append("times")
        op = candidates[int(rng.integers(0, len(candidates)))]
        if op == "times":
            m = 3 if (3 * value <= max_value and rng.integers(0, 2)) else 2
            clauses.append(f"times {m}")
            steps.append((value, "*", m, value * m))
            value *= m
        elif op == "subtract":
            b = int(rng.integers(1, value))
            clauses.append(f"subtract {b}")
            steps.append((value, "-", b, value - b))
            value -= b
        else:
            b = int(rng.integers(1, max_value - value + 1))
            clauses.append(f"add {b}")
            steps.append((value, "+", b, value + b))
            value += b
    question = " ; ".join(clauses)
    lines = []
    for a, sym, b, c in steps:
        filler = FILLERS[int(rng.integers(0, len(FILLERS)))]
        lines.append(f"{filler} {a} {sym} {b} = {c} ;")
    solution = " ".join(lines) + f" #### {value}"
    return question, solution, value


def chain_values(question: str) -> list[int]:
    """Independently re-evaluate the operation chain described by a question."""
    values: list[int] = []
    value: int | None = None
    for clause in question.split(";"):
        words = clause.split()
        if not words:
            continue
        if words[0] == "start":
            value = int(words[2])
        elif words[0] == "add":
            assert value is not None
            value += int(words[1])
            values.append(value)
        elif words[0] == "subtract":
            assert value is not None
            value -= int(words[1])
            values.append(value)
        elif words[0] == "times":
            assert value is not None
            value *= int(words[1])
            values.append(value)
        else:
            raise ValueError(f"unknown clause: {clause!r}")
    assert value is not None
    return values
