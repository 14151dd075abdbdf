"""Shared data model: samples, masked training records, run configuration, file IO.

All types here are immutable after construction and safe to share across
concurrent workers. File formats are UTF-8 line-delimited JSON; floats are
written with full precision so round-trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

TASK_KINDS = ("numeric", "choice")
POLICY_KINDS = ("strict2", "strict3", "union3", "graded3")


class DataError(ValueError):
    """Malformed input file or violated data invariant."""


class CapabilityError(RuntimeError):
    """A backend lacks a capability the requested operation needs."""


class BackendError(RuntimeError):
    """A decoding backend failed after retries."""


@dataclass(frozen=True)
class Choice:
    label: str
    text: str


@dataclass(frozen=True)
class Sample:
    """One question/gold-answer pair, the unit of corpus ingestion."""

    id: str
    question: str
    gold_answer: str
    task_kind: str = "numeric"
    choices: tuple[Choice, ...] | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise DataError("sample id must be nonempty")
        if not self.gold_answer:
            raise DataError(f"sample {self.id!r}: gold_answer must be nonempty")
        if self.task_kind not in TASK_KINDS:
            raise DataError(f"sample {self.id!r}: unknown task kind {self.task_kind!r}")
        if (self.task_kind == "choice") != (self.choices is not None):
            raise DataError(
                f"sample {self.id!r}: choices must be present exactly when task is 'choice'"
            )
        if self.choices is not None and len(self.choices) == 0:
            raise DataError(f"sample {self.id!r}: empty choices list")


@dataclass(frozen=True)
class MaskedExample:
    """One emitted training record: response tokens plus per-token weights."""

    sample_id: str
    question: str
    token_texts: tuple[str, ...]
    token_ids: tuple[int, ...]
    weights: tuple[float, ...]
    policy: str
    backend_tag: str

    def __post_init__(self) -> None:
        n = len(self.token_texts)
        if n < 1:
            raise DataError(f"record {self.sample_id!r}: empty token list")
        if len(self.token_ids) != n or len(self.weights) != n:
            raise DataError(
                f"record {self.sample_id!r}: token_texts/token_ids/weights lengths differ "
                f"({n}/{len(self.token_ids)}/{len(self.weights)})"
            )
        if any(w < 0 for w in self.weights):
            raise DataError(f"record {self.sample_id!r}: negative weight")
        if not any(w > 0 for w in self.weights):
            raise DataError(f"record {self.sample_id!r}: all weights are zero")


@dataclass(frozen=True)
class RunConfig:
    """Annotation-run settings. Defaults reproduce the main strict3/k=3 setting."""

    k: int = 3
    policy: str = "strict3"
    max_continuation_tokens: int | None = None  # None = 2x the trajectory length
    parallelism: int = 1
    sampling_max_attempts: int = 100
    sampling_temperature: float = 1.0
    transfer_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        if self.policy not in POLICY_KINDS:
            raise DataError(f"unknown policy {self.policy!r}")
        min_k = 2 if self.policy == "strict2" else 3
        if self.k < min_k:
            raise DataError(f"policy {self.policy!r} requires k >= {min_k}, got {self.k}")
        if self.parallelism < 1:
            raise DataError("parallelism must be >= 1")
        if self.max_continuation_tokens is not None and self.max_continuation_tokens < 1:
            raise DataError("max_continuation_tokens must be >= 1")
        if self.sampling_max_attempts < 0:
            raise DataError("sampling_max_attempts must be >= 0")
        if self.sampling_temperature <= 0:
            raise DataError("sampling_temperature must be > 0")
        if not (0 < self.transfer_fraction <= 1):
            raise DataError("transfer_fraction must be in (0, 1]")


def prompt_from_question(question: str) -> str:
    """Prompt text for a question: the question plus an answer-start cue.

    The explicit "solve" cue marks where the response begins; without it a
    model cannot tell a continued question from the start of the solution.
    """
    return question + " ; solve "


def default_prompt(sample: Sample) -> str:
    return prompt_from_question(sample.question)


def load_samples(path: str | Path) -> list[Sample]:
    """Load a line-delimited sample corpus, rejecting malformed lines and duplicate ids."""
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                sample = _sample_from_record(raw)
            except (DataError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if sample.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate sample id {sample.id!r}")
            seen.add(sample.id)
            samples.append(sample)
    return samples


def write_samples(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec: dict = {
                "id": s.id,
                "question": s.question,
                "answer": s.gold_answer,
                "task": s.task_kind,
            }
            if s.choices is not None:
                rec["choices"] = [{"label": c.label, "text": c.text} for c in s.choices]
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _sample_from_record(raw: dict) -> Sample:
    if not isinstance(raw, dict):
        raise DataError("record is not an object")
    for key in ("id", "question", "answer", "task"):
        if key not in raw:
            raise DataError(f"missing field {key!r}")
    choices = None
    if raw["task"] == "choice":
        if "choices" not in raw:
            raise DataError("choice record without 'choices' field")
        choices = tuple(Choice(label=c["label"], text=c["text"]) for c in raw["choices"])
    elif "choices" in raw:
        raise DataError("non-choice record carries 'choices'")
    return Sample(
        id=str(raw["id"]),
        question=str(raw["question"]),
        gold_answer=str(raw["answer"]),
        task_kind=str(raw["task"]),
        choices=choices,
    )


_MASK_FIELDS = ("sample_id", "question", "token_texts", "token_ids", "weights", "policy", "backend_tag")


def write_masked_dataset(records: Sequence[MaskedExample], path: str | Path) -> None:
    """Write records in the masked-dataset schema; validates everything before any write."""
    for rec in records:
        if not isinstance(rec, MaskedExample):
            raise DataError(f"not a MaskedExample: {rec!r}")
        # Re-run invariants in case a record was built via replace() hacks.
        MaskedExample(**{f.name: getattr(rec, f.name) for f in fields(rec)})
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "sample_id": rec.sample_id,
                        "question": rec.question,
                        "token_texts": list(rec.token_texts),
                        "token_ids": list(rec.token_ids),
                        "weights": list(rec.weights),
                        "policy": rec.policy,
                        "backend_tag": rec.backend_tag,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_masked_dataset(path: str | Path) -> list[MaskedExample]:
    """Inverse of write_masked_dataset; all invariants re-validated on load."""
    records: list[MaskedExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise DataError(f"{path}:{lineno}: record is not an object")
            missing = [k for k in _MASK_FIELDS if k not in raw]
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {missing}")
            try:
                rec = MaskedExample(
                    sample_id=str(raw["sample_id"]),
                    question=str(raw["question"]),
                    token_texts=tuple(_expect_str(x, lineno, path) for x in raw["token_texts"]),
                    token_ids=tuple(_expect_int(x, lineno, path) for x in raw["token_ids"]),
                    weights=tuple(_expect_num(x, lineno, path) for x in raw["weights"]),
                    policy=str(raw["policy"]),
                    backend_tag=str(raw["backend_tag"]),
                )
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    return records


def _expect_str(x, lineno, path) -> str:
    if not isinstance(x, str):
        raise DataError(f"{path}:{lineno}: expected string, got {type(x).__name__}")
    return x


def _expect_int(x, lineno, path) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise DataError(f"{path}:{lineno}: expected integer, got {type(x).__name__}")
    return x


def _expect_num(x, lineno, path) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise DataError(f"{path}:{lineno}: expected number, got {type(x).__name__}")
    return float(x)


_CONFIG_INT_KEYS = {"k", "parallelism", "sampling_max_attempts", "seed", "max_continuation_tokens"}
_CONFIG_FLOAT_KEYS = {"sampling_temperature", "transfer_fraction"}


def parse_config_file(path: str | Path) -> dict[str, object]:
    """Parse a key-value config file (``key = value`` lines, ``#`` comments)."""
    values: dict[str, object] = {}
    known = {f.name for f in fields(RunConfig)}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise DataError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce_config_value(key, value, f"{path}:{lineno}")
    return values


def _coerce_config_value(key: str, value: str, where: str) -> object:
    try:
        if key in _CONFIG_INT_KEYS:
            if key == "max_continuation_tokens" and value.lower() in ("none", "auto"):
                return None
            return int(value)
        if key in _CONFIG_FLOAT_KEYS:
            return float(value)
    except ValueError as exc:
        raise DataError(f"{where}: bad value for {key!r}: {value!r}") from exc
    return value


def make_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig with precedence: overrides > config file > defaults."""
    merged: dict[str, object] = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is not None:
                merged[key] = value
    known = {f.name for f in fields(RunConfig)}
    unknown = set(merged) - known
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**merged)  # type: ignore[arg-type]


def config_as_dict(config: RunConfig) -> dict[str, object]:
    return {f.name: getattr(config, f.name) for f in fields(RunConfig)}
