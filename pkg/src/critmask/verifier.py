"""Final-answer extraction and correctness checking.

Numeric answers are compared as exact rationals after normalization (commas,
currency symbols, fractions). A relative tolerance of 1e-6 is used only when
one side is a decimal rendering of a non-terminating fraction, since those
strings are necessarily rounded.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction

from .core import Choice, DataError, Sample

DECIMAL_FALLBACK_RTOL = 1e-6

_CURRENCY = "$€£¥"

# A written number: optional sign/currency, comma-grouped or plain digits,
# optional decimal part, optional /denominator.
_NUMBER_RE = re.compile(
    rf"[-+]?[{_CURRENCY}]?(?:\d{{1,3}}(?:,\d{{3}})+|\d+)(?:\.\d+)?(?:\s*/\s*\d+)?"
)
_STANDALONE_NUMBER_RE = re.compile(
    rf"(?<![\w.,])([-+]?[{_CURRENCY}]?(?:\d{{1,3}}(?:,\d{{3}})+|\d+)(?:\.\d+)?(?:\s*/\s*\d+)?)(?![\w])"
)
_MARKER_RE = re.compile(r"####\s*([^\n#]*)")
_BOXED_RE = re.compile(r"\\boxed\{([^{}]*)\}")


@dataclass(frozen=True)
class Answer:
    """An extracted final answer: an exact rational or a choice label."""

    kind: str  # "numeric" | "choice"
    value: Fraction | None
    label: str | None
    raw_span: str


def parse_number(text: str) -> Fraction | None:
    """Parse one written number (int, decimal, fraction, commas, currency) to a Fraction."""
    s = text.strip()
    sign = 1
    if s.startswith(("+", "-")):
        if s[0] == "-":
            sign = -1
        s = s[1:].strip()
    s = s.lstrip(_CURRENCY).strip()
    s = s.replace(",", "")
    if not s:
        return None
    if "/" in s:
        num_s, _, den_s = s.partition("/")
        num_s, den_s = num_s.strip(), den_s.strip()
        if not re.fullmatch(r"\d+(\.\d+)?", num_s) or not re.fullmatch(r"\d+", den_s):
            return None
        den = int(den_s)
        if den == 0:
            return None
        return sign * _decimal_fraction(num_s) / den
    if not re.fullmatch(r"\d+(\.\d+)?", s):
        return None
    return sign * _decimal_fraction(s)


def _decimal_fraction(s: str) -> Fraction:
    if "." in s:
        whole, _, frac = s.partition(".")
        scale = 10 ** len(frac)
        return Fraction(int(whole) * scale + int(frac or "0"), scale)
    return Fraction(int(s))


def _is_decimal_rendering(text: str) -> bool:
    return "." in text


def _terminating(value: Fraction) -> bool:
    """True when the fraction has a finite decimal expansion."""
    den = value.denominator
    for p in (2, 5):
        while den % p == 0:
            den //= p
    return den == 1


def numeric_equivalent(a: str, b: str) -> bool:
    """Exact rational equality after normalization, with a 1e-6 relative fallback
    when one side is a (rounded) decimal rendering of a non-terminating value."""
    fa = parse_number(a)
    fb = parse_number(b)
    if fa is None:
        raise DataError(f"unparseable numeric answer: {a!r}")
    if fb is None:
        raise DataError(f"unparseable numeric answer: {b!r}")
    if fa == fb:
        return True
    rounded_side = (_is_decimal_rendering(a) and not _terminating(fb)) or (
        _is_decimal_rendering(b) and not _terminating(fa)
    )
    if rounded_side:
        tol = Fraction(DECIMAL_FALLBACK_RTOL).limit_denominator(10**12) * max(
            Fraction(1), abs(fb)
        )
        return abs(fa - fb) <= tol
    return False


def _last_parseable(candidates: list[str]) -> tuple[Fraction, str] | None:
    for cand in reversed(candidates):
        inner = _STANDALONE_NUMBER_RE.search(cand) or _NUMBER_RE.search(cand)
        if inner is None:
            continue
        value = parse_number(inner.group(0))
        if value is not None:
            return value, inner.group(0)
    return None


def _extract_numeric(text: str) -> Answer | None:
    hit = _last_parseable([m.group(1) for m in _MARKER_RE.finditer(text)])
    if hit is None:
        hit = _last_parseable([m.group(1) for m in _BOXED_RE.finditer(text)])
    if hit is None:
        hit = _last_parseable([m.group(1) for m in _STANDALONE_NUMBER_RE.finditer(text)])
    if hit is None:
        return None
    value, span = hit
    return Answer(kind="numeric", value=value, label=None, raw_span=span)


def _extract_choice(text: str, choices: tuple[Choice, ...]) -> Answer | None:
    labels = {c.label.upper(): c.label for c in choices}
    pattern = re.compile(
        r"(?:\(([A-Za-z])\)|(?<![\w])([A-Za-z])[.):](?![\w])|(?<![\w])([A-Z])(?![\w.):]))"
    )
    best: Answer | None = None
    for m in pattern.finditer(text):
        token = next(g for g in m.groups() if g)
        canon = labels.get(token.upper())
        if canon is not None:
            best = Answer(kind="choice", value=None, label=canon, raw_span=m.group(0))
    if best is not None:
        return best
    # Fall back to the last exact option-text occurrence.
    last_pos, last_choice = -1, None
    lowered = text.lower()
    for c in choices:
        pos = lowered.rfind(c.text.lower())
        if pos > last_pos and c.text.strip():
            last_pos, last_choice = pos, c
    if last_choice is not None:
        return Answer(kind="choice", value=None, label=last_choice.label, raw_span=last_choice.text)
    return None


def extract_final_answer(
    text: str, task_kind: str, choices: tuple[Choice, ...] | None = None
) -> Answer | None:
    """Extract the final answer from generated text, or None when absent.

    Numeric priority: last ``#### <expr>`` marker, then last ``\\boxed{}``,
    then the last standalone number. Choice tasks match the last option label
    (``(B)``, ``B.``, bare ``B``) and fall back to exact option text.
    """
    if task_kind == "numeric":
        return _extract_numeric(text)
    if task_kind == "choice":
        if not choices:
            raise DataError("choice extraction requires the sample's choices")
        return _extract_choice(text, choices)
    raise DataError(f"unknown task kind {task_kind!r}")


def verify(response_text: str, sample: Sample) -> int:
    """The correctness check: 1 iff an answer extracts and matches gold, else 0.

    Total over arbitrary text; never raises on unextractable or junk content.
    """
    try:
        answer = extract_final_answer(response_text, sample.task_kind, sample.choices)
        if answer is None:
            return 0
        if sample.task_kind == "numeric":
            assert answer.value is not None
            gold = parse_number(sample.gold_answer)
            if gold is None:
                return 0
            if answer.value == gold:
                return 1
            # Tolerance fallback needs the original spans (decimal-ness matters).
            return int(numeric_equivalent(answer.raw_span, sample.gold_answer))
        assert answer.label is not None
        gold_label = sample.gold_answer.strip()
        return int(answer.label.upper() == gold_label.upper())
    except DataError:
        return 0
