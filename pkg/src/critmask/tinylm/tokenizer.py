"""Word/digit-level tokenizer for the toy language model.

Each digit, operator, and punctuation mark is its own token, and spaces are
tokens too, so ``"".join(texts)`` reconstructs the text exactly. Numeric
positions are therefore genuinely decisive during annotation.
"""

from __future__ import annotations

from ..core import DataError

EOS = "<eos>"

DEFAULT_WORDS = (
    "start",
    "with",
    "add",
    "subtract",
    "times",
    "multiply",
    "divide",
    "by",
    "solve",
    "then",
    "next",
    "now",
    "so",
)
DEFAULT_SYMBOLS = ("+", "-", "*", "/", "=", ";", ".", ",", "#", "####", "$", "?", "(", ")")
DIGITS = tuple(str(d) for d in range(10))


def default_vocab() -> tuple[str, ...]:
    return (EOS, " ") + DIGITS + DEFAULT_SYMBOLS + DEFAULT_WORDS


class ToyTokenizer:
    """Tokenizer over a fixed closed vocabulary; unknown text is an error."""

    def __init__(self, vocab: tuple[str, ...] | None = None):
        self.vocab = tuple(vocab) if vocab is not None else default_vocab()
        if len(set(self.vocab)) != len(self.vocab):
            raise DataError("tokenizer vocab contains duplicates")
        if EOS not in self.vocab:
            raise DataError("tokenizer vocab must contain the <eos> token")
        self.token_to_id = {tok: i for i, tok in enumerate(self.vocab)}
        self.eos_id = self.token_to_id[EOS]
        self.digit_ids = frozenset(self.token_to_id[d] for d in DIGITS if d in self.token_to_id)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        i = 0
        n = len(text)
        while i < n:
            ch = text[i]
            if ch == " ":
                ids.append(self._id(" ", text, i))
                i += 1
            elif ch.isdigit():
                ids.append(self._id(ch, text, i))
                i += 1
            elif ch.isalpha():
                j = i
                while j < n and text[j].isalpha():
                    j += 1
                ids.append(self._id(text[i:j], text, i))
                i = j
            elif ch == "#":
                j = i
                while j < n and text[j] == "#":
                    j += 1
                run = j - i
                while run >= 4:
                    ids.append(self._id("####", text, i))
                    run -= 4
                for _ in range(run):
                    ids.append(self._id("#", text, i))
                i = j
            else:
                ids.append(self._id(ch, text, i))
                i += 1
        return ids

    def _id(self, token: str, text: str, pos: int) -> int:
        tid = self.token_to_id.get(token)
        if tid is None:
            raise DataError(f"token {token!r} at position {pos} is not in the vocabulary")
        return tid

    def decode(self, ids: list[int]) -> str:
        return "".join(self.texts(ids))

    def texts(self, ids: list[int]) -> list[str]:
        out = []
        for tid in ids:
            if not (0 <= tid < len(self.vocab)):
                raise DataError(f"token id {tid} out of range")
            tok = self.vocab[tid]
            out.append("" if tok == EOS else tok)
        return out
