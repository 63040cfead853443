"""Word-level tokenization, vocabulary management, and token-span arithmetic.

Everything downstream (augmentation, the toy LM, the losses, the metrics)
works on lists of integer token ids produced here. Tokenization is
deterministic: lowercase, whitespace split, punctuation split off as its
own token, unknown words map to UNK.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

PAD = 0
BOS = 1
EOS = 2
UNK = 3

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

# punctuation characters split off as standalone tokens
_PUNCT_RE = re.compile(r"([.,!?;:])")

TokenSeq = list[int]


def words_of(text: str) -> list[str]:
    """Split text into lowercase word/punctuation tokens."""
    return _PUNCT_RE.sub(r" \1 ", text.lower()).split()


@dataclass(frozen=True)
class Span:
    """Half-open token index range [start, end) into a sequence.

    The 1-based inclusive convention (s, e) used when talking about phrase
    indices on paper maps here as start = s - 1, end = e.
    """

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid span ({self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def overlaps(self, other: "Span") -> bool:
        return self.start < other.end and other.start < self.end


class Vocab:
    """Dense word↔id mapping with reserved ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:4]) != list(RESERVED):
            raise ValueError("vocab must start with the four reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)

    def word(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path: str) -> None:
        """Write one token per line; line number - 4 = corpus word id offset."""
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocab(corpus: list[str]) -> Vocab:
    """Assign ids in first-appearance order after the reserved ids."""
    if not corpus:
        raise ValueError("empty corpus")
    tokens = list(RESERVED)
    seen = set(tokens)
    for text in corpus:
        for w in words_of(text):
            if w not in seen:
                seen.add(w)
                tokens.append(w)
    return Vocab(tokens)


def tokenize(text: str, vocab: Vocab) -> TokenSeq:
    return [vocab.id(w) for w in words_of(text)]


def detokenize(ids: TokenSeq, vocab: Vocab) -> str:
    return " ".join(vocab.word(i) for i in ids)


def locate_phrase(seq: TokenSeq, phrase: TokenSeq, start: int = 0) -> Span | None:
    """First exact contiguous occurrence of phrase at or after `start`.

    Returns None when the phrase does not occur (a normal outcome, not an
    error).
    """
    if not phrase:
        raise ValueError("empty phrase")
    n, m = len(seq), len(phrase)
    for i in range(max(start, 0), n - m + 1):
        if seq[i : i + m] == phrase:
            return Span(i, i + m)
    return None


def validate_seq(ids: TokenSeq, vocab_size: int) -> None:
    """Raise if any id is out of range or PAD appears interior."""
    for i, t in enumerate(ids):
        if not (0 <= t < vocab_size):
            raise ValueError(f"token id {t} out of range at position {i}")
    interior = ids[1:-1] if len(ids) > 2 else []
    if PAD in interior:
        raise ValueError("PAD id interior to sequence")
