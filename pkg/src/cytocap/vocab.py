"""Word-level tokenizer and vocabulary for caption text.

Tokenization lowercases, splits words from punctuation, and treats the
area-mask placeholder ``[AREA]`` as a single token. Word-level (rather than
subword) tokens keep area names atomic, which makes label extraction and
masking exact.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
AREA_MASK = "[AREA]"
SPECIALS = (PAD, BOS, EOS, UNK, AREA_MASK)

_TOKEN_RE = re.compile(r"\[area\]|[0-9a-z_']+|[^\s0-9a-z_']")


def tokenize(text: str) -> list[str]:
    """Lowercased word/punctuation tokens; ``[AREA]`` survives as one token."""
    out = []
    for tok in _TOKEN_RE.findall(text.casefold()):
        out.append(AREA_MASK if tok == "[area]" else tok)
    return out


def normalize(text: str) -> str:
    """Canonical surface form: lowercased tokens joined by single spaces."""
    return " ".join(tokenize(text))


@dataclass
class Vocab:
    """Ordered token list with the specials at fixed leading ids."""

    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.index:
                raise ValueError(f"special token {s!r} missing from vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def area_mask_id(self) -> int:
        return self.index[AREA_MASK]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(t, unk) for t in tokenize(text)]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens}, ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: str) -> "Vocab":
        data = json.loads(payload)
        return cls(tokens=list(data["tokens"]))


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocab:
    """Count-ordered word vocabulary (ties broken lexicographically) plus specials."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text in corpus:
        counts.update(tokenize(text))
    kept = [t for t, c in counts.items() if c >= min_count and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(tokens=list(SPECIALS) + kept)
