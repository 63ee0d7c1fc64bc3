"""Corpus ingestion, vocabulary construction, and sentence segmentation.

Tokenization is deliberately simple: lowercase, split on whitespace,
punctuation stays attached to its word. That keeps decode(encode(text))
an exact round trip for in-vocabulary text after whitespace normalization,
which subword schemes can't give us without a detokenizer.

Vocab file format: plain text, one token per line, line number = id.
Corpus file format: UTF-8 plain text, one document per line.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import ContractError, DegenerateInputError

PAD, UNK, MASK, START, END = "[PAD]", "[UNK]", "[MASK]", "[START]", "[END]"
RESERVED = [PAD, UNK, MASK, START, END]
PAD_ID, UNK_ID, MASK_ID, START_ID, END_ID = range(5)

_SENTINEL_RE = re.compile(r"^\[MASK_(\d+)\]$")
_TERMINATORS = (".", "!", "?")


def sentinel_token(k: int) -> str:
    """Distinct mask token for span rank k (1-based)."""
    return f"[MASK_{k}]"


def tokenize(text: str) -> list[str]:
    """Canonical tokenization: lowercase + whitespace split."""
    return text.lower().split()


class Vocab:
    """Bijective token<->id map with fixed reserved ids.

    Reserved layout: PAD=0, UNK=1, MASK=2, START=3, END=4, then the
    optional sentinels [MASK_1..MASK_K], then content tokens.
    """

    def __init__(self, tokens: list[str]):
        if tokens[: len(RESERVED)] != RESERVED:
            raise ContractError("vocab must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("vocab contains duplicate tokens")
        k = 0
        for t in self.tokens[len(RESERVED) :]:
            m = _SENTINEL_RE.match(t)
            if not m or int(m.group(1)) != k + 1:
                break
            k += 1
        self.n_sentinels = k

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise ContractError(f"token id {i} out of range [0, {len(self.tokens)})")
        return self.tokens[i]

    def sentinel_id(self, k: int) -> int:
        if not 1 <= k <= self.n_sentinels:
            raise ContractError(
                f"sentinel {k} not in vocab (has {self.n_sentinels} sentinels)"
            )
        return self.index[sentinel_token(k)]

    def encode(self, text: str) -> list[int]:
        """Token ids for text; out-of-vocabulary words map to [UNK]."""
        return [self.index.get(t, UNK_ID) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        """Join tokens with single spaces. Raises on out-of-range ids."""
        return " ".join(self.token(int(i)) for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(corpus: Iterable[str], max_size: int, n_sentinels: int = 0) -> Vocab:
    """Most frequent word types, ties broken lexicographically.

    ``corpus`` is an iterable of document strings. Deterministic: the
    result is a pure function of (corpus bytes, max_size, n_sentinels).
    """
    reserved = RESERVED + [sentinel_token(k) for k in range(1, n_sentinels + 1)]
    if max_size <= len(reserved):
        raise ContractError(
            f"max_size {max_size} must exceed the {len(reserved)} reserved tokens"
        )
    counts: Counter[str] = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        counts.update(tokenize(doc))
    if n_docs == 0 or not counts:
        raise DegenerateInputError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    budget = max_size - len(reserved)
    return Vocab(reserved + [t for t, _ in ranked[:budget]])


def split_sentences(text: str) -> list[int]:
    """Sentence start offsets in the document's token sequence.

    A sentence ends after a token ending in '.', '!' or '?', and at
    newlines. Terminator-free text is a single sentence.
    """
    boundaries: list[int] = []
    pos = 0
    for line in text.split("\n"):
        start_new = True
        for tok in tokenize(line):
            if start_new:
                boundaries.append(pos)
                start_new = False
            pos += 1
            if tok.endswith(_TERMINATORS):
                start_new = True
    return boundaries


@dataclass
class Document:
    """Token-id sequence plus sentence start offsets."""

    ids: list[int]
    boundaries: list[int]

    def __post_init__(self):
        if self.boundaries:
            if self.boundaries[0] != 0:
                raise ContractError("first sentence boundary must be 0")
            for a, b in zip(self.boundaries, self.boundaries[1:]):
                if b <= a:
                    raise ContractError("sentence boundaries must be increasing")
            if self.boundaries[-1] >= len(self.ids):
                raise ContractError("sentence boundary past end of document")

    @classmethod
    def from_text(cls, text: str, vocab: Vocab) -> "Document":
        ids = [vocab.id(t) for t in tokenize(text.replace("\n", " "))]
        return cls(ids=ids, boundaries=split_sentences(text))

    def sentence_extents(self) -> list[tuple[int, int]]:
        """(start, length) per sentence; sentences partition the document."""
        ends = self.boundaries[1:] + [len(self.ids)]
        return [(s, e - s) for s, e in zip(self.boundaries, ends)]

    def truncated(self, max_len: int) -> "Document":
        if len(self.ids) <= max_len:
            return self
        return Document(
            ids=self.ids[:max_len],
            boundaries=[b for b in self.boundaries if b < max_len],
        )


def load_corpus(path: str | Path, vocab: Vocab) -> list[Document]:
    """One document per non-empty line."""
    docs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            docs.append(Document.from_text(line, vocab))
    if not docs:
        raise DegenerateInputError(f"no documents in corpus {path}")
    return docs
