"""Corruption-span sampling for the three pretraining objectives.

Three samplers share one shape of output, a SpanSet:
  * short spans: Poisson(lambda) lengths, resampled until at least
    min_mask_ratio of the tokens are covered;
  * document span: one span covering a uniform 50-100% of the sequence;
  * sentence spans: whole sentences drawn without replacement until
    coverage reaches min_mask_ratio.

All sampling is a pure function of (input, rng state); see blanklm.rng
for the portable generator contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractError, DegenerateInputError
from .rng import Rng, fisher_yates, poisson
from .vocab import Document

OBJECTIVES = ("short", "document", "sentence")

# Start-position rejection retries before the span length is redrawn.
_PLACEMENT_RETRIES = 20
# Hard cap on length redraws; unreachable in practice at 15% masking.
_MAX_ATTEMPTS = 10_000


@dataclass
class CorruptionConfig:
    lam: float = 3.0
    min_mask_ratio: float = 0.15
    objective: str = "short"
    multi_task: bool = False
    shuffle_spans: bool = True
    sentinel_mode: bool = False

    def __post_init__(self):
        if self.lam <= 0:
            raise ContractError("lambda must be positive")
        if not 0.0 < self.min_mask_ratio < 1.0:
            raise ContractError("min_mask_ratio must be in (0, 1)")
        if self.objective not in OBJECTIVES:
            raise ContractError(f"objective must be one of {OBJECTIVES}")


@dataclass(frozen=True)
class Span:
    start: int
    length: int


@dataclass
class SpanSet:
    """Disjoint spans sorted by start; each length >= 1."""

    spans: list[Span] = field(default_factory=list)

    def __post_init__(self):
        self.spans = sorted(self.spans, key=lambda s: s.start)
        prev_end = -1
        for s in self.spans:
            if s.length < 1:
                raise ContractError("span length must be >= 1")
            if s.start < prev_end:
                raise ContractError("spans overlap")
            prev_end = s.start + s.length

    @property
    def m(self) -> int:
        return len(self.spans)

    def masked_tokens(self) -> int:
        return sum(s.length for s in self.spans)


def sample_short_spans(seq_len: int, rng: Rng, cfg: CorruptionConfig) -> SpanSet:
    """Poisson-length spans until the masked fraction reaches the floor.

    Lengths are clamped to [1, remaining unmasked budget]; starts are drawn
    uniformly and rejected on overlap, with the length redrawn after
    _PLACEMENT_RETRIES failures.
    """
    if seq_len < 2:
        raise DegenerateInputError(f"sequence of {seq_len} tokens cannot be masked")
    occupied = [False] * seq_len
    spans: list[Span] = []
    masked = 0
    attempts = 0
    while masked / seq_len < cfg.min_mask_ratio:
        attempts += 1
        if attempts > _MAX_ATTEMPTS:
            raise DegenerateInputError(
                f"could not reach mask ratio {cfg.min_mask_ratio} on {seq_len} tokens"
            )
        length = min(max(1, poisson(cfg.lam, rng)), seq_len - masked)
        for _ in range(_PLACEMENT_RETRIES):
            start = int(rng.integers(0, seq_len - length + 1))
            if not any(occupied[start : start + length]):
                occupied[start : start + length] = [True] * length
                spans.append(Span(start, length))
                masked += length
                break
    return SpanSet(spans)


def sample_document_span(seq_len: int, rng: Rng) -> SpanSet:
    """One span, length uniform over 50-100% of the sequence."""
    if seq_len < 2:
        raise DegenerateInputError(f"sequence of {seq_len} tokens cannot be masked")
    lo = -(-seq_len // 2)  # ceil(seq_len / 2)
    length = int(rng.integers(lo, seq_len + 1))
    start = int(rng.integers(0, seq_len - length + 1))
    return SpanSet([Span(start, length)])


def sample_sentence_spans(
    doc: Document, rng: Rng, min_mask_ratio: float = 0.15
) -> SpanSet:
    """Whole sentences, drawn without replacement until coverage is reached."""
    extents = doc.sentence_extents()
    if not extents:
        raise DegenerateInputError("document has no sentences")
    total = len(doc.ids)
    remaining = list(range(len(extents)))
    chosen: list[Span] = []
    covered = 0
    while covered / total < min_mask_ratio:
        i = remaining.pop(int(rng.integers(0, len(remaining))))
        start, length = extents[i]
        chosen.append(Span(start, length))
        covered += length
    return SpanSet(chosen)


def choose_objective(rng: Rng, cfg: CorruptionConfig) -> str:
    """Fair coin between short spans and the configured long objective."""
    if not cfg.multi_task:
        return cfg.objective
    long_objective = cfg.objective if cfg.objective != "short" else "document"
    return "short" if rng.random() < 0.5 else long_objective


def permute_spans(span_set: SpanSet, rng: Rng, shuffle_spans: bool) -> tuple[int, ...]:
    """Processing order over span indices (which are sorted by start).

    Shuffle on: uniform permutation (Fisher-Yates). Shuffle off: identity,
    i.e. spans are processed left to right.
    """
    if span_set.m < 1:
        raise ContractError("cannot permute an empty span set")
    if not shuffle_spans:
        return tuple(range(span_set.m))
    return tuple(fisher_yates(span_set.m, rng))
