"""Lay out (tokens, spans, order) as a single model input sequence.

The laid-out sequence has two segments:

  * context segment: the input with every masked span collapsed to one
    [MASK] (or a per-span sentinel). Fully bidirectional attention.
  * fill segment: for each span, in processing order, [START] followed by
    the span's tokens. Causal attention over the context and everything
    before it in the fill segment. The target at each fill position is the
    next span token, with [END] as the final target of each span.

Every position carries two position ids: pos1 is the index in the
corrupted context (fill tokens reuse the index of their span's mask
token), pos2 is the intra-span index (0 on the context, 1..len+1 within
each laid-out span). pos1 is 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, LengthError
from .spans import SpanSet
from .vocab import END_ID, MASK_ID, PAD_ID, START_ID, Vocab

NEG_MASK = -1e9  # additive attention bias for disallowed pairs


@dataclass
class InfillExample:
    """One laid-out training or scoring instance."""

    input_ids: np.ndarray  # int64 [L], context then fill
    pos1: np.ndarray  # int64 [L]
    pos2: np.ndarray  # int64 [L]
    context_len: int
    fill_lens: list[int]  # laid-out length of each blank (span len + 1)
    target_ids: np.ndarray  # int64 [L]; PAD on context positions
    loss_mask: np.ndarray  # bool [L]; true exactly on fill positions

    def __len__(self) -> int:
        return len(self.input_ids)

    def mask_spec(self) -> "AttentionMaskSpec":
        return AttentionMaskSpec(self.context_len, list(self.fill_lens))


@dataclass
class AttentionMaskSpec:
    """Enough structure to materialize the boolean attention matrix."""

    context_len: int
    fill_lens: list[int]

    @property
    def total_len(self) -> int:
        return self.context_len + sum(self.fill_lens)


def build_attention_mask(spec: AttentionMaskSpec) -> np.ndarray:
    """Boolean [L, L] matrix; True means query row may attend to key column.

    Context queries see the whole context and nothing else; fill queries
    see the context plus fill positions up to and including themselves.
    """
    n = spec.total_len
    a = spec.context_len
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:a, :a] = True
    for q in range(a, n):
        allowed[q, : q + 1] = True
    return allowed


def build_example(
    tokens: list[int],
    span_set: SpanSet,
    order: tuple[int, ...],
    vocab: Vocab,
    sentinel_mode: bool = False,
    max_len: int | None = None,
) -> InfillExample:
    """Assemble the full two-segment layout for one corrupted input."""
    if len(order) != span_set.m:
        raise ContractError("permutation length does not match span count")
    if sorted(order) != list(range(span_set.m)):
        raise ContractError("order is not a permutation of the spans")
    spans = span_set.spans
    if spans and spans[-1].start + spans[-1].length > len(tokens):
        raise ContractError("span extends past end of tokens")
    if sentinel_mode and span_set.m > vocab.n_sentinels:
        raise ContractError(
            f"{span_set.m} spans but vocab has only {vocab.n_sentinels} sentinels"
        )

    context: list[int] = []
    mask_pos: list[int] = []  # context index of each span's mask token
    cursor = 0
    for rank, s in enumerate(spans):
        context.extend(tokens[cursor : s.start])
        mask_pos.append(len(context))
        context.append(vocab.sentinel_id(rank + 1) if sentinel_mode else MASK_ID)
        cursor = s.start + s.length
    context.extend(tokens[cursor:])

    ids = list(context)
    pos1 = list(range(len(context)))
    pos2 = [0] * len(context)
    targets = [PAD_ID] * len(context)
    fill_lens: list[int] = []
    for idx in order:
        s = spans[idx]
        body = tokens[s.start : s.start + s.length]
        ids.extend([START_ID] + body)
        pos1.extend([mask_pos[idx]] * (s.length + 1))
        pos2.extend(range(1, s.length + 2))
        targets.extend(body + [END_ID])
        fill_lens.append(s.length + 1)

    if max_len is not None and len(ids) > max_len:
        raise LengthError(f"laid-out length {len(ids)} exceeds max {max_len}")

    context_len = len(context)
    loss = np.zeros(len(ids), dtype=bool)
    loss[context_len:] = True
    return InfillExample(
        input_ids=np.asarray(ids, dtype=np.int64),
        pos1=np.asarray(pos1, dtype=np.int64),
        pos2=np.asarray(pos2, dtype=np.int64),
        context_len=context_len,
        fill_lens=fill_lens,
        target_ids=np.asarray(targets, dtype=np.int64),
        loss_mask=loss,
    )


@dataclass
class GenerationContext:
    """A corrupted context ready for decoding or teacher-forced scoring."""

    context_ids: np.ndarray  # int64, includes the mask tokens
    blank_positions: list[int]  # index of each blank's mask token


def build_generation_context(
    context_tokens: list[int],
    vocab: Vocab,
    n_blanks: int = 1,
    positions: list[int] | None = None,
) -> GenerationContext:
    """Insert [MASK] tokens into a context.

    ``positions`` are insertion points into the original token list (so two
    blank markers around existing text land at increasing final indices);
    when omitted, ``n_blanks`` masks are appended at the end.
    """
    del vocab  # reserved ids are fixed; kept for interface symmetry
    if positions is None:
        positions = [len(context_tokens)] * n_blanks
    if not positions and not context_tokens:
        raise ContractError("need at least one blank or some context")
    if any(p < 0 or p > len(context_tokens) for p in positions):
        raise ContractError("blank position outside the context")
    if sorted(positions) != list(positions):
        raise ContractError("blank positions must be non-decreasing")

    ids: list[int] = []
    blanks: list[int] = []
    cursor = 0
    for p in positions:
        ids.extend(context_tokens[cursor:p])
        blanks.append(len(ids))
        ids.append(MASK_ID)
        cursor = p
    ids.extend(context_tokens[cursor:])
    return GenerationContext(
        context_ids=np.asarray(ids, dtype=np.int64), blank_positions=blanks
    )


def layout_teacher_forced(
    ctx: GenerationContext, fills: list[list[int]]
) -> InfillExample:
    """Lay out known fill token sequences behind a generation context.

    ``fills`` has one token list per blank, left to right; trailing blanks
    may be omitted (e.g. while earlier blanks are still being decoded).
    """
    if len(fills) > len(ctx.blank_positions):
        raise ContractError("more fills than blanks")
    ids = list(ctx.context_ids)
    context_len = len(ids)
    pos1 = list(range(context_len))
    pos2 = [0] * context_len
    targets = [PAD_ID] * context_len
    fill_lens = []
    for blank_pos, body in zip(ctx.blank_positions, fills):
        ids.extend([START_ID] + list(body))
        pos1.extend([blank_pos] * (len(body) + 1))
        pos2.extend(range(1, len(body) + 2))
        targets.extend(list(body) + [END_ID])
        fill_lens.append(len(body) + 1)
    loss = np.zeros(len(ids), dtype=bool)
    loss[context_len:] = True
    return InfillExample(
        input_ids=np.asarray(ids, dtype=np.int64),
        pos1=np.asarray(pos1, dtype=np.int64),
        pos2=np.asarray(pos2, dtype=np.int64),
        context_len=context_len,
        fill_lens=fill_lens,
        target_ids=np.asarray(targets, dtype=np.int64),
        loss_mask=loss,
    )


@dataclass
class Batch:
    """Padded batch of examples plus the additive attention bias."""

    input_ids: np.ndarray  # int64 [B, S]
    pos1: np.ndarray  # int64 [B, S]
    pos2: np.ndarray  # int64 [B, S]
    attn_bias: np.ndarray  # float32 [B, 1, S, S]; 0 allowed, NEG_MASK not
    target_ids: np.ndarray  # int64 [B, S]
    loss_mask: np.ndarray  # bool [B, S]
    lengths: list[int] = field(default_factory=list)

    @property
    def n_loss_tokens(self) -> int:
        return int(self.loss_mask.sum())


def collate(examples: list[InfillExample], dtype=np.float32) -> Batch:
    """Pad to the longest example; pad keys are hidden from real queries.

    Pad query rows are given a causal self-view purely so their softmax
    rows are well defined; their outputs are never read.
    """
    if not examples:
        raise ContractError("cannot collate an empty batch")
    b = len(examples)
    s = max(len(e) for e in examples)
    ids = np.full((b, s), PAD_ID, dtype=np.int64)
    pos1 = np.zeros((b, s), dtype=np.int64)
    pos2 = np.zeros((b, s), dtype=np.int64)
    targets = np.full((b, s), PAD_ID, dtype=np.int64)
    loss = np.zeros((b, s), dtype=bool)
    bias = np.full((b, 1, s, s), NEG_MASK, dtype=dtype)
    lengths = []
    for i, e in enumerate(examples):
        n = len(e)
        lengths.append(n)
        ids[i, :n] = e.input_ids
        pos1[i, :n] = e.pos1
        pos2[i, :n] = e.pos2
        targets[i, :n] = e.target_ids
        loss[i, :n] = e.loss_mask
        allowed = build_attention_mask(e.mask_spec())
        bias[i, 0, :n, :n] = np.where(allowed, 0.0, NEG_MASK)
        for q in range(n, s):
            bias[i, 0, q, : q + 1] = 0.0
    return Batch(ids, pos1, pos2, bias, targets, loss, lengths)


def dump_example(example: InfillExample, vocab: Vocab) -> str:
    """Human-readable rendering of a laid-out example, for docs and goldens."""
    toks = [vocab.token(int(i)) for i in example.input_ids]
    tgts = [
        vocab.token(int(t)) if m else "."
        for t, m in zip(example.target_ids, example.loss_mask)
    ]
    width = max(len(t) for t in toks + tgts)
    rows = [
        "tokens : " + " ".join(t.rjust(width) for t in toks),
        "pos1   : " + " ".join(str(int(p)).rjust(width) for p in example.pos1),
        "pos2   : " + " ".join(str(int(p)).rjust(width) for p in example.pos2),
        "target : " + " ".join(t.rjust(width) for t in tgts),
        "mask rows (x = may attend):",
    ]
    allowed = build_attention_mask(example.mask_spec())
    for q in range(len(example)):
        rows.append("  " + "".join("x" if a else "." for a in allowed[q]))
    return "\n".join(rows)
