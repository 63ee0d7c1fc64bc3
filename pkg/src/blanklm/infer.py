"""Inference: candidate scoring, blank-filling decoders, and LM evaluation.

Scoring lays the candidate out teacher-forced behind the context and reads
all its token log-probabilities from a single forward pass. Decoding is a
simple incremental path that re-runs the forward on the growing sequence;
blanks are filled left to right, with earlier fills visible to later ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError
from .layout import GenerationContext, build_generation_context, collate, layout_teacher_forced
from .model import Model
from .rng import Rng
from .vocab import END_ID, MASK, Vocab

STRATEGIES = ("greedy", "topk", "beam")


@dataclass
class ClozePattern:
    """A template with one blank, a label set, and per-label verbalizers.

    File format: first line is the template (with ``___`` as the blank and
    ``{text}`` as the input slot), then one ``label<TAB>verbalizer`` line
    per label. Verbalizers may be multiple tokens.
    """

    template: str
    labels: list[str]
    verbalizers: dict[str, str]

    BLANK = "___"
    TEXT_SLOT = "{text}"

    def __post_init__(self):
        if self.template.split().count(self.BLANK) != 1:
            raise ContractError("template must contain exactly one ___ blank")
        missing = [y for y in self.labels if y not in self.verbalizers]
        if missing:
            raise ContractError(f"labels without verbalizers: {missing}")

    @classmethod
    def parse(cls, text: str) -> "ClozePattern":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) < 2:
            raise ContractError("pattern needs a template line and >= 1 label line")
        labels, verbalizers = [], {}
        for ln in lines[1:]:
            if "\t" not in ln:
                raise ContractError(f"label line missing tab: {ln!r}")
            label, verb = ln.split("\t", 1)
            labels.append(label)
            verbalizers[label] = verb
        return cls(template=lines[0], labels=labels, verbalizers=verbalizers)

    def context_for(self, text: str, vocab: Vocab) -> GenerationContext:
        """Instantiate the template on an input text; blank becomes [MASK]."""
        filled = self.template.replace(self.TEXT_SLOT, text)
        before, after = filled.split(self.BLANK, 1)
        left = vocab.encode(before)
        right = vocab.encode(after)
        return build_generation_context(
            left + right, vocab, positions=[len(left)]
        )

    def verbalizer_ids(self, vocab: Vocab) -> list[list[int]]:
        return [vocab.encode(self.verbalizers[y]) for y in self.labels]


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    max_blank_len: int = 20
    top_k: int = 40
    beam_width: int = 5
    length_penalty: float = 0.0  # exponent alpha; 0 = plain log-probability
    block_repeated_trigrams: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"strategy must be one of {STRATEGIES}")
        if self.top_k < 1 or self.beam_width < 1 or self.max_blank_len < 1:
            raise ContractError("top_k, beam_width and max_blank_len must be >= 1")


@dataclass
class EvalConfig:
    window: int = 64
    overlap: int = 32
    bidirectional: bool = True  # encode the window prefix bidirectionally

    def __post_init__(self):
        if self.window < 2:
            raise ContractError("window must be >= 2")
        if not 0 < self.overlap <= self.window:
            raise ContractError("overlap must be in (0, window]")


# ---------------------------------------------------------------------------
# scoring


def _forward_single(model: Model, example) -> np.ndarray:
    """Logits [L, V] for one example (batch of one, eval mode)."""
    batch = collate([example], dtype=model.params["tok_emb"].dtype)
    return model.forward(batch).data[0]


def _log_softmax(row: np.ndarray) -> np.ndarray:
    m = row.max()
    e = np.exp(row - m)
    return row - m - math.log(float(e.sum()))


def score_candidate(
    model: Model,
    ctx: GenerationContext,
    candidate: list[int],
    include_end: bool = True,
) -> float:
    """Total log-probability of a candidate filling a single blank.

    One teacher-forced forward; sums log p of every candidate token given
    its antecedents, plus the end-of-span term unless ``include_end`` is
    off (the fixed-length normalization check excludes it).
    """
    if len(ctx.blank_positions) != 1:
        raise ContractError("score_candidate expects exactly one blank")
    vocab_size = model.cfg.vocab_size
    if any(not 0 <= t < vocab_size for t in candidate):
        raise ContractError("candidate token outside the vocabulary")
    example = layout_teacher_forced(ctx, [candidate])
    logits = _forward_single(model, example)
    fill_start = example.context_len
    total = 0.0
    steps = len(candidate) + (1 if include_end else 0)
    for j in range(steps):
        pos = fill_start + j
        target = int(example.target_ids[pos])
        total += float(_log_softmax(logits[pos])[target])
    return total


def score_candidate_stepwise(
    model: Model,
    ctx: GenerationContext,
    candidate: list[int],
    include_end: bool = True,
) -> float:
    """Oracle for score_candidate: one forward per decode step."""
    if len(ctx.blank_positions) != 1:
        raise ContractError("score_candidate expects exactly one blank")
    total = 0.0
    steps = len(candidate) + (1 if include_end else 0)
    for j in range(steps):
        prefix = list(candidate[:j])
        example = layout_teacher_forced(ctx, [prefix])
        logits = _forward_single(model, example)
        target = candidate[j] if j < len(candidate) else END_ID
        total += float(_log_softmax(logits[-1])[int(target)])
    return total


def cloze_distribution(scores) -> np.ndarray:
    """Softmax over per-label scores, max-subtracted for stability."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 1:
        raise ContractError("need at least one label score")
    m = s.max()
    e = np.exp(s - m)
    return e / e.sum()


def score_labels(
    model: Model, ctx: GenerationContext, pattern: ClozePattern, vocab: Vocab
) -> np.ndarray:
    """Per-label probabilities for one instantiated cloze context."""
    scores = [
        score_candidate(model, ctx, v) for v in pattern.verbalizer_ids(vocab)
    ]
    return cloze_distribution(scores)


# ---------------------------------------------------------------------------
# decoding


@dataclass
class BlankFill:
    blank_index: int
    tokens: list[int]
    logprob: float
    truncated: bool = False


def _next_logprobs(model: Model, ctx, fills: list[list[int]]) -> np.ndarray:
    """Log-probability row for the next token of the last open fill."""
    example = layout_teacher_forced(ctx, fills)
    logits = _forward_single(model, example)
    return _log_softmax(logits[-1])


def _has_repeated_trigram(tokens: list[int]) -> bool:
    seen = set()
    for i in range(len(tokens) - 2):
        tri = tuple(tokens[i : i + 3])
        if tri in seen:
            return True
        seen.add(tri)
    return False


def _blocked_tokens(tokens: list[int]) -> set[int]:
    """Tokens that would complete an already-seen trigram."""
    if len(tokens) < 2:
        return set()
    blocked = set()
    last2 = (tokens[-2], tokens[-1])
    for i in range(len(tokens) - 2):
        if (tokens[i], tokens[i + 1]) == last2:
            blocked.add(tokens[i + 2])
    return blocked


def _decode_one_blank_sequential(
    model: Model,
    ctx: GenerationContext,
    done_fills: list[list[int]],
    cfg: DecodeConfig,
    rng: Rng | None,
) -> BlankFill:
    """Greedy or top-k decoding of the next blank."""
    tokens: list[int] = []
    logprob = 0.0
    for _ in range(cfg.max_blank_len + 1):  # +1 for the end-of-span step
        lp = _next_logprobs(model, ctx, done_fills + [tokens])
        if cfg.strategy == "greedy" or cfg.top_k == 1:
            nxt = int(lp.argmax())  # argmax takes the lowest id on ties
        else:
            k = min(cfg.top_k, lp.size)
            top = np.argsort(-lp, kind="stable")[:k]  # ties: lowest id first
            probs = np.exp(lp[top] - lp[top].max())
            probs /= probs.sum()
            if rng is None:
                raise ContractError("top-k sampling needs an rng")
            nxt = int(top[rng.choice(k, p=probs)])
        logprob += float(lp[nxt])
        if nxt == END_ID:
            return BlankFill(0, tokens, logprob)
        tokens.append(nxt)
        if len(tokens) >= cfg.max_blank_len:
            return BlankFill(0, tokens, logprob, truncated=True)
    return BlankFill(0, tokens, logprob, truncated=True)


@dataclass
class _Hyp:
    tokens: list[int]
    logprob: float
    finished: bool = False
    truncated: bool = False


def _length_penalty(n_tokens: int, alpha: float) -> float:
    return ((5.0 + n_tokens) / 6.0) ** alpha


def _decode_one_blank_beam(
    model: Model,
    ctx: GenerationContext,
    done_fills: list[list[int]],
    cfg: DecodeConfig,
) -> BlankFill:
    """Beam search with trigram blocking and a length-penalized final rank."""
    beams = [_Hyp([], 0.0)]
    finished: list[_Hyp] = []
    for _ in range(cfg.max_blank_len + 1):
        candidates: list[_Hyp] = []
        for hyp in beams:
            lp = _next_logprobs(model, ctx, done_fills + [hyp.tokens])
            if cfg.block_repeated_trigrams:
                blocked = _blocked_tokens(hyp.tokens)
                if blocked:
                    lp = lp.copy()
                    lp[list(blocked)] = -np.inf
            order = np.argsort(-lp, kind="stable")[: cfg.beam_width + 1]
            for tok in order:
                tok = int(tok)
                score = hyp.logprob + float(lp[tok])
                if not np.isfinite(score):
                    continue
                if tok == END_ID:
                    candidates.append(_Hyp(list(hyp.tokens), score, finished=True))
                else:
                    candidates.append(_Hyp(hyp.tokens + [tok], score))
        candidates.sort(key=lambda h: (-h.logprob, h.tokens))
        beams = []
        for h in candidates:
            if h.finished:
                finished.append(h)
            elif len(h.tokens) >= cfg.max_blank_len:
                h.truncated = True
                finished.append(h)
            else:
                beams.append(h)
            if len(beams) >= cfg.beam_width:
                break
        if not beams or len(finished) >= cfg.beam_width:
            break
    if not finished:
        finished = beams
    best = max(
        finished,
        key=lambda h: h.logprob / _length_penalty(len(h.tokens), cfg.length_penalty),
    )
    return BlankFill(0, best.tokens, best.logprob, truncated=best.truncated)


def infill(
    model: Model,
    ctx: GenerationContext,
    cfg: DecodeConfig,
    rng: Rng | None = None,
) -> list[BlankFill]:
    """Fill every blank left to right; earlier fills are visible context."""
    if not ctx.blank_positions:
        raise ContractError("context has no blanks")
    done: list[list[int]] = []
    results: list[BlankFill] = []
    for i in range(len(ctx.blank_positions)):
        if cfg.strategy == "beam":
            fill = _decode_one_blank_beam(model, ctx, done, cfg)
        else:
            fill = _decode_one_blank_sequential(model, ctx, done, cfg, rng)
        fill.blank_index = i
        results.append(fill)
        done.append(fill.tokens)
    return results


def parse_infill_text(text: str, vocab: Vocab) -> GenerationContext:
    """Context from raw text with literal [MASK] markers, one per blank.

    Runs of adjacent markers collapse into a single blank.
    """
    words = text.split()
    tokens: list[int] = []
    positions: list[int] = []
    prev_was_mask = False
    for w in words:
        if w == MASK:
            if not prev_was_mask:
                positions.append(len(tokens))
            prev_was_mask = True
        else:
            tokens.append(vocab.id(w.lower()))
            prev_was_mask = False
    if not positions:
        raise ContractError(f"no {MASK} marker in input text")
    return build_generation_context(tokens, vocab, positions=positions)


# ---------------------------------------------------------------------------
# language-model evaluation


def _window_nll(
    model: Model,
    window: list[int],
    n_scored: int,
    bidirectional: bool,
    uniform_logits: bool,
) -> float:
    """Total NLL of the last ``n_scored`` tokens of a window."""
    if bidirectional:
        prefix, suffix = window[:-n_scored], window[-n_scored:]
        ctx = build_generation_context(list(prefix), None, n_blanks=1)
        example = layout_teacher_forced(ctx, [list(suffix)])
        scored_from = example.context_len
    else:
        ctx = build_generation_context([], None, n_blanks=1)
        example = layout_teacher_forced(ctx, [list(window)])
        scored_from = example.context_len + (len(window) - n_scored)
    if uniform_logits:
        return n_scored * math.log(model.cfg.vocab_size)
    logits = _forward_single(model, example)
    total = 0.0
    for pos in range(scored_from, scored_from + n_scored):
        target = int(example.target_ids[pos])
        total -= float(_log_softmax(logits[pos])[target])
    return total


def eval_perplexity(
    model: Model,
    stream: list[int],
    cfg: EvalConfig,
    uniform_logits: bool = False,
) -> float:
    """Sliding-window perplexity; each token is scored exactly once.

    The first window scores all its tokens; subsequent windows advance by
    the overlap and score only their new tokens. ``uniform_logits`` is a
    debug identity: every token costs log(V).
    """
    t = len(stream)
    if t < 2:
        raise ContractError("stream must have at least 2 tokens")
    total_nll = 0.0
    end = min(cfg.window, t)
    total_nll += _window_nll(
        model, stream[:end], end, cfg.bidirectional, uniform_logits
    )
    while end < t:
        new_end = min(end + cfg.overlap, t)
        n_new = new_end - end
        window = stream[max(0, new_end - cfg.window) : new_end]
        total_nll += _window_nll(
            model, window, n_new, cfg.bidirectional, uniform_logits
        )
        end = new_end
    return math.exp(total_nll / t)


def eval_last_word(
    model: Model, passages: list[tuple[list[int], list[int]]]
) -> float:
    """Accuracy of teacher-forced final-word prediction.

    A passage counts as correct only if the argmax matches the gold token
    at every position of the (possibly multi-token) answer.
    """
    if not passages:
        raise DegenerateInputError("no passages to evaluate")
    correct = 0
    for context, answer in passages:
        if not answer:
            raise ContractError("passage with empty answer")
        ctx = build_generation_context(list(context), None, n_blanks=1)
        example = layout_teacher_forced(ctx, [list(answer)])
        logits = _forward_single(model, example)
        start = example.context_len
        ok = all(
            int(logits[start + j].argmax()) == int(answer[j])
            for j in range(len(answer))
        )
        correct += int(ok)
    return correct / len(passages)
