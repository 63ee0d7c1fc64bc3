"""Training: Adam with warmup + cosine decay, gradient clipping, and the
pretraining / finetuning loops.

The loss is the mean negative log-likelihood per fill token (teacher
forcing over the laid-out fill segment), which is a Monte-Carlo estimate
of the span-infilling objective under the sampled processing order.

Batch assembly is stateless: example ``i`` of a run is built with
``example_rng(seed, i)``, so a resumed run sees exactly the batches the
uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateInputError, NumericError
from .layout import (
    Batch,
    GenerationContext,
    InfillExample,
    build_example,
    build_generation_context,
    collate,
    layout_teacher_forced,
)
from .model import Model, save_checkpoint
from .rng import STREAM_DROPOUT, derive_rng, example_rng
from .spans import (
    CorruptionConfig,
    choose_objective,
    permute_spans,
    sample_document_span,
    sample_sentence_spans,
    sample_short_spans,
)
from .tensor import Tape, Tensor, backward
from .vocab import Document, Vocab

METRICS_HEADER = ["step", "loss", "lr", "tokens_per_sec"]


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    warmup_steps: int = 100
    max_steps: int = 2000
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    label_smoothing: float = 0.0
    seed: int = 0
    max_seq_len: int = 64
    checkpoint_interval: int = 500
    deterministic: bool = False  # dropout off, timing column zeroed

    def __post_init__(self):
        if self.warmup_steps >= self.max_steps:
            raise ContractError("warmup_steps must be < max_steps")
        if min(self.peak_lr, self.adam_eps, self.grad_clip) <= 0:
            raise ContractError("rates must be positive")
        if min(self.batch_size, self.max_seq_len) < 1:
            raise ContractError("batch_size and max_seq_len must be positive")


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, model: Model) -> "TrainState":
        return cls(
            step=0,
            m={n: np.zeros_like(t.data) for n, t in model.params.items()},
            v={n: np.zeros_like(t.data) for n, t in model.params.items()},
        )

    def opt_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for n, a in self.m.items():
            out["m." + n] = a
        for n, a in self.v.items():
            out["v." + n] = a
        return out

    @classmethod
    def from_opt_tensors(
        cls, step: int, tensors: dict[str, np.ndarray]
    ) -> "TrainState":
        m = {k[2:]: v for k, v in tensors.items() if k.startswith("m.")}
        v = {k[2:]: v for k, v in tensors.items() if k.startswith("v.")}
        return cls(step=step, m=m, v=v)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to peak over warmup, then half-cosine down to zero."""
    if step < 0 or step > cfg.max_steps:
        raise ContractError(f"step {step} outside [0, {cfg.max_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.max_steps - cfg.warmup_steps)
    return max(0.0, cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip norm. Scaling happens in place.
    """
    sq = 0.0
    for g in grads.values():
        sq += float(np.vdot(g, g))
    norm = math.sqrt(sq)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def _decayed(t: Tensor) -> bool:
    # Decoupled weight decay on matrices only; norm gains and biases are 1D.
    return t.ndim >= 2


def adam_step(
    state: TrainState,
    model: Model,
    grads: dict[str, np.ndarray],
    lr: float,
    cfg: TrainConfig,
) -> None:
    """Bias-corrected Adam with decoupled weight decay. Increments the step.

    Raises NumericError (leaving state untouched) if any gradient is
    non-finite after clipping.
    """
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {n}")
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for n, p in model.params.items():
        g = grads.get(n)
        if g is None:
            continue
        m = state.m[n]
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay > 0 and _decayed(p):
            update = update + cfg.weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)
    state.step = t


def pretrain_loss(logits: Tensor, batch: Batch, label_smoothing: float = 0.0) -> Tensor:
    """Mean token NLL over fill positions (teacher forcing)."""
    if batch.n_loss_tokens == 0:
        raise DegenerateInputError("batch has no fill tokens to score")
    b, s, v = logits.shape
    flat = T.reshape(logits, (b * s, v))
    return T.cross_entropy_with_logits(
        flat,
        batch.target_ids.reshape(-1),
        batch.loss_mask.reshape(-1),
        label_smoothing=label_smoothing,
    )


def make_example(
    docs: list[Document],
    vocab: Vocab,
    ccfg: CorruptionConfig,
    tcfg: TrainConfig,
    example_index: int,
) -> InfillExample:
    """Stateless per-example pipeline: pick, corrupt, lay out."""
    rng = example_rng(tcfg.seed, example_index)
    doc = docs[int(rng.integers(0, len(docs)))].truncated(tcfg.max_seq_len)
    objective = choose_objective(rng, ccfg)
    if objective == "short":
        span_set = sample_short_spans(len(doc.ids), rng, ccfg)
    elif objective == "document":
        span_set = sample_document_span(len(doc.ids), rng)
    else:
        span_set = sample_sentence_spans(doc, rng, ccfg.min_mask_ratio)
    order = permute_spans(span_set, rng, ccfg.shuffle_spans)
    return build_example(
        doc.ids, span_set, order, vocab, sentinel_mode=ccfg.sentinel_mode
    )


def assemble_batch(
    docs: list[Document],
    vocab: Vocab,
    ccfg: CorruptionConfig,
    tcfg: TrainConfig,
    step: int,
) -> Batch:
    """Batch for 1-based step ``step``; examples are globally indexed."""
    base = (step - 1) * tcfg.batch_size
    examples = [
        make_example(docs, vocab, ccfg, tcfg, base + i)
        for i in range(tcfg.batch_size)
    ]
    return collate(examples)


def train_loop(
    docs: list[Document],
    vocab: Vocab,
    model: Model,
    tcfg: TrainConfig,
    ccfg: CorruptionConfig,
    metrics_path: str | Path,
    checkpoint_path: str | Path | None = None,
    state: TrainState | None = None,
    extra_header: dict | None = None,
    log_every: int = 0,
    stop_at_step: int | None = None,
) -> TrainState:
    """Run (or resume) pretraining; appends one metrics row per step.

    When ``state`` is given, training resumes from ``state.step`` and rows
    are appended to an existing metrics file. ``stop_at_step`` pauses a run
    early without changing the schedule (which is pinned to max_steps).
    """
    if not docs:
        raise DegenerateInputError("empty corpus")
    end_step = min(stop_at_step or tcfg.max_steps, tcfg.max_steps)
    resuming = state is not None
    if state is None:
        state = TrainState.init(model)

    metrics_path = Path(metrics_path)
    mode = "a" if resuming and metrics_path.exists() else "w"
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRICS_HEADER)
        while state.step < end_step:
            step = state.step + 1
            t0 = time.perf_counter()
            batch = assemble_batch(docs, vocab, ccfg, tcfg, step)
            drop_rng = (
                None
                if tcfg.deterministic
                else derive_rng(tcfg.seed, STREAM_DROPOUT, step)
            )
            train_mode = not tcfg.deterministic
            try:
                with Tape() as tape:
                    logits = model.forward(batch, train=train_mode, rng=drop_rng)
                    loss = pretrain_loss(logits, batch, tcfg.label_smoothing)
                backward(tape, loss)
                grads = {
                    n: t.grad for n, t in model.params.items() if t.grad is not None
                }
                clip_gradients(grads, tcfg.grad_clip)
                lr = lr_schedule(step, tcfg)
                adam_step(state, model, grads, lr, tcfg)
            except NumericError as e:
                raise NumericError(f"step {step}: {e}") from e
            model.zero_grads()

            elapsed = time.perf_counter() - t0
            tps = 0.0 if tcfg.deterministic else batch.input_ids.size / elapsed
            writer.writerow(
                [step, f"{loss.item():.6f}", f"{lr:.8g}", f"{tps:.3f}"]
            )
            if log_every and step % log_every == 0:
                print(f"step {step}: loss {loss.item():.4f} lr {lr:.3g}")
            if checkpoint_path and (
                step % tcfg.checkpoint_interval == 0 or step == end_step
            ):
                _save_training_checkpoint(
                    model, state, tcfg, checkpoint_path, extra_header
                )
    return state


def _save_training_checkpoint(model, state, tcfg, path, extra_header=None):
    header = {"step": state.step, "seed": tcfg.seed}
    header.update(extra_header or {})
    save_checkpoint(
        model.params, model.cfg, path, extra_header=header,
        opt_tensors=state.opt_tensors(),
    )


# ---------------------------------------------------------------------------
# finetuning


@dataclass
class ClozeBatchLayout:
    """All (example, label) candidate layouts for one cloze batch."""

    batch: Batch
    n_examples: int
    n_labels: int


def _cloze_layouts(
    contexts: list[GenerationContext], verbalizers: list[list[int]]
) -> ClozeBatchLayout:
    examples = []
    for ctx in contexts:
        for v in verbalizers:
            examples.append(layout_teacher_forced(ctx, [v]))
    return ClozeBatchLayout(collate(examples), len(contexts), len(verbalizers))


def cloze_label_scores(
    model: Model, contexts: list[GenerationContext], verbalizers: list[list[int]]
) -> Tensor:
    """Differentiable per-label candidate log-probabilities, shape [B, L].

    Each score is the teacher-forced sum of verbalizer-token log-probs
    plus the end-of-span log-prob, all from one forward pass.
    """
    lay = _cloze_layouts(contexts, verbalizers)
    logits = model.forward(lay.batch)
    scores = T.sequence_logprob(
        logits, lay.batch.target_ids, lay.batch.loss_mask
    )
    return T.reshape(scores, (lay.n_examples, lay.n_labels))


def finetune_cloze_step(
    model: Model,
    contexts: list[GenerationContext],
    verbalizers: list[list[int]],
    gold: list[int],
    state: TrainState,
    tcfg: TrainConfig,
) -> float:
    """One optimization step of the label-softmax cloze loss.

    The label distribution is the softmax of candidate scores; the loss is
    cross-entropy against the gold label, backpropagated through the
    per-candidate sequence scores.
    """
    with Tape() as tape:
        scores = cloze_label_scores(model, contexts, verbalizers)
        loss = T.cross_entropy_with_logits(
            scores, np.asarray(gold), np.ones(len(gold), dtype=bool)
        )
    backward(tape, loss)
    grads = {n: t.grad for n, t in model.params.items() if t.grad is not None}
    clip_gradients(grads, tcfg.grad_clip)
    adam_step(state, model, grads, lr_schedule(state.step + 1, tcfg), tcfg)
    model.zero_grads()
    return loss.item()


def seq2seq_example(source: list[int], target: list[int], vocab: Vocab) -> InfillExample:
    """Source becomes the context with one trailing blank; target fills it."""
    if not target:
        raise DegenerateInputError("empty target sequence")
    ctx = build_generation_context(source, vocab, n_blanks=1)
    return layout_teacher_forced(ctx, [target])


def seq2seq_loss(
    model: Model,
    pairs: list[tuple[list[int], list[int]]],
    vocab: Vocab,
    label_smoothing: float = 0.1,
) -> tuple[Tensor, Batch]:
    batch = collate([seq2seq_example(s, t, vocab) for s, t in pairs])
    logits = model.forward(batch)
    return pretrain_loss(logits, batch, label_smoothing=label_smoothing), batch


def finetune_seq2seq_step(
    model: Model,
    pairs: list[tuple[list[int], list[int]]],
    vocab: Vocab,
    state: TrainState,
    tcfg: TrainConfig,
) -> float:
    """One optimization step of label-smoothed generation finetuning."""
    with Tape() as tape:
        loss, _ = seq2seq_loss(model, pairs, vocab, tcfg.label_smoothing)
    backward(tape, loss)
    grads = {n: t.grad for n, t in model.params.items() if t.grad is not None}
    clip_gradients(grads, tcfg.grad_clip)
    adam_step(state, model, grads, lr_schedule(state.step + 1, tcfg), tcfg)
    model.zero_grads()
    return loss.item()


def teacher_forced_accuracy(model: Model, batch: Batch) -> float:
    """Fraction of fill positions where argmax equals the target."""
    logits = model.forward(batch)
    pred = logits.data.argmax(axis=-1)
    mask = batch.loss_mask
    if not mask.any():
        raise DegenerateInputError("batch has no fill tokens")
    return float((pred[mask] == batch.target_ids[mask]).mean())
