"""Shared fixtures: toy corpora and trained models reused across the suite.

The overfit run (acceptance criterion material) is session-scoped so the
2000-step training happens once.
"""

from __future__ import annotations

import numpy as np
import pytest

from blanklm.model import Model, ModelConfig
from blanklm.rng import new_rng
from blanklm.spans import CorruptionConfig
from blanklm.train import TrainConfig, train_loop
from blanklm.vocab import Document, Vocab, build_vocab

N_SENTENCES = 32
WORDS_PER_SENTENCE = 11
N_CONTENT_WORDS = 224  # + '.' + 5 reserved = 230 <= 256


def toy_corpus_lines(
    n_sent: int = N_SENTENCES,
    n_words: int = WORDS_PER_SENTENCE,
    n_vocab: int = N_CONTENT_WORDS,
) -> list[str]:
    """Synthetic memorization corpus: word (i, p) is w[(i*n_words+p) % n_vocab].

    Words repeat across sentences at different positions, so any two
    visible words identify the sentence while the vocabulary stays small.
    """
    return [
        " ".join(f"w{(i * n_words + p) % n_vocab:03d}" for p in range(n_words)) + " ."
        for i in range(n_sent)
    ]


@pytest.fixture(scope="session")
def toy_corpus() -> tuple[list[str], Vocab, list[Document]]:
    lines = toy_corpus_lines()
    vocab = build_vocab(lines, 256)
    docs = [Document.from_text(line, vocab) for line in lines]
    return lines, vocab, docs


def overfit_configs(vocab_size: int) -> tuple[ModelConfig, TrainConfig, CorruptionConfig]:
    mcfg = ModelConfig(
        vocab_size=vocab_size,
        n_layers=2,
        hidden_size=128,
        n_heads=8,
        ffn_size=512,
        max_pos1=64,
        max_pos2=32,
        dropout=0.0,
        attn_dropout=0.0,
    )
    tcfg = TrainConfig(
        peak_lr=2e-3,
        warmup_steps=100,
        max_steps=2000,
        batch_size=32,
        seed=0,
        max_seq_len=40,
        deterministic=True,
        checkpoint_interval=2000,
    )
    return mcfg, tcfg, CorruptionConfig()


@pytest.fixture(scope="session")
def overfit_run(toy_corpus, tmp_path_factory):
    """2000-step short-span pretraining on the toy corpus (one per session)."""
    _, vocab, docs = toy_corpus
    mcfg, tcfg, ccfg = overfit_configs(len(vocab))
    model = Model.init(mcfg, new_rng(0))
    metrics = tmp_path_factory.mktemp("overfit") / "metrics.csv"
    train_loop(docs, vocab, model, tcfg, ccfg, metrics_path=metrics)
    return {
        "model": model,
        "vocab": vocab,
        "docs": docs,
        "metrics": metrics,
        "tcfg": tcfg,
        "ccfg": ccfg,
    }


@pytest.fixture(scope="session")
def tiny_trained_model():
    """A small model trained briefly on random data; weights are not special.

    Used where tests need a non-degenerate (asymmetric) trained model but
    memorization quality is irrelevant.
    """
    from blanklm.layout import collate, layout_teacher_forced, build_generation_context
    from blanklm.tensor import Tape, backward
    from blanklm.train import TrainState, adam_step, clip_gradients, pretrain_loss

    rng = np.random.default_rng(42)
    cfg = ModelConfig(
        vocab_size=24,
        n_layers=2,
        hidden_size=32,
        n_heads=4,
        ffn_size=64,
        max_pos1=48,
        max_pos2=24,
        dropout=0.0,
        attn_dropout=0.0,
    )
    model = Model.init(cfg, new_rng(3))
    tcfg = TrainConfig(peak_lr=1e-3, warmup_steps=5, max_steps=60, seed=3)
    state = TrainState.init(model)
    for _ in range(50):
        examples = []
        for _ in range(8):
            ctx_tokens = rng.integers(5, cfg.vocab_size, size=6).tolist()
            fill = rng.integers(5, cfg.vocab_size, size=3).tolist()
            ctx = build_generation_context(ctx_tokens, None, n_blanks=1)
            examples.append(layout_teacher_forced(ctx, [fill]))
        batch = collate(examples)
        with Tape() as tape:
            loss = pretrain_loss(model.forward(batch), batch)
        backward(tape, loss)
        grads = {n: t.grad for n, t in model.params.items() if t.grad is not None}
        clip_gradients(grads, tcfg.grad_clip)
        adam_step(state, model, grads, 1e-3, tcfg)
        model.zero_grads()
    return model
