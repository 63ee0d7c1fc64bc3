"""Sequence layout: two-segment assembly, positions, attention mask."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blanklm.errors import ContractError, LengthError
from blanklm.layout import (
    AttentionMaskSpec,
    build_attention_mask,
    build_example,
    build_generation_context,
    collate,
    dump_example,
    layout_teacher_forced,
)
from blanklm.spans import Span, SpanSet
from blanklm.vocab import END_ID, MASK_ID, PAD_ID, START_ID, build_vocab


@pytest.fixture(scope="module")
def vocab6():
    return build_vocab(["x1 x2 x3 x4 x5 x6"], 32, n_sentinels=4)


@pytest.fixture(scope="module")
def tokens6(vocab6):
    return [vocab6.id(f"x{i}") for i in range(1, 7)]


class TestBuildExample:
    def test_two_span_golden(self, vocab6, tokens6):
        """Canonical 6-token example with spans [x3] and [x5,x6], second first."""
        x = tokens6
        ss = SpanSet([Span(2, 1), Span(4, 2)])
        ex = build_example(x, ss, (1, 0), vocab6)
        assert ex.context_len == 5
        assert ex.input_ids.tolist() == [
            x[0], x[1], MASK_ID, x[3], MASK_ID,  # corrupted context
            START_ID, x[4], x[5], START_ID, x[2],  # fills in processing order
        ]
        assert ex.pos1.tolist() == [0, 1, 2, 3, 4, 4, 4, 4, 2, 2]
        assert ex.pos2.tolist() == [0, 0, 0, 0, 0, 1, 2, 3, 1, 2]
        assert ex.target_ids[5:].tolist() == [x[4], x[5], END_ID, x[2], END_ID]
        assert ex.loss_mask.tolist() == [False] * 5 + [True] * 5
        assert ex.fill_lens == [3, 2]

    def test_empty_span_set(self, vocab6, tokens6):
        ex = build_example(tokens6, SpanSet([]), (), vocab6)
        assert ex.input_ids.tolist() == tokens6
        assert ex.fill_lens == []
        assert not ex.loss_mask.any()

    def test_sentinel_mode_differs_only_in_context(self, vocab6, tokens6):
        ss = SpanSet([Span(2, 1), Span(4, 2)])
        plain = build_example(tokens6, ss, (1, 0), vocab6)
        sent = build_example(tokens6, ss, (1, 0), vocab6, sentinel_mode=True)
        assert sent.input_ids[2] == vocab6.sentinel_id(1)
        assert sent.input_ids[4] == vocab6.sentinel_id(2)
        # everything else identical
        keep = [0, 1, 3] + list(range(5, 10))
        assert sent.input_ids[keep].tolist() == plain.input_ids[keep].tolist()
        assert sent.pos1.tolist() == plain.pos1.tolist()
        assert sent.pos2.tolist() == plain.pos2.tolist()
        assert sent.target_ids.tolist() == plain.target_ids.tolist()

    def test_sentinel_budget_enforced(self, vocab6, tokens6):
        ss = SpanSet([Span(i, 1) for i in range(0, 6)])  # 6 spans > 4 sentinels
        with pytest.raises(ContractError):
            build_example(tokens6, ss, tuple(range(6)), vocab6, sentinel_mode=True)

    def test_max_len_enforced(self, vocab6, tokens6):
        ss = SpanSet([Span(2, 1)])
        with pytest.raises(LengthError):
            build_example(tokens6, ss, (0,), vocab6, max_len=7)

    def test_bad_permutation_rejected(self, vocab6, tokens6):
        ss = SpanSet([Span(2, 1), Span(4, 1)])
        with pytest.raises(ContractError):
            build_example(tokens6, ss, (0,), vocab6)
        with pytest.raises(ContractError):
            build_example(tokens6, ss, (0, 0), vocab6)

    def test_pure_function(self, vocab6, tokens6):
        ss = SpanSet([Span(1, 2), Span(4, 1)])
        a = build_example(tokens6, ss, (1, 0), vocab6)
        b = build_example(tokens6, ss, (1, 0), vocab6)
        for field in ("input_ids", "pos1", "pos2", "target_ids", "loss_mask"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))

    def test_shuffle_off_order_is_ascending_starts(self, vocab6, tokens6):
        ss = SpanSet([Span(4, 1), Span(1, 1)])  # sorted to starts [1, 4]
        ex = build_example(tokens6, ss, (0, 1), vocab6)
        fill_pos1 = ex.pos1[ex.context_len :]
        assert fill_pos1.tolist() == [1, 1, 4, 4]  # left span laid out first

    def test_fill_pos1_points_at_masks(self, vocab6, tokens6):
        ss = SpanSet([Span(0, 2), Span(3, 2)])
        for order in [(0, 1), (1, 0)]:
            ex = build_example(tokens6, ss, order, vocab6)
            for p in ex.pos1[ex.context_len :]:
                assert p < ex.context_len
                assert ex.input_ids[p] == MASK_ID

    def test_loss_count_identity(self, vocab6, tokens6):
        ss = SpanSet([Span(0, 2), Span(3, 2)])
        ex = build_example(tokens6, ss, (1, 0), vocab6)
        assert int(ex.loss_mask.sum()) == sum(ex.fill_lens) == 6


class TestAttentionMask:
    def test_context2_one_fill_of_2(self):
        m = build_attention_mask(AttentionMaskSpec(2, [2]))
        expected = [
            [1, 1, 0, 0],
            [1, 1, 0, 0],
            [1, 1, 1, 0],
            [1, 1, 1, 1],
        ]
        np.testing.assert_array_equal(m.astype(int), expected)

    def test_no_fill_is_all_true(self):
        m = build_attention_mask(AttentionMaskSpec(3, []))
        assert m.all() and m.shape == (3, 3)

    def test_no_context_is_causal(self):
        m = build_attention_mask(AttentionMaskSpec(0, [3]))
        np.testing.assert_array_equal(m, np.tril(np.ones((3, 3), dtype=bool)))

    @given(
        st.integers(0, 6),
        st.lists(st.integers(1, 4), min_size=0, max_size=3),
    )
    @settings(max_examples=60, deadline=None)
    def test_no_leak_property(self, a_len, fill_lens):
        if a_len == 0 and not fill_lens:
            return
        m = build_attention_mask(AttentionMaskSpec(a_len, fill_lens))
        n = a_len + sum(fill_lens)
        for q in range(n):
            for k in range(n):
                expected = (q < a_len and k < a_len) or (
                    q >= a_len and (k < a_len or k <= q)
                )
                assert m[q, k] == expected


class TestGenerationContext:
    def test_append_one_blank(self, vocab6, tokens6):
        ctx = build_generation_context(tokens6[:2], vocab6)
        assert ctx.context_ids.tolist() == tokens6[:2] + [MASK_ID]
        assert ctx.blank_positions == [2]
        ex = layout_teacher_forced(ctx, [[]])
        assert ex.input_ids[-1] == START_ID
        assert ex.pos1[-1] == 2 and ex.pos2[-1] == 1

    def test_two_mid_sequence_blanks(self, vocab6, tokens6):
        # [a, M, b, M] from context [a, b] with insertions after each token
        ctx = build_generation_context(tokens6[:2], vocab6, positions=[1, 2])
        assert ctx.context_ids.tolist() == [tokens6[0], MASK_ID, tokens6[1], MASK_ID]
        assert ctx.blank_positions == [1, 3]

    def test_unconditional_seed(self, vocab6):
        ctx = build_generation_context([], vocab6, n_blanks=1)
        assert ctx.context_ids.tolist() == [MASK_ID]
        assert ctx.blank_positions == [0]

    def test_nothing_at_all_rejected(self, vocab6):
        with pytest.raises(ContractError):
            build_generation_context([], vocab6, n_blanks=0)

    def test_teacher_forced_layout_matches_training_shape(self, vocab6, tokens6):
        ctx = build_generation_context(tokens6[:3], vocab6)
        ex = layout_teacher_forced(ctx, [[tokens6[4], tokens6[5]]])
        assert ex.input_ids.tolist() == tokens6[:3] + [MASK_ID, START_ID, tokens6[4], tokens6[5]]
        assert ex.target_ids[4:].tolist() == [tokens6[4], tokens6[5], END_ID]
        assert ex.pos1[4:].tolist() == [3, 3, 3]
        assert ex.pos2[4:].tolist() == [1, 2, 3]


class TestCollate:
    def test_padding_and_bias(self, vocab6, tokens6):
        ss = SpanSet([Span(2, 1)])
        short = build_example(tokens6[:4], ss, (0,), vocab6)
        long = build_example(tokens6, SpanSet([Span(1, 2)]), (0,), vocab6)
        batch = collate([short, long])
        s = max(len(short), len(long))
        assert batch.input_ids.shape == (2, s)
        # pad inputs are PAD and excluded from loss
        assert (batch.input_ids[0, len(short) :] == PAD_ID).all()
        assert not batch.loss_mask[0, len(short) :].any()
        # real queries never attend to pad keys
        real = len(short)
        assert (batch.attn_bias[0, 0, :real, real:] < 0).all()
        # pad rows are softmax-safe (at least one allowed key)
        for q in range(real, s):
            assert (batch.attn_bias[0, 0, q] == 0).any()

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            collate([])


def test_dump_example_renders(vocab6, tokens6):
    ss = SpanSet([Span(2, 1), Span(4, 2)])
    ex = build_example(tokens6, ss, (1, 0), vocab6)
    text = dump_example(ex, vocab6)
    assert "[mask]" in text.lower()
    assert text.count("\n") >= len(ex)
