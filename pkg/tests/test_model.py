"""Model: init statistics, forward semantics, masking, checkpoints."""

import numpy as np
import pytest

from blanklm.errors import (
    CheckpointHeaderError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    ContractError,
)
from blanklm.layout import build_example, collate
from blanklm.model import Model, ModelConfig, init_params, load_checkpoint
from blanklm.rng import example_rng, new_rng
from blanklm.spans import CorruptionConfig, permute_spans, sample_short_spans
from blanklm.vocab import build_vocab


@pytest.fixture(scope="module")
def small_cfg():
    return ModelConfig(
        vocab_size=32,
        n_layers=2,
        hidden_size=32,
        n_heads=4,
        ffn_size=64,
        max_pos1=64,
        max_pos2=32,
        dropout=0.0,
        attn_dropout=0.0,
    )


@pytest.fixture(scope="module")
def small_model(small_cfg):
    return Model.init(small_cfg, new_rng(0))


@pytest.fixture(scope="module")
def vocab32():
    words = " ".join(f"t{i}" for i in range(23))
    return build_vocab([words], 32, n_sentinels=4)


def random_examples(vocab, n, seed, seq_len=14):
    cfg = CorruptionConfig()
    out = []
    for i in range(n):
        rng = example_rng(seed, i)
        tokens = rng.integers(9, len(vocab), size=seq_len).tolist()
        ss = sample_short_spans(seq_len, rng, cfg)
        order = permute_spans(ss, rng, True)
        out.append(build_example(tokens, ss, order, vocab))
    return out


class TestInit:
    def test_seeded_determinism(self, small_cfg):
        a = init_params(small_cfg, new_rng(7))
        b = init_params(small_cfg, new_rng(7))
        assert a.names() == b.names()
        for n in a.names():
            np.testing.assert_array_equal(a[n].data, b[n].data)

    def test_weight_variance(self):
        cfg = ModelConfig(vocab_size=1000, n_layers=1, hidden_size=128, n_heads=4, ffn_size=128)
        params = init_params(cfg, new_rng(0))
        emb = params["tok_emb"].data  # 128000 elements
        assert emb.size >= 100_000
        assert 0.00038 <= emb.var() <= 0.00042

    def test_norms_and_biases(self, small_cfg):
        params = init_params(small_cfg, new_rng(0))
        assert (params["layers.0.ln1.gain"].data == 1).all()
        assert (params["layers.0.attn.bq"].data == 0).all()

    def test_pos2_table_absent_when_disabled(self, small_cfg):
        cfg = ModelConfig(**{**small_cfg.__dict__, "use_pos2": False})
        params = init_params(cfg, new_rng(0))
        assert "pos2_emb" not in params
        assert "pos2_emb" in init_params(small_cfg, new_rng(0))

    def test_untied_output_matrix(self, small_cfg):
        cfg = ModelConfig(**{**small_cfg.__dict__, "tie_output": False})
        params = init_params(cfg, new_rng(0))
        assert "out_proj" in params

    def test_bad_config_rejected(self):
        with pytest.raises(ContractError):
            ModelConfig(vocab_size=8, hidden_size=30, n_heads=4)


class TestForward:
    def test_shape_and_finiteness(self, vocab32, small_model):
        examples = random_examples(vocab32, 2, seed=0, seq_len=11)
        batch = collate(examples)
        logits = small_model.forward(batch)
        b, s = batch.input_ids.shape
        assert logits.shape == (b, s, 32)
        assert np.isfinite(logits.data).all()

    def test_fill_mutation_never_touches_context_logits(self, vocab32, small_model):
        """Mask isolation, bit-exact, over 20 random mutations."""
        rng = np.random.default_rng(0)
        examples = random_examples(vocab32, 20, seed=1)
        for ex in examples:
            batch = collate([ex])
            base = small_model.forward(batch).data
            fill_positions = np.flatnonzero(ex.loss_mask)
            pos = int(rng.choice(fill_positions))
            mutated = batch.input_ids.copy()
            mutated[0, pos] = (mutated[0, pos] + 1 + rng.integers(20)) % 32
            batch.input_ids = mutated
            out = small_model.forward(batch).data
            a = ex.context_len
            np.testing.assert_array_equal(out[0, :a], base[0, :a])

    def test_fill_mutation_respects_causality(self, vocab32, small_model):
        rng = np.random.default_rng(1)
        examples = random_examples(vocab32, 20, seed=2)
        for ex in examples:
            fill_positions = np.flatnonzero(ex.loss_mask)
            if len(fill_positions) < 2:
                continue
            batch = collate([ex])
            base = small_model.forward(batch).data
            t = int(rng.choice(fill_positions[1:]))
            mutated = batch.input_ids.copy()
            mutated[0, t] = (mutated[0, t] + 1 + rng.integers(20)) % 32
            batch.input_ids = mutated
            out = small_model.forward(batch).data
            np.testing.assert_array_equal(out[0, :t], base[0, :t])

    def test_pos2_off_is_invariant_to_pos2(self, vocab32, small_cfg):
        cfg = ModelConfig(**{**small_cfg.__dict__, "use_pos2": False})
        model = Model.init(cfg, new_rng(5))
        batch = collate(random_examples(vocab32, 3, seed=3))
        base = model.forward(batch).data
        batch.pos2 = np.random.default_rng(0).integers(0, 1000, size=batch.pos2.shape)
        out = model.forward(batch).data
        np.testing.assert_array_equal(out, base)

    def test_attention_rows_sum_to_one(self, vocab32, small_model):
        batch = collate(random_examples(vocab32, 2, seed=4))
        probe = {}
        small_model.forward(batch, probe=probe)
        for key, probs in probe.items():
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)

    def test_batch_permutation_invariance(self, vocab32, small_model):
        examples = random_examples(vocab32, 4, seed=5)
        fwd = small_model.forward(collate(examples)).data
        perm = [2, 0, 3, 1]
        fwd_perm = small_model.forward(collate([examples[i] for i in perm])).data
        for new_i, old_i in enumerate(perm):
            np.testing.assert_array_equal(fwd_perm[new_i], fwd[old_i])

    def test_contract_errors(self, vocab32, small_model):
        batch = collate(random_examples(vocab32, 1, seed=6))
        bad = collate(random_examples(vocab32, 1, seed=6))
        bad.input_ids = batch.input_ids + 1000
        with pytest.raises(ContractError):
            small_model.forward(bad)
        bad2 = collate(random_examples(vocab32, 1, seed=6))
        bad2.pos1 = batch.pos1 + 1000
        with pytest.raises(ContractError):
            small_model.forward(bad2)

    def test_train_forward_needs_rng_for_dropout(self, vocab32, small_cfg):
        cfg = ModelConfig(**{**small_cfg.__dict__, "dropout": 0.1})
        model = Model.init(cfg, new_rng(0))
        batch = collate(random_examples(vocab32, 1, seed=7))
        with pytest.raises(ContractError):
            model.forward(batch, train=True)
        out = model.forward(batch, train=True, rng=new_rng(0))
        assert np.isfinite(out.data).all()


class TestGradientIntegrity:
    def test_two_layer_hidden16_finite_differences(self, vocab32):
        from blanklm import tensor as T
        from blanklm.train import pretrain_loss

        cfg = ModelConfig(
            vocab_size=32, n_layers=2, hidden_size=16, n_heads=2, ffn_size=32,
            max_pos1=32, max_pos2=16, dropout=0.0, attn_dropout=0.0,
        )
        model = Model.init(cfg, new_rng(2), dtype=np.float64)
        batch = collate(random_examples(vocab32, 2, seed=8), dtype=np.float64)

        def fn():
            return pretrain_loss(model.forward(batch), batch)

        err = T.grad_check(
            fn, model.params.tensors(), epsilon=1e-5, n_samples=24,
            rng=np.random.default_rng(0),
        )
        assert err < 1e-3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, small_model, tmp_path):
        path = tmp_path / "model.ckpt"
        small_model.save(path, extra_header={"step": 17})
        loaded, extras, opt = load_checkpoint(path)
        assert loaded.cfg == small_model.cfg
        assert extras["step"] == "17"
        assert opt == {}
        for n in small_model.params.names():
            np.testing.assert_array_equal(loaded.params[n].data, small_model.params[n].data)

    def test_reserialization_is_byte_identical(self, small_model, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        small_model.save(p1)
        loaded, _, _ = load_checkpoint(p1)
        loaded.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file(self, small_model, tmp_path):
        path = tmp_path / "model.ckpt"
        small_model.save(path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_corrupt_header(self, small_model, tmp_path):
        path = tmp_path / "model.ckpt"
        small_model.save(path)
        raw = path.read_bytes()
        path.write_bytes(b"not a header" + raw)
        with pytest.raises(CheckpointHeaderError):
            load_checkpoint(path)

    def test_shape_mismatch(self, small_model, small_cfg, tmp_path):
        # save under a config claiming a different hidden size
        path = tmp_path / "model.ckpt"
        from blanklm.model import save_checkpoint

        lying_cfg = ModelConfig(**{**small_cfg.__dict__, "hidden_size": 64, "n_heads": 4})
        save_checkpoint(small_model.params, lying_cfg, path)
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path)

    def test_optimizer_state_round_trip(self, small_model, tmp_path):
        path = tmp_path / "model.ckpt"
        rng = np.random.default_rng(0)
        opt = {
            "m.tok_emb": rng.normal(size=small_model.params["tok_emb"].shape).astype(np.float32),
        }
        small_model.save(path, opt_tensors=opt)
        _, _, loaded_opt = load_checkpoint(path)
        np.testing.assert_array_equal(loaded_opt["m.tok_emb"], opt["m.tok_emb"])
