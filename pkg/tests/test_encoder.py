"""Encoder blocks, masks, checkpoints, pruning, and masked-token training."""

import dataclasses

import numpy as np
import pytest
from scipy.special import erf

from conftest import make_sequence
from layerblend.data import MASK_ID, VOCAB_SIZE, gen_corpus, tokenize
from layerblend.encoder import (
    ATTN_MASK_BIAS,
    Checkpoint,
    Encoder,
    EncoderConfig,
    LN_EPS,
    MlmHyper,
    choose_mask_positions,
    expected_parameter_shapes,
    load_checkpoint,
    mlm_pretrain,
    prune_model,
    save_checkpoint,
)
from layerblend.errors import CheckpointError, ContractError, InputError, VocabularyError

TINY = EncoderConfig(num_layers=2, hidden_size=8, max_seq=16, num_heads=2,
                     ffn_size=16, vocab_size=24, dropout=0.1)
# byte-tokenized corpora need the full byte vocabulary
TINY_BYTES = dataclasses.replace(TINY, vocab_size=VOCAB_SIZE)


@pytest.fixture
def encoder(rng):
    return Encoder.fresh(TINY, rng)


def sequences(rng, n, config=TINY):
    return [make_sequence(rng, config.max_seq, config.vocab_size, label=i % 2)
            for i in range(n)]


# ---------------------------------------------------------------------------
# an independent reference for one block, written in flat numpy


def reference_block(x, params, prefix, attention_mask, heads):
    def p(name):
        return params[prefix + name].values

    seq, hidden = x.shape
    head_dim = hidden // heads
    q = x @ p("attn_q_w") + p("attn_q_b")
    k = x @ p("attn_k_w") + p("attn_k_b")
    v = x @ p("attn_v_w") + p("attn_v_b")
    context = np.zeros_like(x)
    for h in range(heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        scores = q[:, cols] @ k[:, cols].T / np.sqrt(head_dim)
        scores = scores + np.where(attention_mask, 0.0, ATTN_MASK_BIAS)[None, :]
        scores -= scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        context[:, cols] = weights @ v[:, cols]
    attn_out = context @ p("attn_out_w") + p("attn_out_b")

    def norm(values, gamma, beta):
        mu = values.mean(axis=-1, keepdims=True)
        var = ((values - mu) ** 2).mean(axis=-1, keepdims=True)
        return (values - mu) / np.sqrt(var + LN_EPS) * gamma + beta

    x = norm(x + attn_out, p("ln1_gamma"), p("ln1_beta"))
    inner = x @ p("ffn_in_w") + p("ffn_in_b")
    inner = 0.5 * inner * (1.0 + erf(inner / np.sqrt(2.0)))
    ffn_out = inner @ p("ffn_out_w") + p("ffn_out_b")
    return norm(x + ffn_out, p("ln2_gamma"), p("ln2_beta"))


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ContractError):
            EncoderConfig(num_layers=1, hidden_size=10, max_seq=8, num_heads=3, ffn_size=8)

    def test_minimum_dimensions(self):
        with pytest.raises(ContractError):
            EncoderConfig(num_layers=0, hidden_size=8, max_seq=8, num_heads=2, ffn_size=8)
        with pytest.raises(ContractError):
            EncoderConfig(num_layers=1, hidden_size=8, max_seq=3, num_heads=2, ffn_size=8)


class TestEmbed:
    def test_shapes(self, encoder, rng):
        ids = rng.integers(0, TINY.vocab_size, TINY.max_seq)
        assert encoder.embed(ids).shape == (TINY.max_seq, TINY.hidden_size)
        batch = rng.integers(0, TINY.vocab_size, (3, TINY.max_seq))
        assert encoder.embed(batch).shape == (3, TINY.max_seq, TINY.hidden_size)

    def test_position_additivity_before_normalisation(self, encoder):
        ids = np.full(TINY.max_seq, 5, dtype=np.int64)
        summed = encoder.embedding_sum(ids).values
        pos = encoder.params["embed.positions"].values
        np.testing.assert_allclose(
            summed[3] - summed[11], pos[3] - pos[11], atol=1e-12
        )

    def test_eval_mode_deterministic(self, encoder, rng):
        ids = rng.integers(0, TINY.vocab_size, TINY.max_seq)
        a = encoder.embed(ids, "eval").values
        b = encoder.embed(ids, "eval").values
        np.testing.assert_array_equal(a, b)

    def test_vocabulary_error(self, encoder):
        ids = np.zeros(TINY.max_seq, dtype=np.int64)
        ids[3] = TINY.vocab_size
        with pytest.raises(VocabularyError):
            encoder.embed(ids)

    def test_wrong_length_rejected(self, encoder):
        with pytest.raises(ContractError):
            encoder.embed(np.zeros(TINY.max_seq + 1, dtype=np.int64))


class TestEncode:
    def test_states_shape_single_sequence(self, rng):
        config = EncoderConfig(num_layers=2, hidden_size=4, max_seq=8,
                               num_heads=2, ffn_size=8, vocab_size=16)
        enc = Encoder.fresh(config, rng)
        seq = make_sequence(rng, 8, 16)
        states = enc.encode(seq)
        assert states.states.shape == (2, 8, 4)
        assert states.attention_mask.shape == (8,)

    def test_states_shape_batch(self, encoder, rng):
        states = encoder.encode(sequences(rng, 3))
        assert states.states.shape == (2, 3, TINY.max_seq, TINY.hidden_size)
        assert states.num_layers == 2

    def test_first_block_matches_reference(self, encoder, rng):
        seq = sequences(rng, 1)[0]
        states = encoder.encode(seq)
        x0 = encoder.embed(seq.ids[None, :], "eval").values[0]
        expected = reference_block(
            x0, encoder.params, "layer1.", seq.attention_mask, TINY.num_heads
        )
        np.testing.assert_allclose(states.states.values[0], expected, atol=1e-10)

    def test_second_block_composes(self, encoder, rng):
        seq = sequences(rng, 1)[0]
        states = encoder.encode(seq)
        expected = reference_block(
            states.states.values[0], encoder.params, "layer2.",
            seq.attention_mask, TINY.num_heads,
        )
        np.testing.assert_allclose(states.states.values[1], expected, atol=1e-10)

    def test_eval_deterministic(self, encoder, rng):
        batch = sequences(rng, 2)
        a = encoder.encode(batch).states.values
        b = encoder.encode(batch).states.values
        np.testing.assert_array_equal(a, b)

    def test_train_mode_dropout_changes_output(self, encoder, rng):
        batch = sequences(rng, 2)
        a = encoder.encode(batch, "train", np.random.default_rng(0)).states.values
        b = encoder.encode(batch, "train", np.random.default_rng(1)).states.values
        assert not np.array_equal(a, b)

    def test_train_mode_deterministic_given_rng(self, encoder, rng):
        batch = sequences(rng, 2)
        a = encoder.encode(batch, "train", np.random.default_rng(7)).states.values
        b = encoder.encode(batch, "train", np.random.default_rng(7)).states.values
        np.testing.assert_array_equal(a, b)

    def test_pad_positions_cannot_influence_real_tokens(self, encoder, rng):
        seq = sequences(rng, 1)[0]
        base = encoder.encode(seq).states.values
        tampered = dataclasses.replace(seq)
        tampered.ids = seq.ids.copy()
        pad_positions = ~seq.attention_mask
        assert pad_positions.any()
        tampered.ids[pad_positions] = rng.integers(4, TINY.vocab_size,
                                                   pad_positions.sum())
        out = encoder.encode(tampered).states.values
        real = seq.attention_mask
        np.testing.assert_array_equal(base[:, real, :], out[:, real, :])

    def test_empty_batch_rejected(self, encoder):
        with pytest.raises(InputError):
            encoder.encode([])


class TestCheckpoint:
    def test_round_trip_bitwise(self, encoder, tmp_path):
        ckpt = encoder.to_checkpoint()
        path = tmp_path / "model.npz"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.config == ckpt.config
        assert loaded.format_version == ckpt.format_version
        assert set(loaded.params) == set(ckpt.params)
        for name, values in ckpt.params.items():
            np.testing.assert_array_equal(values, loaded.params[name])

    def test_truncated_file_is_a_clean_error(self, encoder, tmp_path):
        path = tmp_path / "model.npz"
        save_checkpoint(encoder.to_checkpoint(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_parameter_named(self, encoder, tmp_path):
        ckpt = encoder.to_checkpoint()
        del ckpt.params["layer2.ffn_in_w"]
        path = tmp_path / "model.npz"
        save_checkpoint(ckpt, path)
        with pytest.raises(CheckpointError, match="layer2.ffn_in_w"):
            load_checkpoint(path)

    def test_version_mismatch(self, encoder, tmp_path):
        ckpt = encoder.to_checkpoint()
        ckpt.format_version = 99
        path = tmp_path / "model.npz"
        save_checkpoint(ckpt, path)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_parameter_set_is_config_determined(self, encoder):
        shapes = expected_parameter_shapes(TINY)
        assert set(shapes) == set(encoder.params)
        for name, p in encoder.params.items():
            assert p.values.shape == shapes[name]


class TestPrune:
    def test_full_depth_prune_is_identity(self, encoder):
        ckpt = encoder.to_checkpoint()
        same = prune_model(ckpt, TINY.num_layers)
        assert same.config == ckpt.config
        for name in ckpt.params:
            np.testing.assert_array_equal(same.params[name], ckpt.params[name])

    def test_pruned_states_equal_prefix_rows(self, encoder, rng):
        batch = sequences(rng, 3)
        full_states = encoder.encode(batch).states.values
        ckpt = encoder.to_checkpoint()
        for keep in range(1, TINY.num_layers + 1):
            pruned = Encoder.from_checkpoint(prune_model(ckpt, keep))
            states = pruned.encode(batch).states.values
            np.testing.assert_array_equal(states, full_states[:keep])

    def test_parameter_count_strictly_decreases(self, encoder):
        ckpt = encoder.to_checkpoint()
        counts = [
            sum(v.size for v in prune_model(ckpt, keep).params.values())
            for keep in range(1, TINY.num_layers + 1)
        ]
        assert counts == sorted(counts) and counts[0] < counts[-1]

    def test_out_of_range_rejected(self, encoder):
        ckpt = encoder.to_checkpoint()
        for bad in (0, TINY.num_layers + 1):
            with pytest.raises(ContractError):
                prune_model(ckpt, bad)

    def test_pruned_checkpoint_round_trips_and_encodes(self, encoder, rng, tmp_path):
        path = tmp_path / "pruned.npz"
        save_checkpoint(prune_model(encoder.to_checkpoint(), 1), path)
        pruned = Encoder.from_checkpoint(load_checkpoint(path))
        states = pruned.encode(sequences(rng, 2))
        assert states.states.shape[0] == 1


class TestMlm:
    def test_masking_rate_over_corpus(self, rng):
        corpus = [tokenize("x" * int(rng.integers(5, 40)), 64) for _ in range(300)]
        mask_rng = np.random.default_rng(0)
        masked = total = 0
        for seq in corpus:
            masked += choose_mask_positions(seq.code_token_mask, mask_rng).size
            total += seq.code_token_mask.sum()
        assert 0.13 <= masked / total <= 0.17

    def test_mask_positions_only_code(self, rng):
        seq = make_sequence(rng, 32, 24)
        for _ in range(20):
            chosen = choose_mask_positions(seq.code_token_mask, rng)
            assert chosen.size >= 1
            assert seq.code_token_mask[chosen].all()

    def test_loss_decreases_on_small_corpus(self):
        corpus = [
            tokenize(line, TINY_BYTES.max_seq)
            for line in gen_corpus(1000, seed=5, max_chars=12)
        ]
        hyper = MlmHyper(batch_size=128, learning_rate=2e-3, epochs=10)
        wins = 0
        for seed in range(3):
            outcome = mlm_pretrain(corpus, TINY_BYTES, hyper, seed)
            assert len(outcome.epoch_losses) == 10
            if outcome.epoch_losses[-1] < outcome.epoch_losses[0]:
                wins += 1
        assert wins >= 2

    def test_checkpoint_usable_and_masked_id_reserved(self, rng):
        corpus = [tokenize("abc def", TINY_BYTES.max_seq) for _ in range(40)]
        outcome = mlm_pretrain(corpus, TINY_BYTES,
                               MlmHyper(batch_size=16, epochs=1), seed=0)
        enc = Encoder.from_checkpoint(outcome.checkpoint)
        states = enc.encode(
            [make_sequence(rng, TINY_BYTES.max_seq, TINY_BYTES.vocab_size) for _ in range(2)]
        )
        assert states.states.shape[0] == TINY_BYTES.num_layers
        assert MASK_ID < TINY_BYTES.vocab_size

    def test_empty_corpus_rejected(self):
        with pytest.raises(InputError):
            mlm_pretrain([], TINY, MlmHyper(), seed=0)
