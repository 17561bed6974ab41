"""The twelve reduction strategies and their weight bookkeeping."""

import numpy as np
import pytest

from conftest import make_states
from layerblend import diffcore as dc
from layerblend.combiner import (
    CombinationSpec,
    CombinerParams,
    added_param_count,
    allocate_params,
    combine,
    pool_layers_max,
    pool_tokens_max,
    slice_cls,
    sum_layers_weighted,
    sum_tokens_weighted,
    validate_spec_for_model,
)
from layerblend.diffcore import Tensor, backward
from layerblend.encoder import EncoderConfig, LayerStates
from layerblend.errors import ContractError, InvalidMaskError

CONFIG = EncoderConfig(num_layers=4, hidden_size=6, max_seq=10, num_heads=2,
                       ffn_size=12, vocab_size=24)

ALL_SPECS = (
    "i", "ii:layer=2", "iii", "iv",
    "v:layer=3:scope=all", "v:layer=3:scope=code",
    "vi:scope=all", "vi:scope=code",
    "vii:scope=all", "vii:scope=code",
    "viii:scope=all", "viii:scope=code",
    "ix:layer=2:scope=all", "ix:layer=2:scope=code",
    "x:scope=all", "x:scope=code",
    "xi:scope=all", "xi:scope=code",
)

WEIGHTED_SPECS = tuple(s for s in ALL_SPECS if s.split(":")[0] in
                       ("iv", "vii", "viii", "ix", "x", "xi"))
CODE_SCOPE_SPECS = tuple(s for s in ALL_SPECS if s.endswith("scope=code"))


def constructed_states(num_layers=4, seq=10, hidden=6):
    """states[l, s, h] = l + 1 so every reduction is hand-checkable."""
    values = np.zeros((num_layers, seq, hidden))
    for layer in range(num_layers):
        values[layer] = layer + 1
    attention = np.ones(seq, dtype=bool)
    code = np.zeros(seq, dtype=bool)
    code[1:seq - 2] = True
    return LayerStates(Tensor(values), attention, code)


class TestSpecParsing:
    @pytest.mark.parametrize("text", ALL_SPECS + ("xii:layer=3",))
    def test_round_trip(self, text):
        assert str(CombinationSpec.parse(text)) == text

    def test_scope_dropped_for_cls_strategies(self):
        assert str(CombinationSpec.parse("ii:layer=1:scope=code")) == "ii:layer=1"

    def test_bad_inputs(self):
        for bad in ("xiii", "v", "ii", "ii:layer=x", "v:layer=1:scope=some",
                    "i:layer=2", "v:layer=0:scope=all", "ii:depth=2"):
            with pytest.raises(ContractError):
                CombinationSpec.parse(bad)

    def test_grid_ranges(self):
        CombinationSpec.parse("ii:layer=3").validate_for_grid(4)
        with pytest.raises(ContractError):
            CombinationSpec.parse("ii:layer=4").validate_for_grid(4)
        with pytest.raises(ContractError):
            CombinationSpec.parse("xii:layer=4").validate_for_grid(4)
        CombinationSpec.parse("v:layer=4:scope=all").validate_for_grid(4)
        with pytest.raises(ContractError):
            CombinationSpec.parse("ix:layer=5:scope=all").validate_for_grid(4)

    def test_model_validation_for_pruned_models(self):
        validate_spec_for_model(CombinationSpec.parse("xii:layer=2"), 2)
        with pytest.raises(ContractError):
            validate_spec_for_model(CombinationSpec.parse("xii:layer=2"), 4)


class TestAddedParamCount:
    def test_table(self):
        expected = {
            "i": 0, "ii:layer=2": 0, "iii": 0, "v:layer=3:scope=all": 0,
            "vi:scope=all": 0, "xii:layer=3": 0,
            "iv": CONFIG.num_layers, "viii:scope=all": CONFIG.num_layers,
            "vii:scope=all": CONFIG.max_seq, "ix:layer=2:scope=all": CONFIG.max_seq,
            "x:scope=all": CONFIG.max_seq + CONFIG.num_layers,
            "xi:scope=all": CONFIG.max_seq + CONFIG.num_layers,
        }
        for text, count in expected.items():
            assert added_param_count(CombinationSpec.parse(text), CONFIG) == count

    def test_reference_scale_totals(self):
        big = EncoderConfig(num_layers=12, hidden_size=768, max_seq=512,
                            num_heads=12, ffn_size=3072, vocab_size=50265)
        assert added_param_count(CombinationSpec.parse("x:scope=all"), big) == 524
        assert added_param_count(CombinationSpec.parse("xi:scope=code"), big) == 524
        assert added_param_count(CombinationSpec.parse("iv"), big) == 12
        assert added_param_count(CombinationSpec.parse("v:layer=12:scope=all"), big) == 0

    def test_allocation_matches_count(self):
        for text in ALL_SPECS:
            spec = CombinationSpec.parse(text)
            params = allocate_params(spec, CONFIG)
            allocated = sum(t.size for t in params.as_dict().values())
            assert allocated == added_param_count(spec, CONFIG)

    def test_uniform_initialisation(self):
        params = allocate_params(CombinationSpec.parse("x:scope=all"), CONFIG)
        np.testing.assert_array_equal(params.token_weights.values,
                                      np.full(CONFIG.max_seq, 1 / CONFIG.max_seq))
        np.testing.assert_array_equal(params.layer_weights.values,
                                      np.full(CONFIG.num_layers, 1 / CONFIG.num_layers))


class TestPieces:
    def test_slice_cls_constructed(self):
        states = constructed_states()
        for layer in (1, 3, 4):
            np.testing.assert_array_equal(
                slice_cls(states, layer).values, np.full(6, float(layer))
            )

    def test_slice_cls_last_layer_is_baseline(self, rng):
        states = make_states(rng, 4, 10, 6)
        np.testing.assert_array_equal(
            slice_cls(states, 4).values,
            combine(states, CombinationSpec.parse("i")).values,
        )

    def test_slice_cls_gradient_sparsity(self, rng):
        states = make_states(rng, 4, 10, 6, requires_grad=True)
        backward(dc.reduce_sum(slice_cls(states, 2)))
        grad = states.states.grad
        expected = np.zeros_like(grad)
        expected[1, 0, :] = 1.0
        np.testing.assert_array_equal(grad, expected)

    def test_slice_cls_range(self, rng):
        states = make_states(rng, 4, 10, 6)
        with pytest.raises(ContractError):
            slice_cls(states, 0)
        with pytest.raises(ContractError):
            slice_cls(states, 5)

    def test_pool_tokens_max_hand_case(self):
        layer = Tensor(np.array([[1.0, -3.0], [0.0, 5.0]]))
        out = pool_tokens_max(layer, None)
        np.testing.assert_array_equal(out.values, [1.0, 5.0])

    def test_pool_tokens_max_code_scope_ignores_pad(self, rng):
        states = make_states(rng, 2, 10, 6)
        layer = dc.getitem(states.states, 0)
        base = pool_tokens_max(layer, states.code_token_mask).values
        noisy = layer.values.copy()
        noisy[~states.code_token_mask] = rng.standard_normal(
            ((~states.code_token_mask).sum(), 6)) * 50
        out = pool_tokens_max(Tensor(noisy), states.code_token_mask).values
        np.testing.assert_array_equal(base, out)

    def test_pool_tokens_max_single_code_token(self, rng):
        layer = Tensor(rng.standard_normal((10, 6)))
        mask = np.zeros(10, dtype=bool)
        mask[4] = True
        np.testing.assert_array_equal(
            pool_tokens_max(layer, mask).values, layer.values[4]
        )

    def test_pool_layers_max_identity_single_layer(self, rng):
        states = Tensor(rng.standard_normal((1, 10, 6)))
        np.testing.assert_array_equal(pool_layers_max(states).values, states.values[0])

    def test_pool_layers_max_constructed(self):
        states = constructed_states()
        out = pool_layers_max(states.states)
        np.testing.assert_array_equal(out.values, np.full((10, 6), 4.0))

    def test_pool_layers_max_bruteforce(self, rng):
        values = rng.standard_normal((3, 5, 4))
        out = pool_layers_max(Tensor(values)).values
        for s in range(5):
            for h in range(4):
                assert out[s, h] == max(values[l, s, h] for l in range(3))

    def test_sum_tokens_weighted_mean_case(self, rng):
        layer = Tensor(rng.standard_normal((10, 6)))
        out = sum_tokens_weighted(layer, Tensor(np.full(10, 0.1)), None)
        np.testing.assert_allclose(out.values, layer.values.mean(axis=0), atol=1e-12)

    def test_sum_tokens_weighted_one_hot_is_cls(self, rng):
        states = make_states(rng, 3, 10, 6)
        layer = dc.getitem(states.states, 1)
        one_hot = np.zeros(10)
        one_hot[0] = 1.0
        out = sum_tokens_weighted(layer, Tensor(one_hot), None)
        np.testing.assert_array_equal(out.values, slice_cls(states, 2).values)

    def test_sum_tokens_weighted_mask_oracle(self, rng):
        for _ in range(100):
            layer = rng.standard_normal((8, 3))
            weights = rng.standard_normal(8)
            mask = rng.random(8) < 0.5
            out = sum_tokens_weighted(Tensor(layer), Tensor(weights), mask).values
            direct = sum(weights[s] * layer[s] for s in range(8) if mask[s])
            direct = direct if mask.any() else np.zeros(3)
            np.testing.assert_allclose(out, direct, atol=1e-12)

    def test_sum_layers_weighted_one_hot_is_baseline(self, rng):
        states = make_states(rng, 4, 10, 6)
        cls_all = dc.getitem(states.states, (slice(None), Ellipsis, 0, slice(None)))
        one_hot = np.zeros(4)
        one_hot[3] = 1.0
        out = sum_layers_weighted(cls_all, Tensor(one_hot))
        np.testing.assert_array_equal(
            out.values, combine(states, CombinationSpec.parse("i")).values
        )

    def test_sum_layers_weighted_uniform_is_mean(self, rng):
        per_layer = rng.standard_normal((4, 6))
        out = sum_layers_weighted(Tensor(per_layer), Tensor(np.full(4, 0.25)))
        np.testing.assert_allclose(out.values, per_layer.mean(axis=0), atol=1e-12)


class TestCombineDispatch:
    def test_baseline_identities_bitwise(self, rng):
        for _ in range(25):
            states = make_states(rng, 4, 10, 6)
            r_i = combine(states, CombinationSpec.parse("i")).values
            r_ii = combine(states, CombinationSpec("ii", layer=4)).values
            r_xii = combine(states, CombinationSpec("xii", layer=4)).values
            np.testing.assert_array_equal(r_i, r_ii)
            np.testing.assert_array_equal(r_i, r_xii)

    def test_vi_is_global_max(self, rng):
        for scope in ("all", "code"):
            states = make_states(rng, 4, 10, 6)
            out = combine(states, CombinationSpec("vi", scope=scope)).values
            values = states.states.values
            mask = states.code_token_mask if scope == "code" else np.ones(10, bool)
            expected = values[:, mask, :].max(axis=(0, 1))
            np.testing.assert_array_equal(out, expected)

    def test_xi_uniform_layers_one_hot_cls_token(self, rng):
        states = make_states(rng, 4, 10, 6)
        token_w = np.zeros(10)
        token_w[0] = 1.0
        params = CombinerParams(
            token_weights=Tensor(token_w),
            layer_weights=Tensor(np.full(4, 0.25)),
        )
        out = combine(states, CombinationSpec("xi", scope="all"), params).values
        cls_mean = states.states.values[:, 0, :].mean(axis=0)
        np.testing.assert_allclose(out, cls_mean, atol=1e-12)

    def test_output_length_h_for_every_spec(self, rng):
        for text in ALL_SPECS:
            spec = CombinationSpec.parse(text)
            params = allocate_params(spec, CONFIG)
            states = make_states(rng, 4, 10, 6)
            assert combine(states, spec, params).shape == (6,)
            batched = make_states(rng, 4, 10, 6, batch=3)
            assert combine(batched, spec, params).shape == (3, 6)
        # every valid layer index of the layer-indexed strategies
        for strategy, top in (("ii", 4), ("v", 4), ("ix", 4)):
            for layer in range(1, top + 1):
                spec = CombinationSpec(strategy, layer=layer,
                                       scope="all" if strategy != "ii" else "all")
                params = allocate_params(spec, CONFIG)
                states = make_states(rng, 4, 10, 6)
                assert combine(states, spec, params).shape == (6,)

    def test_batched_matches_per_sequence(self, rng):
        batched = make_states(rng, 3, 10, 6, batch=4)
        for text in ALL_SPECS:
            if "layer=" in text and text.split(":")[0] in ("v", "ix", "ii"):
                text = text  # layers <= 3 still valid
            spec = CombinationSpec.parse(text)
            if spec.layer is not None and spec.layer > 3:
                continue
            params = allocate_params(spec,
                                     EncoderConfig(num_layers=3, hidden_size=6,
                                                   max_seq=10, num_heads=2,
                                                   ffn_size=12, vocab_size=24))
            whole = combine(batched, spec, params).values
            for b in range(4):
                single = LayerStates(
                    states=Tensor(batched.states.values[:, b]),
                    attention_mask=batched.attention_mask[b],
                    code_token_mask=batched.code_token_mask[b],
                )
                np.testing.assert_allclose(
                    whole[b], combine(single, spec, params).values, atol=1e-12
                )

    def test_max_commutativity(self, rng):
        for _ in range(200):
            values = rng.standard_normal((3, 6, 4))
            token_then_layer = values.max(axis=1).max(axis=0)
            layer_then_token = values.max(axis=0).max(axis=0)
            global_max = values.reshape(-1, 4).max(axis=0)
            np.testing.assert_array_equal(token_then_layer, layer_then_token)
            np.testing.assert_array_equal(token_then_layer, global_max)

    def test_scope_soundness_exact_zero_change(self, rng):
        for text in CODE_SCOPE_SPECS:
            spec = CombinationSpec.parse(text)
            params = allocate_params(spec, CONFIG)
            if params.token_weights is not None:
                params.token_weights.values = rng.standard_normal(10)
            if params.layer_weights is not None:
                params.layer_weights.values = rng.standard_normal(4)
            states = make_states(rng, 4, 10, 6)
            base = combine(states, spec, params).values.copy()
            excluded = ~states.code_token_mask
            noisy = states.states.values.copy()
            noisy[:, excluded, :] += rng.standard_normal((4, excluded.sum(), 6)) * 100
            perturbed = LayerStates(Tensor(noisy), states.attention_mask,
                                    states.code_token_mask)
            out = combine(perturbed, spec, params).values
            np.testing.assert_array_equal(base, out)

    def test_xii_depth_mismatch_rejected(self, rng):
        states = make_states(rng, 4, 10, 6)
        with pytest.raises(ContractError):
            combine(states, CombinationSpec("xii", layer=2))

    def test_missing_weights_rejected(self, rng):
        states = make_states(rng, 4, 10, 6)
        with pytest.raises(ContractError):
            combine(states, CombinationSpec.parse("ix:layer=1:scope=all"))
        with pytest.raises(ContractError):
            combine(states, CombinationSpec.parse("iv"), CombinerParams())

    def test_empty_code_scope_max_rejected(self, rng):
        states = make_states(rng, 2, 10, 6)
        states.code_token_mask[:] = False
        with pytest.raises(InvalidMaskError):
            combine(states, CombinationSpec.parse("v:layer=1:scope=code"))


class TestGradients:
    def test_weighted_specs_reach_both_weight_vectors(self, rng):
        for text in WEIGHTED_SPECS:
            spec = CombinationSpec.parse(text)
            params = allocate_params(spec, CONFIG)
            states = make_states(rng, 4, 10, 6, requires_grad=True)
            target = rng.standard_normal(6)

            def f(_):
                out = combine(states, spec, params)
                diff = dc.add(out, dc.neg(Tensor(target)))
                return dc.reduce_sum(dc.mul(diff, diff))

            check_params = {"states": states.states, **params.as_dict()}
            assert dc.finite_difference_check(f, check_params) < 1e-6
            dc.backward(f(None))
            if params.token_weights is not None:
                assert np.abs(params.token_weights.grad).max() > 0
            if params.layer_weights is not None:
                assert np.abs(params.layer_weights.grad).max() > 0
            dc.zero_grads(check_params)

    def test_shared_token_weights_aggregate_over_layers(self, rng):
        # the gradient of the shared token vector is the sum of what each
        # layer would contribute on its own
        spec = CombinationSpec.parse("x:scope=all")
        params = allocate_params(spec, CONFIG)
        layer_w = rng.standard_normal(4)
        params.layer_weights.values = layer_w.copy()
        states = make_states(rng, 4, 10, 6)

        dc.backward(dc.reduce_sum(combine(states, spec, params)))
        total = params.token_weights.grad.copy()
        dc.zero_grads(params.as_dict())

        contributions = np.zeros(10)
        for layer in range(4):
            tw = Tensor(params.token_weights.values, requires_grad=True)
            piece = sum_tokens_weighted(
                Tensor(states.states.values[layer]), tw, None
            )
            dc.backward(dc.reduce_sum(dc.scale(piece, layer_w[layer])))
            contributions += tw.grad
        np.testing.assert_allclose(total, contributions, atol=1e-12)
