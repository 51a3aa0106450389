import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import scalar_ref
from conftest import layer_as_lists, random_layer
from tokenpass.backbone import (
    HeadParams,
    ModelSpec,
    TokenSequence,
    Weights,
    attention_probs,
    block_ranges,
    check_weights,
    multi_head_attention,
    parameter_shapes,
    patch_embed,
    transformer_layer,
    zero_layer,
)
from tokenpass.errors import ConfigError, ShapeError
from tokenpass.synthetic import generate_synthetic_model


def _weights_for(spec, patch_weight, rng=None):
    e, c = spec.embed_dim, spec.num_classes
    return Weights(
        patch_weight=patch_weight,
        patch_bias=np.zeros(e),
        pos_embed=np.zeros((spec.num_tokens, e)),
        layers=[zero_layer(e, spec.mlp_dim) for _ in range(spec.num_layers)],
        aux_heads=[HeadParams(np.zeros((e, c)), np.zeros(c)) for _ in spec.decision_layers],
        decoder=HeadParams(np.zeros((e, c)), np.zeros(c)),
    )


class TestModelSpec:
    def test_token_count_cityscapes(self):
        spec = ModelSpec(1024, 2048, 16, 768, 12, 12, 19)
        assert spec.num_tokens == 8192
        assert (spec.grid_h, spec.grid_w) == (64, 128)

    @pytest.mark.parametrize("layers", [(0, 3), (3, 4), (5, 3), (3, 12), (3, 3)])
    def test_bad_decision_layers(self, layers):
        with pytest.raises(ConfigError):
            ModelSpec(64, 64, 16, 32, 12, 4, 3, decision_layers=layers)

    def test_indivisible_image(self):
        with pytest.raises(ConfigError):
            ModelSpec(60, 64, 16, 32, 12, 4, 3)

    def test_heads_must_divide_embedding(self):
        with pytest.raises(ConfigError):
            ModelSpec(64, 64, 16, 30, 12, 4, 3)

    def test_blocks(self):
        blocks = block_ranges(12, (3, 6, 9))
        assert [list(b) for b in blocks] == [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11]]

    def test_dict_roundtrip(self):
        spec = ModelSpec(64, 32, 8, 16, 6, 2, 4, decision_layers=(2, 4), use_class_token=True)
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestPatchEmbed:
    def test_zero_image(self, tiny_spec):
        w = generate_synthetic_model(tiny_spec, seed=0)
        w.patch_bias[:] = 0
        w.pos_embed[:] = 0
        seq = patch_embed(np.zeros((3, 32, 32)), tiny_spec, w)
        assert not seq.has_class_token
        np.testing.assert_array_equal(seq.tokens, 0.0)

    def test_cityscapes_resolution(self):
        spec = ModelSpec(1024, 2048, 16, 4, 1, 1, 2, decision_layers=())
        w = _weights_for(spec, np.zeros((spec.patch_dim, 4)))
        seq = patch_embed(np.zeros((3, 1024, 2048)), spec, w)
        assert seq.tokens.shape == (8192, 4)

    def test_channel_sums(self):
        spec = ModelSpec(2, 2, 1, 1, 1, 1, 2, decision_layers=())
        w = _weights_for(spec, np.ones((3, 1)))
        image = np.array([
            [[1.0, 2.0], [3.0, 4.0]],
            [[10.0, 20.0], [30.0, 40.0]],
            [[100.0, 200.0], [300.0, 400.0]],
        ])
        seq = patch_embed(image, spec, w)
        # raster order: (0,0), (0,1), (1,0), (1,1)
        assert seq.tokens[:, 0].tolist() == [111.0, 222.0, 333.0, 444.0]

    def test_class_token_prepended(self, tiny_spec):
        spec = tiny_spec.__class__(**{**tiny_spec.to_dict(), "use_class_token": True})
        w = generate_synthetic_model(spec, seed=0)
        seq = patch_embed(np.zeros((3, 32, 32)), spec, w)
        assert seq.has_class_token and len(seq) == spec.num_tokens + 1
        np.testing.assert_array_equal(seq.tokens[0], w.cls_token + w.cls_pos_embed)

    def test_shape_mismatch(self, tiny_spec):
        w = generate_synthetic_model(tiny_spec, seed=0)
        with pytest.raises(ShapeError):
            patch_embed(np.zeros((3, 16, 32)), tiny_spec, w)


class TestAttention:
    def test_single_token(self, rng):
        lp = random_layer(rng, 4, 16)
        x = rng.standard_normal((1, 4))
        out = multi_head_attention(TokenSequence(x), lp, heads=2).tokens
        expected = (x @ lp.w_v + lp.b_v) @ lp.w_o + lp.b_o
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-14)
        probs = attention_probs(x, lp, 2)
        np.testing.assert_array_equal(probs, np.ones((2, 1, 1)))

    def test_duplicate_tokens(self, rng):
        lp = random_layer(rng, 6, 24)
        row = rng.standard_normal(6)
        out = multi_head_attention(TokenSequence(np.tile(row, (5, 1))), lp, heads=3).tokens
        for r in out[1:]:
            np.testing.assert_array_equal(r, out[0])

    def test_three_tokens_hand_set(self):
        lp = zero_layer(2, 8)
        lp.w_q[:] = [[1.0, 0.5], [0.0, 1.0]]
        lp.w_k[:] = [[0.5, 0.0], [1.0, 1.0]]
        lp.w_v[:] = [[2.0, -1.0], [0.0, 3.0]]
        lp.w_o[:] = [[1.0, 0.0], [0.25, 1.0]]
        lp.b_q[:] = [0.1, 0.0]
        lp.b_v[:] = [0.0, -0.2]
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]])
        out = multi_head_attention(TokenSequence(x), lp, heads=1).tokens
        expected = scalar_ref.attention(x.tolist(), layer_as_lists(lp), 1)
        assert np.max(np.abs(out - np.array(expected))) <= 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]))
    def test_rows_sum_to_one(self, seed, heads):
        r = np.random.default_rng(seed)
        lp = random_layer(r, 8, 32, scale=2.0)
        probs = attention_probs(r.standard_normal((9, 8)), lp, heads)
        assert probs.shape == (heads, 9, 9)
        assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) <= 1e-9


class TestTransformerLayer:
    def test_zero_weights_identity(self, rng):
        x = rng.standard_normal((7, 8))
        out = transformer_layer(TokenSequence(x), zero_layer(8, 32), heads=2).tokens
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize("n", [1, 7, 64])
    def test_shape_preserved(self, rng, n):
        lp = random_layer(rng, 8, 32)
        out = transformer_layer(TokenSequence(rng.standard_normal((n, 8))), lp, heads=2)
        assert out.tokens.shape == (n, 8)

    def test_against_scalar_oracle(self, rng):
        lp = random_layer(rng, 6, 12)
        x = rng.standard_normal((4, 6))
        out = transformer_layer(TokenSequence(x), lp, heads=2).tokens
        expected = np.array(scalar_ref.transformer_layer(x.tolist(), layer_as_lists(lp), 2))
        assert np.max(np.abs(out - expected)) <= 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.booleans())
    def test_permutation_equivariance(self, seed, with_class):
        r = np.random.default_rng(seed)
        lp = random_layer(r, 8, 32)
        x = r.standard_normal((12, 8))
        start = 1 if with_class else 0
        perm = np.concatenate([np.arange(start), start + r.permutation(12 - start)])
        seq = TokenSequence(x, with_class)
        base = transformer_layer(seq, lp, 2).tokens
        permuted = transformer_layer(TokenSequence(x[perm], with_class), lp, 2).tokens
        assert np.max(np.abs(permuted - base[perm])) <= 1e-9


class TestWeights:
    def test_shapes_complete(self, tiny_spec):
        w = generate_synthetic_model(tiny_spec, seed=0)
        check_weights(tiny_spec, w)
        assert list(w.to_arrays()) == list(parameter_shapes(tiny_spec))

    def test_roundtrip_arrays(self, tiny_spec):
        w = generate_synthetic_model(tiny_spec, seed=0)
        again = Weights.from_arrays(tiny_spec, w.to_arrays())
        for (k, a), (k2, b) in zip(w.to_arrays().items(), again.to_arrays().items()):
            assert k == k2
            np.testing.assert_array_equal(a, b)

    def test_check_rejects_bad_shape(self, tiny_spec):
        w = generate_synthetic_model(tiny_spec, seed=0)
        w.layers[0].w_q = np.zeros((3, 3))
        with pytest.raises(ShapeError):
            check_weights(tiny_spec, w)
