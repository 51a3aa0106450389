import pytest

from tokenpass.backbone import ModelSpec
from tokenpass.errors import ConfigError, IntegrityError
from tokenpass.flops import FlopsConvention, dense_flops, layer_flops, model_flops, reduction_ratio

VIT_B_TABLE_G = 703.28
VIT_L_TABLE_G = 2484.27


def _vit(e, layers, heads, dl):
    return ModelSpec(1024, 2048, 16, e, layers, heads, 19, decision_layers=dl)


class TestLayerFlops:
    def test_empty(self):
        assert layer_flops(0, 768, 12) == 0
        assert layer_flops(0, 768, 12, conv="full") == 0

    def test_linear_count(self):
        assert layer_flops(10, 8, 2) == 12 * 10 * 64
        assert layer_flops(10, 8, 2, mlp_ratio=2) == 8 * 10 * 64

    def test_full_adds_attention_and_doubles(self):
        assert layer_flops(10, 8, 2, conv="full") == 2 * (12 * 10 * 64 + 2 * 100 * 8)

    def test_heads_do_not_matter(self):
        assert layer_flops(50, 64, 1) == layer_flops(50, 64, 8)

    def test_vit_b_dense_layers(self):
        total = 12 * layer_flops(8192, 768, 12)
        assert total == 695_784_701_952
        assert abs(total / 1e9 - VIT_B_TABLE_G) / VIT_B_TABLE_G < 0.02

    def test_vit_l_dense_layers(self):
        total = 24 * layer_flops(8192, 1024, 16)
        assert total == 2_473_901_162_496
        assert abs(total / 1e9 - VIT_L_TABLE_G) / VIT_L_TABLE_G < 0.01

    def test_full_attention_term_quarter_at_half_tokens(self):
        def attention(n):
            return layer_flops(n, 64, 4, conv="full") - 2 * layer_flops(n, 64, 4)

        assert attention(512) == 4 * attention(256)

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            layer_flops(-1, 8, 2)

    def test_unknown_convention(self):
        with pytest.raises(ConfigError):
            layer_flops(1, 8, 2, conv="tflops")


class TestModelFlops:
    def test_dense_equals_all_full_counts(self):
        spec = _vit(768, 12, 12, (3, 6, 9))
        assert model_flops(spec, [8192] * 4).total == dense_flops(spec).total

    def test_dense_total_close_to_table(self):
        total = dense_flops(_vit(768, 12, 12, (3, 6, 9))).total / 1e9
        assert abs(total - VIT_B_TABLE_G) / VIT_B_TABLE_G < 0.02

    def test_halving_blocks(self):
        spec = _vit(768, 12, 12, (3, 6, 9))
        fl = model_flops(spec, [8192, 4096, 2048, 1024])
        b = [x.flops for x in fl.per_block]
        assert b[1] * 2 == b[0] and b[2] * 4 == b[0] and b[3] * 8 == b[0]

    def test_all_stopped_after_first_block(self):
        spec = _vit(768, 12, 12, (3, 6, 9))
        fl = model_flops(spec, [8192, 0, 0, 0])
        overhead = fl.patch_embed_flops + fl.heads_flops + fl.decoder_flops
        assert fl.total == 3 * layer_flops(8192, 768, 12) + overhead

    def test_class_token_counted(self):
        spec = ModelSpec(64, 64, 16, 32, 4, 2, 3, decision_layers=(2,), use_class_token=True)
        fl = model_flops(spec, [16, 0])
        assert [b.token_count for b in fl.per_block] == [17, 1]
        assert fl.per_block[1].flops == 2 * layer_flops(1, 32, 2)

    def test_removing_tokens_never_increases(self):
        spec = _vit(256, 8, 4, (2, 4, 6))
        for conv in FlopsConvention:
            prev = None
            for k in range(4096, -1, -512):
                t = model_flops(spec, [4096, k, k, k], conv).total
                assert prev is None or t <= prev
                prev = t

    def test_totals_sum_parts(self):
        fl = dense_flops(_vit(384, 12, 6, (3, 6, 9)), "full")
        assert fl.total == sum(b.flops for b in fl.per_block) + fl.patch_embed_flops + fl.heads_flops + fl.decoder_flops
        assert fl.to_dict()["total"] == fl.total

    @pytest.mark.parametrize("counts", [[8192, 4096, 5000, 0], [8192, 4096], [9000, 0, 0, 0], [8192, -1, -1, -1]])
    def test_bad_counts(self, counts):
        with pytest.raises(IntegrityError):
            model_flops(_vit(768, 12, 12, (3, 6, 9)), counts)


class TestReductionRatio:
    def test_identical(self):
        fl = dense_flops(_vit(768, 12, 12, (3, 6, 9)))
        assert reduction_ratio(fl, fl) == 0.0

    def test_table_base(self):
        r = reduction_ratio(330.09, 703.28)
        assert abs(r - 53.06) < 0.005 and round(r) == 53

    def test_table_large(self):
        r = reduction_ratio(1088.80, 2484.27)
        assert abs(r - 56.2) < 0.05 and round(r) == 56

    def test_mismatched_conventions(self):
        spec = _vit(768, 12, 12, (3, 6, 9))
        with pytest.raises(ConfigError):
            reduction_ratio(dense_flops(spec, "full"), dense_flops(spec))
