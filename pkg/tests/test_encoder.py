"""Tests for the windowed encoder stack."""

import numpy as np
import pytest

from panoattn.attention import full_attention_oracle
from panoattn.encoder import (
    EncoderOptions,
    block_forward,
    block_parameters,
    block_with_parameters,
    build_encoder,
    encoder_forward,
    encoder_forward_cached,
    feed_forward,
    feed_forward_apply,
    gelu,
    gelu_grad,
    layer_norm,
    NormParams,
    perturbation_footprint,
    reachable_cells,
    zero_residual_branches,
)
from panoattn.errors import ArgumentError
from panoattn.geometry import FeaturePyramid, LevelSpec, RigConfig, build_layout


@pytest.fixture
def small_stack(desk_layout):
    return build_encoder(desk_layout, 16, 2, seed=7, num_blocks=2)


class TestBuildEncoder:
    def test_block_count_and_stages(self, desk_layout):
        stack = build_encoder(desk_layout, 16, 2, seed=0)
        assert len(stack.blocks) == 6
        assert [b.stage for b in stack.blocks] == list(range(6))
        assert stack.channels == 16

    def test_deterministic(self, desk_layout):
        a = build_encoder(desk_layout, 16, 2, seed=3, num_blocks=1)
        b = build_encoder(desk_layout, 16, 2, seed=3, num_blocks=1)
        np.testing.assert_array_equal(a.blocks[0].roi_params.w_v, b.blocks[0].roi_params.w_v)

    def test_seed_changes_weights(self, desk_layout):
        a = build_encoder(desk_layout, 16, 2, seed=3, num_blocks=1)
        b = build_encoder(desk_layout, 16, 2, seed=4, num_blocks=1)
        assert not np.array_equal(a.blocks[0].mv_params.w_q, b.blocks[0].mv_params.w_q)

    def test_sublayer_placement_has_two_ffns(self, desk_layout):
        stack = build_encoder(desk_layout, 16, 2, seed=0, num_blocks=1, ffn_placement="sublayer")
        params = block_parameters(stack.blocks[0])
        assert "ffn1.w2" in params
        assert params["ffn0.w1"].shape == (64, 16)
        assert params["ffn0.w2"].shape == (16, 64)

    def test_rejects_unknown_placement(self, desk_layout):
        with pytest.raises(ArgumentError):
            build_encoder(desk_layout, 16, 2, seed=0, ffn_placement="between")

    def test_parameters_round_trip(self, small_stack):
        block = small_stack.blocks[1]
        params = block_parameters(block)
        params["roi.w_k"] = params["roi.w_k"] * 2.0
        rebuilt = block_with_parameters(block, params)
        np.testing.assert_array_equal(rebuilt.roi_params.w_k, block.roi_params.w_k * 2.0)
        assert rebuilt.stage == block.stage


class TestElementwise:
    def test_gelu_values(self):
        assert gelu(np.array(0.0)) == 0.0
        assert gelu(np.array(10.0)) == pytest.approx(10.0)
        assert gelu(np.array(1.0)) == pytest.approx(0.8413447460685429)

    def test_gelu_grad_matches_difference(self):
        x = np.linspace(-3, 3, 13)
        eps = 1e-6
        numeric = (gelu(x + eps) - gelu(x - eps)) / (2 * eps)
        np.testing.assert_allclose(gelu_grad(x), numeric, atol=1e-8)

    def test_layer_norm_over_channels(self, rng):
        x = rng.standard_normal((2, 8, 3, 5)) * 4 + 1
        y, _ = layer_norm(x, NormParams(np.ones(8), np.zeros(8)))
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)

    def test_feed_forward_is_pointwise(self, small_stack, rng):
        u = rng.standard_normal((1, 16, 2, 3))
        out, _ = feed_forward(u, small_stack.blocks[0].ffns[0])
        single, _ = feed_forward(u[:, :, 1:2, 2:3], small_stack.blocks[0].ffns[0])
        np.testing.assert_allclose(out[:, :, 1:2, 2:3], single, atol=1e-12)

    @pytest.mark.parametrize("max_tokens", [1, 7, 10 ** 6])
    def test_banded_feed_forward_matches(self, small_stack, rng, max_tokens):
        u = rng.standard_normal((2, 16, 5, 3))
        ffn = small_stack.blocks[0].ffns[0]
        expected, _ = feed_forward(u, ffn)
        np.testing.assert_allclose(feed_forward_apply(u, ffn, max_tokens=max_tokens), expected, atol=1e-12)


class TestEncoderForward:
    def test_preserves_shapes(self, small_stack, desk_pyramid):
        out = encoder_forward(small_stack, desk_pyramid)
        assert [o.shape for o in out] == [p.shape for p in desk_pyramid]
        assert not np.allclose(out[0], desk_pyramid[0])

    def test_zero_branches_are_identity(self, small_stack, desk_pyramid):
        out = encoder_forward(zero_residual_branches(small_stack), desk_pyramid)
        for o, p in zip(out, desk_pyramid):
            np.testing.assert_array_equal(o, p)

    def test_thread_pool_matches_serial(self, small_stack, desk_pyramid):
        serial = encoder_forward(small_stack, desk_pyramid, workers=1)
        pooled = encoder_forward(small_stack, desk_pyramid, workers=4)
        for a, b in zip(serial, pooled):
            np.testing.assert_array_equal(a, b)

    def test_levels_do_not_mix(self, small_stack, desk_pyramid):
        base = encoder_forward(small_stack, desk_pyramid)
        levels = [np.array(lv) for lv in desk_pyramid]
        levels[0] += 1.0
        perturbed = encoder_forward(small_stack, FeaturePyramid(tuple(levels)))
        np.testing.assert_array_equal(perturbed[1], base[1])

    def test_negative_stage_rejected(self, small_stack, desk_pyramid, desk_layout):
        with pytest.raises(ArgumentError):
            block_forward(small_stack.blocks[0], desk_pyramid, -1, desk_layout)

    def test_rejects_mismatched_pyramid(self, small_stack):
        with pytest.raises(ArgumentError):
            encoder_forward(small_stack, FeaturePyramid((np.zeros((1, 16, 12, 96)),)))

    def test_bench_mode_keeps_float32(self, desk_layout):
        stack = build_encoder(desk_layout, 16, 2, seed=0, num_blocks=1, dtype=np.float32)
        pyramid = FeaturePyramid(tuple(
            np.ones((1, 16, lv.pano_h, lv.pano_w), dtype=np.float32) for lv in desk_layout.levels
        ))
        assert encoder_forward(stack, pyramid)[0].dtype == np.float32

    def test_matches_cached_forward(self, small_stack, desk_pyramid):
        plain = encoder_forward(small_stack, desk_pyramid)
        cached, caches = encoder_forward_cached(small_stack, desk_pyramid)
        assert len(caches) == len(small_stack.blocks)
        for a, b in zip(plain, cached):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_shifted_stage_differs(self, small_stack, desk_pyramid, desk_layout):
        block = small_stack.blocks[0]
        even = block_forward(block, desk_pyramid, 0, desk_layout)
        odd = block_forward(block, desk_pyramid, 1, desk_layout)
        for a, b in zip(even, odd):
            assert np.abs(a - b).max() > 1e-6

    @pytest.mark.parametrize("stage", [0, 1])
    def test_whole_map_window_is_plain_encoder_layer(self, rng, stage):
        # one 2x3 level whose only window covers the map, so no mask and no shift apply
        layout = build_layout(RigConfig(1, 8, 12, (LevelSpec(4, (2, 3), (2, 3)),)))
        block = build_encoder(layout, 16, 2, seed=11, num_blocks=1).blocks[0]
        x = rng.standard_normal((1, 16, 2, 3))

        h = x + full_attention_oracle(layer_norm(x, block.attn_norm)[0], block.mv_params)
        h = h + full_attention_oracle(layer_norm(h, block.attn_norm)[0], block.roi_params)
        h = h + feed_forward(layer_norm(h, block.ffn_norm)[0], block.ffns[0])[0]

        out = block_forward(block, FeaturePyramid((x,)), stage, layout)
        np.testing.assert_allclose(out[0], h, rtol=0, atol=1e-12)


class TestLocality:
    def test_one_block_stays_in_multiview_window(self, desk_layout):
        reach = reachable_cells(desk_layout, 1, (0, 0), num_blocks=1)
        # level 1 multi-view windows are 3 x 16; ROI windows nest inside them
        assert reach.sum() == 48
        assert reach[:3, :16].all()

    def test_footprint_within_reach(self, desk_layout, desk_pyramid):
        stack = build_encoder(desk_layout, 16, 2, seed=1, num_blocks=2)
        footprint = perturbation_footprint(stack, desk_pyramid, 1, (4, 20))
        reach = reachable_cells(desk_layout, 1, (4, 20), num_blocks=2)
        assert footprint[4, 20]
        assert footprint.sum() > 1
        assert not (footprint & ~reach).any()

    def test_shift_widens_reach(self, desk_layout):
        unshifted = reachable_cells(desk_layout, 1, (2, 15), 2, EncoderOptions(shift_windows=False))
        shifted = reachable_cells(desk_layout, 1, (2, 15), 2, EncoderOptions(shift_windows=True))
        assert shifted.sum() > unshifted.sum()
        assert not (unshifted & ~shifted).any()

    def test_six_block_shift_strictly_widens_footprint(self, desk_layout, desk_pyramid):
        shifted = build_encoder(desk_layout, 16, 2, seed=1)
        unshifted = build_encoder(desk_layout, 16, 2, seed=1, options=EncoderOptions(shift_windows=False))
        with_shift = perturbation_footprint(shifted, desk_pyramid, 0, (4, 20))
        without_shift = perturbation_footprint(unshifted, desk_pyramid, 0, (4, 20))
        # without shifts the 3x32 and 6x8 windows close over rows 0-5, columns 0-31
        assert without_shift.sum() == 192
        assert without_shift[:6, :32].all()
        assert not (without_shift & ~with_shift).any()
        assert with_shift.sum() > without_shift.sum()

    def test_disabled_attention_is_pointwise(self, desk_layout, desk_pyramid):
        options = EncoderOptions(mv_attention=False, roi_attention=False)
        stack = build_encoder(desk_layout, 16, 2, seed=1, num_blocks=2, options=options)
        footprint = perturbation_footprint(stack, desk_pyramid, 0, (5, 40))
        assert footprint.sum() == 1
