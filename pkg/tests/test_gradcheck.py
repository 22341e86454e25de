"""Tests for the finite-difference gradient checks."""

import numpy as np
import pytest

from panoattn.encoder import build_encoder
from panoattn.geometry import FeaturePyramid
from panoattn.gradcheck import (
    GradCheckResult,
    central_difference,
    check_attention_gradients,
    check_encoder_gradients,
    relative_error,
)


class TestHelpers:
    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-6) == pytest.approx(1e-3)
        assert relative_error(2.0, 1.0) == pytest.approx(0.5)

    def test_central_difference_quadratic(self):
        value = np.array([1.0, 2.0, 3.0])
        slope = central_difference(lambda v: float((v ** 2).sum()), value, (1,))
        assert slope == pytest.approx(4.0)

    def test_result_threshold(self):
        result = GradCheckResult(checked=3, max_rel_error=2e-5, worst="x(0,)")
        assert result.passed(1e-4)
        assert not result.passed(1e-5)


class TestAttentionGradients:
    def test_unmasked(self, rng):
        result = check_attention_gradients(rng)
        assert result.checked == 2 * 4 * 8 + 4 * 8 * 8
        assert result.passed(1e-4), result.worst

    def test_masked(self, rng):
        assert check_attention_gradients(rng, windows=3, slots=3, channels=4, num_heads=1, masked=True).passed(1e-4)


class TestEncoderGradients:
    @pytest.mark.parametrize("placement", ["block", "sublayer"])
    def test_two_block_stack(self, desk_layout, rng, placement):
        stack = build_encoder(desk_layout, 4, 2, seed=11, num_blocks=2, ffn_placement=placement)
        pyramid = FeaturePyramid(tuple(
            rng.standard_normal((1, 4, lv.pano_h, lv.pano_w)) for lv in desk_layout.levels
        ))
        result = check_encoder_gradients(stack, pyramid, rng, samples=4)
        assert result.checked == 2 * 4 + 2 * 4
        assert result.passed(1e-3), f"{result.worst}: {result.max_rel_error:.2e}"
