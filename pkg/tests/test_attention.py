"""Tests for windowed multi-head attention."""

import math
from dataclasses import fields

import numpy as np
import pytest

from panoattn.attention import (
    MAX_ORACLE_POSITIONS,
    AttentionCache,
    attention_apply,
    attention_backward,
    attention_forward,
    full_attention_oracle,
    init_attention_params,
    masked_softmax,
    partition_pair_mask,
    windowed_attention,
)
from panoattn.errors import ArgumentError, NumericError
from panoattn.geometry import LevelSpec, RigConfig, build_layout, partition_windows


@pytest.fixture
def params(rng):
    return init_attention_params(rng, 8, 2)


def naive_attention(x, params):
    """Loop over windows, heads and query slots; no vectorised softmax."""
    r, n, c = x.shape
    d = c // params.num_heads
    out = np.zeros_like(x)
    for w in range(r):
        q, k, v = (x[w] @ m.T for m in (params.w_q, params.w_k, params.w_v))
        context = np.zeros((n, c))
        for head in range(params.num_heads):
            cols = slice(head * d, (head + 1) * d)
            for i in range(n):
                scores = np.array([q[i, cols] @ k[j, cols] for j in range(n)]) / math.sqrt(d)
                e = np.exp(scores - scores.max())
                context[i, cols] = (e / e.sum()) @ v[:, cols]
        out[w] = context @ params.w_o.T
    return out


def symmetric_mask(rng, n, count=None):
    shape = (n, n) if count is None else (count, n, n)
    upper = np.triu(rng.random(shape) < 0.6)
    mask = upper | np.swapaxes(upper, -1, -2)
    mask[..., np.arange(n), np.arange(n)] = True
    return mask


class TestAttentionParams:
    def test_init_bounds(self, rng):
        p = init_attention_params(rng, 16, 4)
        bound = 1.0 / np.sqrt(16)
        for w in p.as_dict().values():
            assert w.shape == (16, 16)
            assert np.abs(w).max() <= bound
        assert p.head_dim == 4
        assert p.scale == pytest.approx(0.5)

    def test_heads_must_divide(self, rng):
        with pytest.raises(ArgumentError):
            init_attention_params(rng, 10, 3)

    def test_rejects_non_finite(self, params):
        bad = params.w_k.copy()
        bad[0, 0] = np.inf
        with pytest.raises(ArgumentError):
            params.replace(w_k=bad)

    def test_replace_keeps_heads(self, params):
        p = params.replace(w_o=np.eye(8))
        assert p.num_heads == 2
        np.testing.assert_array_equal(p.w_o, np.eye(8))


class TestAttentionForward:
    def test_single_token_is_value_then_output(self, params, rng):
        x = rng.standard_normal((3, 1, 8))
        out, _ = attention_forward(x, params)
        expected = x @ params.w_v.T @ params.w_o.T
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_weights_sum_to_one(self, params, rng):
        _, cache = attention_forward(rng.standard_normal((4, 6, 8)), params)
        np.testing.assert_allclose(cache.weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_fully_masked_rows_output_zero(self, params, rng):
        mask = np.ones((5, 5), dtype=bool)
        mask[2, :] = False
        out, cache = attention_forward(rng.standard_normal((1, 5, 8)), params, mask)
        np.testing.assert_array_equal(out[0, 2], 0.0)
        assert cache.weights[0, :, 2].sum() == 0.0

    def test_masked_pairs_get_no_weight(self, params, rng):
        mask = np.tril(np.ones((4, 4), dtype=bool))
        _, cache = attention_forward(rng.standard_normal((2, 4, 8)), params, mask)
        assert np.all(cache.weights[..., ~mask] == 0.0)

    def test_rejects_bad_shape(self, params):
        with pytest.raises(ArgumentError):
            attention_forward(np.zeros((2, 3, 7)), params)

    def test_rejects_bad_mask(self, params):
        with pytest.raises(ArgumentError):
            attention_forward(np.zeros((2, 3, 8)), params, np.ones((2, 2), dtype=bool))

    def test_non_finite_names_window(self, params):
        x = np.zeros((4, 3, 8))
        x[2, 1, 0] = np.nan
        with pytest.raises(NumericError) as exc:
            attention_forward(x, params)
        assert exc.value.window_id == 2

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(7)
        params = init_attention_params(rng, 8, 2)
        x = rng.standard_normal((2, 4, 8))
        out, _ = attention_forward(x, params)
        np.testing.assert_allclose(out, naive_attention(x, params), rtol=0, atol=1e-12)

    def test_identical_slots_share_weight_evenly(self, params, rng):
        x = np.tile(rng.standard_normal(8), (1, 5, 1))
        _, cache = attention_forward(x, params)
        np.testing.assert_allclose(cache.weights, 0.2, atol=1e-12)

    def test_permuting_slots_permutes_output(self, params, rng):
        x = rng.standard_normal((3, 6, 8))
        mask = symmetric_mask(rng, 6)
        perm = rng.permutation(6)
        out, _ = attention_forward(x, params, mask)
        permuted, _ = attention_forward(x[:, perm], params, mask[np.ix_(perm, perm)])
        np.testing.assert_allclose(permuted, out[:, perm], atol=1e-12)

    def test_cache_keeps_no_logits(self):
        names = {f.name for f in fields(AttentionCache)}
        assert "logits" not in names
        assert {"x", "q", "k", "v", "weights", "context", "params"} <= names


class TestAttentionBackward:
    def test_matches_finite_difference(self, params, rng):
        x = rng.standard_normal((2, 4, 8))
        d_out = rng.standard_normal((2, 4, 8))
        _, cache = attention_forward(x, params)
        d_x, grads = attention_backward(cache, d_out)

        eps = 1e-6
        x_plus, x_minus = x.copy(), x.copy()
        x_plus[1, 2, 3] += eps
        x_minus[1, 2, 3] -= eps
        numeric = (np.sum(attention_forward(x_plus, params)[0] * d_out)
                   - np.sum(attention_forward(x_minus, params)[0] * d_out)) / (2 * eps)
        assert d_x[1, 2, 3] == pytest.approx(numeric, rel=1e-5, abs=1e-8)

        w_plus, w_minus = params.w_q.copy(), params.w_q.copy()
        w_plus[0, 5] += eps
        w_minus[0, 5] -= eps
        numeric = (np.sum(attention_forward(x, params.replace(w_q=w_plus))[0] * d_out)
                   - np.sum(attention_forward(x, params.replace(w_q=w_minus))[0] * d_out)) / (2 * eps)
        assert grads["w_q"][0, 5] == pytest.approx(numeric, rel=1e-5, abs=1e-8)

    def test_shape_mismatch(self, params, rng):
        _, cache = attention_forward(rng.standard_normal((2, 4, 8)), params)
        with pytest.raises(ArgumentError):
            attention_backward(cache, np.zeros((2, 3, 8)))


class TestMaskedSoftmax:
    def test_row_constant_leaves_weights(self, rng):
        logits = rng.standard_normal((2, 2, 5, 5)) * 3
        shift = rng.uniform(-50, 50, size=(2, 2, 5, 1))
        base = masked_softmax(logits.copy())
        np.testing.assert_allclose(masked_softmax(logits + shift), base, rtol=0, atol=1e-12)

    def test_row_constant_with_mask(self, rng):
        logits = rng.standard_normal((3, 1, 4, 4))
        mask = symmetric_mask(rng, 4, count=3)[:, None]
        shift = rng.uniform(-50, 50, size=(3, 1, 4, 1))
        base = masked_softmax(logits.copy(), mask)
        np.testing.assert_allclose(masked_softmax(logits + shift, mask), base, rtol=0, atol=1e-12)
        assert np.all(base[~np.broadcast_to(mask, base.shape)] == 0.0)


class TestAttentionApply:
    def test_equals_forward_without_mask(self, params, rng):
        x = rng.standard_normal((5, 6, 8))
        expected, _ = attention_forward(x, params)
        np.testing.assert_allclose(attention_apply(x, params), expected, atol=1e-12)

    @pytest.mark.parametrize("max_elements", [1, 2 * 36 * 2, 10 ** 6])
    def test_chunking_matches_single_pass(self, params, rng, max_elements):
        x = rng.standard_normal((5, 6, 8))
        shared = symmetric_mask(rng, 6)
        per_window = symmetric_mask(rng, 6, count=5)
        for mask in (None, shared, per_window):
            expected, _ = attention_forward(x, params, mask)
            chunked = attention_apply(x, params, mask, max_elements=max_elements)
            np.testing.assert_allclose(chunked, expected, atol=1e-12)

    def test_keeps_float32(self, rng):
        params = init_attention_params(rng, 8, 2, np.float32)
        x = rng.standard_normal((3, 4, 8)).astype(np.float32)
        assert attention_apply(x, params, max_elements=1).dtype == np.float32

    def test_non_finite_names_window(self, params):
        x = np.zeros((4, 3, 8))
        x[3, 0, 0] = np.inf
        with pytest.raises(NumericError) as exc:
            attention_apply(x, params)
        assert exc.value.window_id == 3


class TestWindowedAttention:
    @pytest.mark.parametrize("kind,shifted", [("mv_axis", False), ("roi", False), ("roi", True)])
    def test_equals_masked_full_attention(self, desk_layout, rng, kind, shifted):
        params = init_attention_params(rng, 4, 2)
        partition = partition_windows(desk_layout, 1, kind, shifted)
        tensor = rng.standard_normal((1, 4, 6, 48))
        windowed = windowed_attention(tensor, partition, params)
        full = full_attention_oracle(tensor, params, partition_pair_mask(partition))
        np.testing.assert_allclose(windowed, full, atol=1e-10)

    def test_whole_map_window_is_plain_attention(self, rng):
        layout = build_layout(RigConfig(1, 8, 12, (LevelSpec(4, (2, 3), (2, 3)),)))
        partition = partition_windows(layout, 0, "roi", False)
        params = init_attention_params(rng, 4, 2)
        tensor = rng.standard_normal((1, 4, 2, 3))
        tokens = tensor.reshape(1, 4, 6).transpose(0, 2, 1)
        expected, _ = attention_forward(tokens, params)
        np.testing.assert_allclose(windowed_attention(tensor, partition, params),
                                   expected.transpose(0, 2, 1).reshape(1, 4, 2, 3), atol=1e-12)

    def test_constant_windows_stay_constant(self, desk_layout, rng):
        params = init_attention_params(rng, 4, 2)
        partition = partition_windows(desk_layout, 1, "mv_axis", False)
        # level 1 multi-view windows are 3 x 16: two row bands, three column blocks
        values = rng.standard_normal((2, 3, 4))
        tensor = np.repeat(np.repeat(values, 3, axis=0), 16, axis=1).transpose(2, 0, 1)[None]
        out = windowed_attention(tensor, partition, params)
        for band in range(2):
            for block in range(3):
                patch = out[0, :, 3 * band:3 * band + 3, 16 * block:16 * block + 16]
                np.testing.assert_allclose(patch, patch[:, :1, :1] * np.ones_like(patch), atol=1e-12)

    def test_differs_from_unmasked_full(self, desk_layout, rng):
        params = init_attention_params(rng, 4, 1)
        partition = partition_windows(desk_layout, 1, "roi", False)
        tensor = rng.standard_normal((1, 4, 6, 48))
        assert not np.allclose(windowed_attention(tensor, partition, params), full_attention_oracle(tensor, params))

    def test_batch_elements_independent(self, desk_layout, rng):
        params = init_attention_params(rng, 4, 2)
        partition = partition_windows(desk_layout, 1, "roi", True)
        tensor = rng.standard_normal((2, 4, 6, 48))
        both = windowed_attention(tensor, partition, params)
        first = windowed_attention(tensor[:1], partition, params)
        np.testing.assert_allclose(both[:1], first, atol=1e-12)

    def test_oracle_size_limit(self, rng):
        params = init_attention_params(rng, 2, 1)
        side = int(np.sqrt(MAX_ORACLE_POSITIONS)) + 1
        with pytest.raises(ArgumentError, match="refuses"):
            full_attention_oracle(np.zeros((1, 2, side, side)), params)

    def test_pair_mask_is_symmetric(self, desk_layout):
        mask = partition_pair_mask(partition_windows(desk_layout, 0, "roi", True))
        np.testing.assert_array_equal(mask, mask.T)
        assert mask.diagonal().all()
