"""Multi-head scaled dot-product self-attention over gathered windows.

Row-vector convention: for tokens x of shape (n, C), Q = x W_qᵀ and the output
is softmax(mask(Q Kᵀ · scale)) V W_oᵀ, so a single token maps to W_o W_v x.
Backward is written out by hand and checked against finite differences.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from panoattn.errors import ArgumentError, NumericError
from panoattn.geometry import WindowPartition, gather_windows, scatter_windows

logger = logging.getLogger("panoattn.attention")

MASKED_LOGIT = -1e30
MAX_ORACLE_POSITIONS = 4096
CHUNK_ELEMENTS = 1 << 22  # attention weights held at once by attention_apply
PARAM_NAMES = ("w_q", "w_k", "w_v", "w_o")


@dataclass(frozen=True, eq=False)
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    num_heads: int = 1

    def __post_init__(self):
        c = self.w_q.shape[0]
        for name in PARAM_NAMES:
            w = getattr(self, name)
            if w.shape != (c, c):
                raise ArgumentError(f"{name} has shape {w.shape}, expected ({c}, {c})")
            if not np.isfinite(w).all():
                raise ArgumentError(f"{name} contains non-finite values")
        if self.num_heads < 1 or c % self.num_heads:
            raise ArgumentError(f"num_heads {self.num_heads} does not divide C={c}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, **weights) -> "AttentionParams":
        merged = {**self.as_dict(), **weights}
        return AttentionParams(num_heads=self.num_heads, **merged)


@dataclass(frozen=True, eq=False)
class AttentionCache:
    """Activations saved by attention_forward for an exact backward pass."""

    x: np.ndarray          # (r, n, C)
    q: np.ndarray          # (r, h, n, d)
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray    # (r, h, n, n), rows sum to 1 (or 0 if fully masked)
    context: np.ndarray    # (r, n, C), heads concatenated before W_o
    params: AttentionParams


def init_attention_params(rng: np.random.Generator, channels: int, num_heads: int,
                          dtype=np.float64) -> AttentionParams:
    """Draw W_q, W_k, W_v, W_o (in that order) from uniform(-1/√C, 1/√C)."""
    bound = 1.0 / np.sqrt(channels)
    weights = {name: rng.uniform(-bound, bound, size=(channels, channels)).astype(dtype) for name in PARAM_NAMES}
    return AttentionParams(num_heads=num_heads, **weights)


def _split_heads(t: np.ndarray, num_heads: int) -> np.ndarray:
    r, n, c = t.shape
    return t.reshape(r, n, num_heads, c // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    r, h, n, d = t.shape
    return t.transpose(0, 2, 1, 3).reshape(r, n, h * d)


def _broadcast_mask(mask: np.ndarray | None, r: int, n: int) -> np.ndarray | None:
    """Normalize a (n, n) or (r, n, n) mask to (r | 1, 1, n, n)."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == (n, n):
        return mask[None, None]
    if mask.shape == (r, n, n):
        return mask[:, None]
    raise ArgumentError(f"mask shape {mask.shape} does not match (n, n) = ({n}, {n}) or (r, n, n)")


def masked_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; pairs where `mask` is False get zero weight.

    Rows with nothing to attend come out all zero. `logits` may be overwritten.
    """
    if mask is not None:
        logits = np.where(mask, logits, MASKED_LOGIT)
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits, out=logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    if mask is not None:
        weights = weights * mask.any(axis=-1, keepdims=True)
        weights = np.where(mask, weights, 0.0)
    return weights


def _check_input(x: np.ndarray, params: AttentionParams) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != params.channels:
        raise ArgumentError(f"input shape {x.shape} is not (r, n, {params.channels})")
    finite = np.isfinite(x).all(axis=(1, 2))
    if not finite.all():
        window_id = int(np.argmin(finite))
        raise NumericError(f"non-finite attention input in window {window_id}", window_id=window_id)
    return x


def _attend(x: np.ndarray, params: AttentionParams, mask4: np.ndarray | None):
    """q, k, v, softmax weights and merged context for validated input."""
    h = params.num_heads
    q = _split_heads(x @ params.w_q.T, h)
    k = _split_heads(x @ params.w_k.T, h)
    v = _split_heads(x @ params.w_v.T, h)

    weights = masked_softmax((q @ k.transpose(0, 1, 3, 2)) * params.scale, mask4)
    return q, k, v, weights, _merge_heads(weights @ v)


def attention_forward(x: np.ndarray, params: AttentionParams,
                      mask: np.ndarray | None = None) -> tuple[np.ndarray, AttentionCache]:
    """Self-attention over each of r windows of n slots. `mask[i, j]` True = i may attend j."""
    x = _check_input(x, params)
    r, n, _ = x.shape
    q, k, v, weights, context = _attend(x, params, _broadcast_mask(mask, r, n))
    out = context @ params.w_o.T
    cache = AttentionCache(x=x, q=q, k=k, v=v, weights=weights, context=context, params=params)
    return out, cache


def attention_apply(x: np.ndarray, params: AttentionParams, mask: np.ndarray | None = None,
                    max_elements: int = CHUNK_ELEMENTS) -> np.ndarray:
    """attention_forward without a cache, a chunk of windows at a time.

    Each chunk holds at most `max_elements` attention weights (at least one window).
    """
    x = _check_input(x, params)
    r, n, _ = x.shape
    mask4 = _broadcast_mask(mask, r, n)
    step = max(1, max_elements // (params.num_heads * n * n))
    out = np.empty(x.shape, dtype=np.result_type(x, params.w_o))
    for start in range(0, r, step):
        stop = min(start + step, r)
        chunk_mask = mask4 if mask4 is None or mask4.shape[0] == 1 else mask4[start:stop]
        context = _attend(x[start:stop], params, chunk_mask)[-1]
        out[start:stop] = context @ params.w_o.T
    return out


def attention_backward(cache: AttentionCache, d_out: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of L = Σ d_out ⊙ out w.r.t. the input and W_q, W_k, W_v, W_o."""
    d_out = np.asarray(d_out)
    params = cache.params
    if d_out.shape != cache.x.shape:
        raise ArgumentError(f"d_out shape {d_out.shape} does not match cached output {cache.x.shape}")
    c = params.channels
    h = params.num_heads

    d_w_o = d_out.reshape(-1, c).T @ cache.context.reshape(-1, c)
    d_context = _split_heads(d_out @ params.w_o, h)

    d_weights = d_context @ cache.v.transpose(0, 1, 3, 2)
    d_v = cache.weights.transpose(0, 1, 3, 2) @ d_context
    # Softmax Jacobian-vector product; masked entries have zero weight so get zero gradient.
    d_logits = cache.weights * (d_weights - (d_weights * cache.weights).sum(axis=-1, keepdims=True))
    d_logits *= params.scale
    d_q = d_logits @ cache.k
    d_k = d_logits.transpose(0, 1, 3, 2) @ cache.q

    x_flat = cache.x.reshape(-1, c)
    grads = {"w_o": d_w_o}
    d_x = np.zeros_like(cache.x)
    for name, d_proj in (("w_q", d_q), ("w_k", d_k), ("w_v", d_v)):
        d_proj = _merge_heads(d_proj)
        grads[name] = d_proj.reshape(-1, c).T @ x_flat
        d_x += d_proj @ getattr(params, name)
    return d_x, grads


def _tile_mask(mask: np.ndarray | None, count: int) -> np.ndarray | None:
    if mask is not None and mask.ndim == 3 and mask.shape[0] != count:
        # Per-window masks repeat for every batch element.
        mask = np.tile(mask, (count // mask.shape[0], 1, 1))
    return mask


def _windowed_forward(tensor: np.ndarray, partition: WindowPartition, params: AttentionParams,
                      mask: np.ndarray | None) -> tuple[np.ndarray, AttentionCache]:
    windows = gather_windows(tensor, partition)
    out, cache = attention_forward(windows, params, _tile_mask(mask, windows.shape[0]))
    return scatter_windows(out, partition), cache


def _windowed_apply(tensor: np.ndarray, partition: WindowPartition, params: AttentionParams,
                    mask: np.ndarray | None) -> np.ndarray:
    windows = gather_windows(tensor, partition)
    return scatter_windows(attention_apply(windows, params, _tile_mask(mask, windows.shape[0])), partition)


def _windowed_backward(cache: AttentionCache, d_map: np.ndarray,
                       partition: WindowPartition) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    d_windows, grads = attention_backward(cache, gather_windows(d_map, partition))
    return scatter_windows(d_windows, partition), grads


def windowed_attention(tensor: np.ndarray, partition: WindowPartition, params: AttentionParams,
                       mask: np.ndarray | None = None) -> np.ndarray:
    """Gather → per-window attention → scatter on one (B, C, H, W) level map.

    When `mask` is None the partition's own seam mask (if any) is used.
    """
    if mask is None:
        mask = partition.attention_mask()
    return _windowed_apply(tensor, partition, params, mask)


def partition_pair_mask(partition: WindowPartition) -> np.ndarray:
    """(HW, HW) mask allowing exactly the pairs windowed_attention lets interact."""
    groups = partition.group_ids()
    return groups[:, None] == groups[None, :]


def full_attention_oracle(tensor: np.ndarray, params: AttentionParams,
                          pair_mask: np.ndarray | None = None) -> np.ndarray:
    """Reference attention over all H·W cells of a level map, row-major cell order."""
    tensor = np.asarray(tensor)
    b, c, h, w = tensor.shape
    hw = h * w
    if hw > MAX_ORACLE_POSITIONS:
        raise ArgumentError(f"full attention oracle refuses {hw} positions (limit {MAX_ORACLE_POSITIONS})")
    if pair_mask is not None and pair_mask.shape != (hw, hw):
        raise ArgumentError(f"pair mask shape {pair_mask.shape} does not match {hw} positions")
    tokens = tensor.reshape(b, c, hw).transpose(0, 2, 1)
    out, _ = attention_forward(tokens, params, pair_mask)
    return out.transpose(0, 2, 1).reshape(b, c, h, w)
