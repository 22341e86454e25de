"""Six-block encoder alternating multi-view-axis and ROI windowed attention.

Each block runs, per pyramid level and in pre-norm residual form:
    x ← x + MVAttn(norm(x));  x ← x + ROIAttn(norm(x));  x ← x + FFN(norm(x))
Odd stages use the shifted partitions. With ffn_placement="sublayer" every
attention sublayer is followed by its own FFN instead.

Levels never exchange information, so a block runs levels independently and
optionally on a thread pool (PANOATTN_THREADS).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf

from panoattn.attention import (
    PARAM_NAMES,
    AttentionParams,
    _windowed_apply,
    _windowed_backward,
    _windowed_forward,
    init_attention_params,
)
from panoattn.config import thread_count
from panoattn.errors import ArgumentError
from panoattn.geometry import FeaturePyramid, PanoramaLayout, partition_windows
from panoattn.seeding import make_rng

logger = logging.getLogger("panoattn.encoder")

NORM_EPS = 1e-5
SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)
FFN_CHUNK_TOKENS = 8192  # tokens per band in feed_forward_apply
FFN_PLACEMENTS = ("block", "sublayer")
ATTENTION_PREFIX = {"mv_axis": "mv", "roi": "roi"}


@dataclass(frozen=True, eq=False)
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True, eq=False)
class FeedForwardParams:
    w1: np.ndarray  # (4C, C)
    w2: np.ndarray  # (C, 4C)


@dataclass(frozen=True, eq=False)
class EncoderBlock:
    stage: int
    mv_params: AttentionParams
    roi_params: AttentionParams
    ffns: tuple[FeedForwardParams, ...]
    attn_norm: NormParams
    ffn_norm: NormParams
    ffn_placement: str = "block"


@dataclass(frozen=True)
class EncoderOptions:
    shift_windows: bool = True
    mv_attention: bool = True
    roi_attention: bool = True


@dataclass(frozen=True, eq=False)
class EncoderStack:
    blocks: tuple[EncoderBlock, ...]
    layout: PanoramaLayout
    options: EncoderOptions = EncoderOptions()

    @property
    def channels(self) -> int:
        return self.blocks[0].mv_params.channels if self.blocks else 0


# ── Elementwise pieces ────────────────────────────────────────


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / SQRT2)) + x * np.exp(-0.5 * x * x) / SQRT2PI


def layer_norm(x: np.ndarray, norm: NormParams) -> tuple[np.ndarray, tuple]:
    """Normalize (B, C, H, W) over channels."""
    mu = x.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=1, keepdims=True) + NORM_EPS)
    xhat = (x - mu) * inv
    gamma = norm.gamma[None, :, None, None]
    return xhat * gamma + norm.beta[None, :, None, None], (xhat, inv, gamma)


def layer_norm_backward(cache: tuple, d_y: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    xhat, inv, gamma = cache
    grads = {"gamma": (d_y * xhat).sum(axis=(0, 2, 3)), "beta": d_y.sum(axis=(0, 2, 3))}
    d_xhat = d_y * gamma
    d_x = inv * (d_xhat - d_xhat.mean(axis=1, keepdims=True)
                 - xhat * (d_xhat * xhat).mean(axis=1, keepdims=True))
    return d_x, grads


def feed_forward(u: np.ndarray, ffn: FeedForwardParams) -> tuple[np.ndarray, tuple]:
    t = u.transpose(0, 2, 3, 1)
    pre = t @ ffn.w1.T
    act = gelu(pre)
    out = (act @ ffn.w2.T).transpose(0, 3, 1, 2)
    return out, (t, pre, act, ffn)


def feed_forward_apply(u: np.ndarray, ffn: FeedForwardParams, max_tokens: int = FFN_CHUNK_TOKENS) -> np.ndarray:
    """feed_forward without a cache, a band of map rows at a time."""
    b, _, h, w = u.shape
    rows = max(1, max_tokens // max(1, b * w))
    out = np.empty(u.shape, dtype=np.result_type(u, ffn.w2))
    for y0 in range(0, h, rows):
        out[:, :, y0:y0 + rows] = feed_forward(u[:, :, y0:y0 + rows], ffn)[0]
    return out


def feed_forward_backward(cache: tuple, d_out: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    t, pre, act, ffn = cache
    c, hidden = ffn.w2.shape
    d_y = d_out.transpose(0, 2, 3, 1)
    d_w2 = d_y.reshape(-1, c).T @ act.reshape(-1, hidden)
    d_pre = (d_y @ ffn.w2) * gelu_grad(pre)
    d_w1 = d_pre.reshape(-1, hidden).T @ t.reshape(-1, c)
    d_u = (d_pre @ ffn.w1).transpose(0, 3, 1, 2)
    return d_u, {"w1": d_w1, "w2": d_w2}


# ── Construction ──────────────────────────────────────────────


def build_encoder(layout: PanoramaLayout, channels: int, num_heads: int, seed: int,
                  num_blocks: int = 6, ffn_placement: str = "block",
                  options: EncoderOptions | None = None, dtype=np.float64) -> EncoderStack:
    """Deterministically initialize an encoder stack.

    Draw order from the "encoder" stream, per block: MV W_q, W_k, W_v, W_o;
    ROI W_q, W_k, W_v, W_o; then per FFN W_1 (4C×C), W_2 (C×4C). Every matrix
    is uniform(-1/√C, 1/√C); norms start at gamma=1, beta=0.
    """
    if ffn_placement not in FFN_PLACEMENTS:
        raise ArgumentError(f"ffn_placement must be one of {FFN_PLACEMENTS}, got '{ffn_placement}'")
    if num_blocks < 0:
        raise ArgumentError(f"num_blocks must be >= 0, got {num_blocks}")
    rng = make_rng(seed, "encoder")
    bound = 1.0 / np.sqrt(channels)
    hidden = 4 * channels
    num_ffns = 2 if ffn_placement == "sublayer" else 1

    blocks = []
    for stage in range(num_blocks):
        mv = init_attention_params(rng, channels, num_heads, dtype)
        roi = init_attention_params(rng, channels, num_heads, dtype)
        ffns = tuple(
            FeedForwardParams(
                w1=rng.uniform(-bound, bound, size=(hidden, channels)).astype(dtype),
                w2=rng.uniform(-bound, bound, size=(channels, hidden)).astype(dtype),
            )
            for _ in range(num_ffns)
        )
        blocks.append(EncoderBlock(
            stage=stage,
            mv_params=mv,
            roi_params=roi,
            ffns=ffns,
            attn_norm=NormParams(np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype)),
            ffn_norm=NormParams(np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype)),
            ffn_placement=ffn_placement,
        ))
    logger.debug(f"built encoder: {num_blocks} blocks, C={channels}, heads={num_heads}, seed={seed}")
    return EncoderStack(blocks=tuple(blocks), layout=layout, options=options or EncoderOptions())


def zero_residual_branches(stack: EncoderStack) -> EncoderStack:
    """Same stack with W_o = 0 and FFN W_2 = 0 everywhere: the identity map."""
    blocks = []
    for block in stack.blocks:
        blocks.append(replace(
            block,
            mv_params=block.mv_params.replace(w_o=np.zeros_like(block.mv_params.w_o)),
            roi_params=block.roi_params.replace(w_o=np.zeros_like(block.roi_params.w_o)),
            ffns=tuple(replace(f, w2=np.zeros_like(f.w2)) for f in block.ffns),
        ))
    return replace(stack, blocks=tuple(blocks))


def block_parameters(block: EncoderBlock) -> dict[str, np.ndarray]:
    """Flat name → array view of every trainable tensor in a block."""
    params = {}
    for kind, attn in (("mv", block.mv_params), ("roi", block.roi_params)):
        for name in PARAM_NAMES:
            params[f"{kind}.{name}"] = getattr(attn, name)
    for i, ffn in enumerate(block.ffns):
        params[f"ffn{i}.w1"] = ffn.w1
        params[f"ffn{i}.w2"] = ffn.w2
    for norm_name in ("attn_norm", "ffn_norm"):
        norm = getattr(block, norm_name)
        params[f"{norm_name}.gamma"] = norm.gamma
        params[f"{norm_name}.beta"] = norm.beta
    return params


def block_with_parameters(block: EncoderBlock, params: dict[str, np.ndarray]) -> EncoderBlock:
    """Inverse of block_parameters."""
    def attn(kind: str, base: AttentionParams) -> AttentionParams:
        return base.replace(**{name: params[f"{kind}.{name}"] for name in PARAM_NAMES})

    return replace(
        block,
        mv_params=attn("mv", block.mv_params),
        roi_params=attn("roi", block.roi_params),
        ffns=tuple(FeedForwardParams(params[f"ffn{i}.w1"], params[f"ffn{i}.w2"]) for i in range(len(block.ffns))),
        attn_norm=NormParams(params["attn_norm.gamma"], params["attn_norm.beta"]),
        ffn_norm=NormParams(params["ffn_norm.gamma"], params["ffn_norm.beta"]),
    )


# ── Forward / backward ────────────────────────────────────────


def _sublayers(block: EncoderBlock, options: EncoderOptions) -> list[tuple[str, object]]:
    kinds = [k for k, on in (("mv_axis", options.mv_attention), ("roi", options.roi_attention)) if on]
    if block.ffn_placement == "sublayer":
        steps = []
        for i, kind in enumerate(kinds):
            steps += [("attn", kind), ("ffn", i)]
        return steps
    return [("attn", kind) for kind in kinds] + [("ffn", 0)]


def _level_forward(block: EncoderBlock, x: np.ndarray, layout: PanoramaLayout, level: int,
                   shifted: bool, options: EncoderOptions, keep_cache: bool = True) -> tuple[np.ndarray, list]:
    caches = []
    for tag, which in _sublayers(block, options):
        partition = op_cache = None
        if tag == "attn":
            u, norm_cache = layer_norm(x, block.attn_norm)
            partition = partition_windows(layout, level, which, shifted)
            params = block.mv_params if which == "mv_axis" else block.roi_params
            if keep_cache:
                y, op_cache = _windowed_forward(u, partition, params, partition.attention_mask())
            else:
                y = _windowed_apply(u, partition, params, partition.attention_mask())
        else:
            u, norm_cache = layer_norm(x, block.ffn_norm)
            if keep_cache:
                y, op_cache = feed_forward(u, block.ffns[which])
            else:
                y = feed_forward_apply(u, block.ffns[which])
        if keep_cache:
            caches.append((tag, which, partition, norm_cache, op_cache))
        x = x + y
    return x, caches


def _level_backward(caches: list, d_x: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
    for tag, which, partition, norm_cache, op_cache in reversed(caches):
        if tag == "attn":
            d_u, op_grads = _windowed_backward(op_cache, d_x, partition)
            prefix, norm_name = ATTENTION_PREFIX[which], "attn_norm"
        else:
            d_u, op_grads = feed_forward_backward(op_cache, d_x)
            prefix, norm_name = f"ffn{which}", "ffn_norm"
        d_in, norm_grads = layer_norm_backward(norm_cache, d_u)
        for name, g in op_grads.items():
            grads[f"{prefix}.{name}"] += g
        for name, g in norm_grads.items():
            grads[f"{norm_name}.{name}"] += g
        d_x = d_x + d_in
    return d_x


def _run_levels(fn, count: int, workers: int | None) -> list:
    workers = workers or thread_count()
    if workers <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=min(workers, count)) as pool:
        return list(pool.map(fn, range(count)))


def _block_forward(block: EncoderBlock, pyramid: FeaturePyramid, stage: int,
                   layout: PanoramaLayout, options: EncoderOptions,
                   workers: int | None, keep_cache: bool) -> tuple[FeaturePyramid, list]:
    if stage < 0:
        raise ArgumentError(f"stage must be >= 0, got {stage}")
    pyramid.check_layout(layout)
    shifted = options.shift_windows and stage % 2 == 1
    results = _run_levels(
        lambda level: _level_forward(block, pyramid[level], layout, level, shifted, options, keep_cache),
        len(pyramid),
        workers,
    )
    return FeaturePyramid(tuple(out for out, _ in results)), [caches for _, caches in results]


def block_forward(block: EncoderBlock, pyramid: FeaturePyramid, stage: int, layout: PanoramaLayout,
                  options: EncoderOptions | None = None, workers: int | None = None) -> FeaturePyramid:
    """Apply one encoder block to every level; odd stages use shifted windows."""
    out, _ = _block_forward(block, pyramid, stage, layout, options or EncoderOptions(), workers, keep_cache=False)
    return out


def encoder_forward(stack: EncoderStack, pyramid: FeaturePyramid, workers: int | None = None) -> FeaturePyramid:
    """Run blocks 0..L-1 in order; output shapes equal input shapes."""
    pyramid.check_layout(stack.layout)
    for block in stack.blocks:
        pyramid = block_forward(block, pyramid, block.stage, stack.layout, stack.options, workers)
        logger.debug(f"block {block.stage} done")
    return pyramid


def encoder_forward_cached(stack: EncoderStack, pyramid: FeaturePyramid) -> tuple[FeaturePyramid, list]:
    pyramid.check_layout(stack.layout)
    caches = []
    for block in stack.blocks:
        pyramid, block_caches = _block_forward(
            block, pyramid, block.stage, stack.layout, stack.options, 1, keep_cache=True,
        )
        caches.append(block_caches)
    return pyramid, caches


def encoder_backward(stack: EncoderStack, caches: list,
                     d_levels: list[np.ndarray]) -> tuple[list[np.ndarray], list[dict[str, np.ndarray]]]:
    """Gradients of Σ_l d_levels[l] ⊙ out[l] w.r.t. the input pyramid and every block parameter."""
    if len(caches) != len(stack.blocks):
        raise ArgumentError(f"{len(caches)} block caches for {len(stack.blocks)} blocks")
    d_levels = [np.asarray(d) for d in d_levels]
    block_grads: list[dict[str, np.ndarray]] = []
    for block, block_caches in zip(reversed(stack.blocks), reversed(caches)):
        grads = {name: np.zeros_like(p) for name, p in block_parameters(block).items()}
        d_levels = [_level_backward(level_caches, d, grads) for level_caches, d in zip(block_caches, d_levels)]
        block_grads.append(grads)
    return d_levels, block_grads[::-1]


# ── Locality ────────────────────────────────────────────────────────────────────────────────────────


def perturbation_footprint(stack: EncoderStack, pyramid: FeaturePyramid, level: int,
                           cell: tuple[int, int], delta: float = 1.0) -> np.ndarray:
    """(H, W) mask of output cells at `level` that change when input `cell` is perturbed."""
    base = encoder_forward(stack, pyramid)
    levels = [np.array(lv) for lv in pyramid]
    y, x = cell
    levels[level][:, :, y, x] += delta
    perturbed = encoder_forward(stack, FeaturePyramid(tuple(levels)))
    return np.any(perturbed[level] != base[level], axis=(0, 1))


def reachable_cells(layout: PanoramaLayout, level: int, cell: tuple[int, int], num_blocks: int,
                    options: EncoderOptions | None = None) -> np.ndarray:
    """(H, W) mask of cells a perturbation at `cell` can reach through window membership alone."""
    options = options or EncoderOptions()
    lv = layout.level(level)
    reached = np.zeros(lv.num_cells, dtype=bool)
    reached[cell[0] * lv.pano_w + cell[1]] = True
    kinds = [k for k, on in (("mv_axis", options.mv_attention), ("roi", options.roi_attention)) if on]
    for stage in range(num_blocks):
        shifted = options.shift_windows and stage % 2 == 1
        for kind in kinds:
            groups = partition_windows(layout, level, kind, shifted).group_ids()
            reached = np.isin(groups, groups[reached])
    return reached.reshape(lv.pano_h, lv.pano_w)
