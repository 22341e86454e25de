"""Central finite-difference checks for the attention kernel and the encoder."""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from panoattn.attention import PARAM_NAMES, attention_backward, attention_forward, init_attention_params
from panoattn.encoder import (
    EncoderStack,
    block_parameters,
    block_with_parameters,
    encoder_backward,
    encoder_forward,
    encoder_forward_cached,
)
from panoattn.geometry import FeaturePyramid

logger = logging.getLogger("panoattn.gradcheck")

FD_EPS = 1e-5
REL_FLOOR = 1e-3


@dataclass(frozen=True)
class GradCheckResult:
    checked: int
    max_rel_error: float
    worst: str

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def central_difference(loss: Callable[[np.ndarray], float], value: np.ndarray, index: tuple,
                       eps: float = FD_EPS) -> float:
    plus = np.array(value, dtype=np.float64)
    minus = plus.copy()
    plus[index] += eps
    minus[index] -= eps
    return (loss(plus) - loss(minus)) / (2.0 * eps)


def _sample_indices(rng: np.random.Generator, shape: tuple, count: int) -> list[tuple]:
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


class _Tracker:
    def __init__(self):
        self.checked = 0
        self.max_err = 0.0
        self.worst = ""

    def add(self, label: str, analytic: float, numeric: float):
        err = relative_error(analytic, numeric)
        self.checked += 1
        if err > self.max_err:
            self.max_err, self.worst = err, label

    def result(self) -> GradCheckResult:
        return GradCheckResult(checked=self.checked, max_rel_error=self.max_err, worst=self.worst)


def check_attention_gradients(rng: np.random.Generator, windows: int = 2, slots: int = 4,
                              channels: int = 8, num_heads: int = 2, masked: bool = False,
                              eps: float = FD_EPS) -> GradCheckResult:
    """Every gradient entry of one random attention instance vs central differences."""
    params = init_attention_params(rng, channels, num_heads, np.float64)
    x = rng.standard_normal((windows, slots, channels))
    d_out = rng.standard_normal((windows, slots, channels))
    mask = None
    if masked:
        mask = rng.random((windows, slots, slots)) < 0.6
        mask |= mask.transpose(0, 2, 1)
        mask[:, np.arange(slots), np.arange(slots)] = True

    _, cache = attention_forward(x, params, mask)
    d_x, grads = attention_backward(cache, d_out)
    tracker = _Tracker()

    def loss_x(value):
        return float((attention_forward(value, params, mask)[0] * d_out).sum())

    for index in np.ndindex(x.shape):
        tracker.add(f"x{index}", d_x[index], central_difference(loss_x, x, index, eps))

    for name in PARAM_NAMES:
        def loss_w(value, name=name):
            return float((attention_forward(x, params.replace(**{name: value}), mask)[0] * d_out).sum())

        w = getattr(params, name)
        for index in np.ndindex(w.shape):
            tracker.add(f"{name}{index}", grads[name][index], central_difference(loss_w, w, index, eps))

    return tracker.result()


def check_encoder_gradients(stack: EncoderStack, pyramid: FeaturePyramid, rng: np.random.Generator,
                            samples: int = 20, eps: float = FD_EPS) -> GradCheckResult:
    """Sampled input and parameter gradients of L = Σ_l g_l ⊙ encoder(x)_l vs central differences."""
    d_levels = [rng.standard_normal(level.shape) for level in pyramid]

    def loss_of(s: EncoderStack, p: FeaturePyramid) -> float:
        out = encoder_forward(s, p, workers=1)
        return float(sum((o * g).sum() for o, g in zip(out, d_levels)))

    _, caches = encoder_forward_cached(stack, pyramid)
    d_inputs, block_grads = encoder_backward(stack, caches, d_levels)
    tracker = _Tracker()

    for level, arr in enumerate(pyramid):
        for index in _sample_indices(rng, arr.shape, samples):
            def loss_in(value, level=level):
                levels = list(pyramid)
                levels[level] = value
                return loss_of(stack, FeaturePyramid(tuple(levels)))

            tracker.add(f"input[{level}]{index}", d_inputs[level][index],
                        central_difference(loss_in, arr, index, eps))

    for b, block in enumerate(stack.blocks):
        params = block_parameters(block)
        names = sorted(params)
        picks = rng.choice(len(names), size=min(samples, len(names)), replace=False)
        for pick in picks:
            name = names[int(pick)]
            index = _sample_indices(rng, params[name].shape, 1)[0]

            def loss_p(value, b=b, name=name):
                blocks = list(stack.blocks)
                blocks[b] = block_with_parameters(stack.blocks[b], {**block_parameters(stack.blocks[b]), name: value})
                return loss_of(EncoderStack(tuple(blocks), stack.layout, stack.options), pyramid)

            tracker.add(f"block{b}.{name}{index}", block_grads[b][name][index],
                        central_difference(loss_p, params[name], index, eps))

    result = tracker.result()
    logger.debug(f"encoder gradcheck: {result.checked} entries, max rel err {result.max_rel_error:.2e}")
    return result
