# generator.py
"""
Cost-aggregation generator.

A small encoder-decoder refines the raw cost volume residually; the refined cost
is turned into a matching probability, pooled to its top-K values and reduced
to a disparity with a soft-argmax.
"""
import logging
from dataclasses import dataclass

import numpy as np

from nn_core import (ParamStore, Tape, Var, _accumulate, add, bilinear_upsample2, concat, conv_bn_relu,
                     conv_layer, max_pool2, scale, softmax)
from stereo_data import CostKind, CostVolume

logger = logging.getLogger('Generator')


@dataclass
class GeneratorConfig:
    base_channels: int = 16
    sigma: float = 0.05
    k: int = 5
    d_max: int = 8

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("GeneratorConfig: sigma must be positive")
        if not 1 <= self.k <= self.d_max:
            raise ValueError(f"GeneratorConfig: need 1 <= k <= d_max, got k={self.k}, d_max={self.d_max}")
        if self.base_channels < 1:
            raise ValueError("GeneratorConfig: base_channels must be >= 1")


@dataclass
class MatchingProbabilityVolume:
    data: np.ndarray  # H x W x D, rows on the simplex


@dataclass
class GeneratorOutput:
    refined: Var
    probability: Var
    topk: Var
    disparity: Var


def init_generator(cfg: GeneratorConfig, seed: int, dtype=np.float32) -> ParamStore:
    c, d = cfg.base_channels, cfg.d_max
    store = ParamStore(seed, dtype)
    store.add_block("conv1", 3, d, c)
    store.add_block("conv1b", 3, c, c)
    store.add_block("conv2", 3, c, 2 * c)
    store.add_block("conv2b", 3, 2 * c, 2 * c)
    store.add_block("conv3", 3, 2 * c, 2 * c)
    store.add_block("conv3b", 3, 2 * c, 2 * c)
    store.add_block("conv4", 3, 4 * c, c)
    store.add_block("conv4b", 3, c, c)
    # zero residual at initialisation: the refined cost starts equal to the raw cost
    store.add_conv("conv5", 3, 2 * c, d, zero=True)
    return store


def aggregate(tape: Tape, raw: Var, params: ParamStore, mode: str = "train") -> Var:
    """Residual encoder-decoder on an (N, H, W, D) raw cost batch."""
    _, h, w, _ = raw.shape
    if h % 4 or w % 4:
        raise ValueError(f"aggregate: H and W must be divisible by 4, got {h}x{w}")
    e1 = conv_bn_relu(tape, raw, params, "conv1", mode)
    e1 = conv_bn_relu(tape, e1, params, "conv1b", mode)
    e2 = conv_bn_relu(tape, max_pool2(tape, e1), params, "conv2", mode)
    e2 = conv_bn_relu(tape, e2, params, "conv2b", mode)
    e3 = conv_bn_relu(tape, max_pool2(tape, e2), params, "conv3", mode)
    e3 = conv_bn_relu(tape, e3, params, "conv3b", mode)
    d2 = concat(tape, [bilinear_upsample2(tape, e3), e2])
    d2 = conv_bn_relu(tape, d2, params, "conv4", mode)
    d2 = conv_bn_relu(tape, d2, params, "conv4b", mode)
    d1 = concat(tape, [bilinear_upsample2(tape, d2), e1])
    residual = conv_layer(tape, d1, params, "conv5")
    return add(tape, raw, residual)


def probability_op(tape: Tape, refined: Var, sigma: float) -> Var:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return softmax(tape, scale(tape, refined, -1.0 / sigma))


def topk_op(tape: Tape, p: Var, k: int) -> Var:
    """k largest entries along the last axis, descending; ties keep the lower index first."""
    d = p.shape[-1]
    if not 1 <= k <= d:
        raise ValueError(f"topk: k must lie in [1, {d}], got {k}")
    order = np.argsort(-p.value, axis=-1, kind="stable")[..., :k]
    tape.note(order)
    out = Var(np.take_along_axis(p.value, order, axis=-1), requires_grad=p.requires_grad)

    def backward(g):
        gp = np.zeros(p.shape, dtype=g.dtype)
        np.put_along_axis(gp, order, g, axis=-1)
        _accumulate(p, gp)
    return tape.record(out, backward)


def soft_argmax_op(tape: Tape, p: Var) -> Var:
    candidates = np.arange(p.shape[-1], dtype=p.value.dtype)
    out = Var(p.value @ candidates, requires_grad=p.requires_grad)
    return tape.record(out, lambda g: _accumulate(p, g[..., None] * candidates))


def generator_pass(tape: Tape, raw: Var, params: ParamStore, cfg: GeneratorConfig,
                   mode: str = "train") -> GeneratorOutput:
    if raw.shape[-1] != cfg.d_max:
        raise ValueError(f"raw cost has {raw.shape[-1]} candidates, generator expects {cfg.d_max}")
    refined = aggregate(tape, raw, params, mode)
    p = probability_op(tape, refined, cfg.sigma)
    return GeneratorOutput(refined, p, topk_op(tape, p, cfg.k), soft_argmax_op(tape, p))


# ---------------------------------------------------------------------------
# Single-image conveniences (no gradients, eval-mode BN)
# ---------------------------------------------------------------------------

def _batched(cost: CostVolume, dtype) -> Var:
    return Var(np.asarray(cost.data, dtype=dtype)[None])


def residual_aggregate(raw: CostVolume, params: ParamStore, cfg: GeneratorConfig,
                       mode: str = "eval") -> CostVolume:
    refined = aggregate(Tape(), _batched(raw, params.dtype), params, mode)
    return CostVolume(refined.value[0], CostKind.REFINED)


def normalize_probability(refined: CostVolume, sigma: float) -> MatchingProbabilityVolume:
    return MatchingProbabilityVolume(probability_op(Tape(), Var(refined.data), sigma).value)


def topk_pool(p: MatchingProbabilityVolume, k: int) -> np.ndarray:
    return topk_op(Tape(), Var(p.data), k).value


def soft_argmax(p: MatchingProbabilityVolume) -> np.ndarray:
    return soft_argmax_op(Tape(), Var(p.data)).value


def generator_forward(raw: CostVolume, params: ParamStore, cfg: GeneratorConfig, mode: str = "eval"):
    """(C_topk, D, P) for one image."""
    out = generator_pass(Tape(), _batched(raw, params.dtype), params, cfg, mode)
    return out.topk.value[0], out.disparity.value[0], MatchingProbabilityVolume(out.probability.value[0])
