# discriminator.py
"""
Confidence network.

Three full-resolution feature extractors (top-K cost, disparity, colour) are
fused either by per-pixel softmax weights predicted from the features
themselves or by plain channel concatenation; a small head maps the fused
features to a confidence in (0, 1).
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from nn_core import (ParamStore, Tape, Var, concat, conv_bn_relu, conv_layer, mix_modalities, reshape,
                     scale, sigmoid, softmax)
from stereo_data import ConfidenceKind, ConfidenceMap, to_luma_chroma

logger = logging.getLogger('Discriminator')

EXTRACTOR_DEPTH = 3
MODALITIES = ("cost", "disp", "color")


class Fusion(Enum):
    DYNAMIC = "dynamic"
    CONCAT = "concat"


@dataclass
class DiscriminatorConfig:
    feat_channels: int = 16
    fusion: Fusion = Fusion.DYNAMIC
    head_depth: int = 3
    use_color: bool = True

    def __post_init__(self):
        if self.feat_channels < 1:
            raise ValueError("DiscriminatorConfig: feat_channels must be >= 1")
        if self.head_depth < 1:
            raise ValueError("DiscriminatorConfig: head_depth must be >= 1")
        self.fusion = Fusion(self.fusion)

    @property
    def modalities(self) -> Tuple[str, ...]:
        return MODALITIES if self.use_color else MODALITIES[:2]


@dataclass
class FusionWeights:
    data: np.ndarray  # H x W x M, rows on the simplex


@dataclass
class DiscriminatorOutput:
    confidence: Var
    weights: Optional[Var] = None
    features: List[Var] = field(default_factory=list)


def init_discriminator(cfg: DiscriminatorConfig, k: int, seed: int, dtype=np.float32) -> ParamStore:
    f = cfg.feat_channels
    in_channels = {"cost": k, "disp": 1, "color": 3}
    store = ParamStore(seed, dtype)
    for m in cfg.modalities:
        cin = in_channels[m]
        for i in range(1, EXTRACTOR_DEPTH + 1):
            store.add_block(f"{m}.conv{i}", 3, cin, f)
            cin = f
    n_mod = len(cfg.modalities)
    if cfg.fusion is Fusion.DYNAMIC:
        store.add_block("fusion.conv1", 3, n_mod * f, f)
        store.add_conv("fusion.logits", 1, f, n_mod, zero=True)
        cin = f
    else:
        cin = n_mod * f
    for i in range(1, cfg.head_depth):
        store.add_block(f"head.conv{i}", 3, cin, f)
        cin = f
    store.add_conv("head.out", 1, cin, 1, zero=True)
    return store


def extract_op(tape: Tape, inputs: List[Var], params: ParamStore, cfg: DiscriminatorConfig,
               mode: str = "train") -> List[Var]:
    if len(inputs) != len(cfg.modalities):
        raise ValueError(f"expected {len(cfg.modalities)} modality inputs, got {len(inputs)}")
    spatial = {x.shape[:3] for x in inputs}
    if len(spatial) != 1:
        raise ValueError(f"modality inputs disagree in spatial shape: {sorted(spatial)}")
    feats = []
    for name, x in zip(cfg.modalities, inputs):
        for i in range(1, EXTRACTOR_DEPTH + 1):
            x = conv_bn_relu(tape, x, params, f"{name}.conv{i}", mode)
        feats.append(x)
    return feats


def dynamic_fusion_op(tape: Tape, feats: List[Var], params: ParamStore, mode: str = "train"):
    """Per-pixel softmax weights over modalities, then the weighted feature sum."""
    h = conv_bn_relu(tape, concat(tape, feats), params, "fusion.conv1", mode)
    weights = softmax(tape, conv_layer(tape, h, params, "fusion.logits"))
    return mix_modalities(tape, weights, feats), weights


def confidence_pass(tape: Tape, c_topk: Var, disparity: Var, color: Optional[Var], params: ParamStore,
                    cfg: DiscriminatorConfig, d_max: int, mode: str = "train") -> DiscriminatorOutput:
    """Batched forward: c_topk (N,H,W,k), disparity (N,H,W), color (N,H,W,3) luma/chroma."""
    d_in = reshape(tape, scale(tape, disparity, 1.0 / d_max), disparity.shape + (1,))
    inputs = [c_topk, d_in] + ([color] if cfg.use_color else [])
    feats = extract_op(tape, inputs, params, cfg, mode)
    weights = None
    if cfg.fusion is Fusion.DYNAMIC:
        x, weights = dynamic_fusion_op(tape, feats, params, mode)
    else:
        x = concat(tape, feats)
    for i in range(1, cfg.head_depth):
        x = conv_bn_relu(tape, x, params, f"head.conv{i}", mode)
    logits = conv_layer(tape, x, params, "head.out")
    q = sigmoid(tape, reshape(tape, logits, logits.shape[:-1]))
    return DiscriminatorOutput(q, weights, feats)


# ---------------------------------------------------------------------------
# Single-image conveniences (no gradients)
# ---------------------------------------------------------------------------

def _single_inputs(c_topk, d, img, params: ParamStore, cfg: DiscriminatorConfig, d_max: int):
    dt = params.dtype
    color = Var(to_luma_chroma(np.asarray(img, dtype=np.float64)).astype(dt)[None]) if cfg.use_color else None
    return Var(np.asarray(c_topk, dtype=dt)[None]), Var(np.asarray(d, dtype=dt)[None]), color


def extract_features(c_topk: np.ndarray, d: np.ndarray, img: np.ndarray, params: ParamStore,
                     cfg: DiscriminatorConfig, d_max: int, mode: str = "eval"):
    """(f_C, f_D, f_I) for one image; f_I is None when colour is disabled."""
    c, dv, color = _single_inputs(c_topk, d, img, params, cfg, d_max)
    tape = Tape()
    d_in = reshape(tape, scale(tape, dv, 1.0 / d_max), dv.shape + (1,))
    feats = extract_op(tape, [c, d_in] + ([color] if color is not None else []), params, cfg, mode)
    out = [f.value[0] for f in feats]
    return tuple(out) if len(out) == 3 else (out[0], out[1], None)


def dynamic_fusion(f_c: np.ndarray, f_d: np.ndarray, f_i: Optional[np.ndarray], params: ParamStore,
                   mode: str = "eval") -> Tuple[np.ndarray, FusionWeights]:
    feats = [Var(np.asarray(f)[None]) for f in (f_c, f_d, f_i) if f is not None]
    fused, weights = dynamic_fusion_op(Tape(), feats, params, mode)
    return fused.value[0], FusionWeights(weights.value[0])


def concat_fusion(f_c: np.ndarray, f_d: np.ndarray, f_i: Optional[np.ndarray]) -> np.ndarray:
    """Channel concatenation in (cost, disparity, colour) order."""
    return np.concatenate([f for f in (f_c, f_d, f_i) if f is not None], axis=-1)


def confidence_forward(c_topk: np.ndarray, d: np.ndarray, img: np.ndarray, params: ParamStore,
                       cfg: DiscriminatorConfig, d_max: int, mode: str = "eval") -> ConfidenceMap:
    c, dv, color = _single_inputs(c_topk, d, img, params, cfg, d_max)
    out = confidence_pass(Tape(), c, dv, color, params, cfg, d_max, mode)
    return ConfidenceMap(out.confidence.value[0], ConfidenceKind.ESTIMATED)
