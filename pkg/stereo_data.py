# stereo_data.py
"""
Stereo samples, synthetic scenes, census/SGM raw matching costs, ground-truth
confidence and differentiable horizontal warping.

Disparity candidates are 0-based: d in {0, ..., d_max-1}. A left pixel (x, y)
matches the right pixel (x - d, y).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from nn_core import Tape, Var, _accumulate, _needs
from seeding import DATA_STREAM, stream_rng

logger = logging.getLogger('StereoData')

# Plain numpy aliases for the map types
Image = np.ndarray          # H x W x 3, [0, 1]
DisparityMap = np.ndarray   # H x W, real
ValidityMask = np.ndarray   # H x W, bool

CENSUS_WINDOWS = (3, 5, 7)
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class CostKind(Enum):
    RAW = "raw"
    REFINED = "refined"


class ConfidenceKind(Enum):
    ESTIMATED = "estimated"
    GROUND_TRUTH = "ground_truth"


@dataclass
class CostVolume:
    data: np.ndarray  # H x W x D
    kind: CostKind = CostKind.RAW

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"CostVolume expects H x W x D data, got shape {self.data.shape}")

    @property
    def d_max(self) -> int:
        return self.data.shape[-1]


@dataclass
class ConfidenceMap:
    data: np.ndarray  # H x W
    kind: ConfidenceKind = ConfidenceKind.ESTIMATED
    # Pixels excluded from every loss and metric (ground truth only)
    valid: Optional[np.ndarray] = None


@dataclass
class StereoSample:
    left: Image
    right: Image
    gt_disparity: DisparityMap
    gt_valid: ValidityMask
    d_max: int
    name: str = ""
    seed: int = 0
    raw_cost: Optional[CostVolume] = field(default=None, repr=False)

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"left {self.left.shape} and right {self.right.shape} differ in shape")
        if self.gt_disparity.shape != self.left.shape[:2] or self.gt_valid.shape != self.left.shape[:2]:
            raise ValueError("ground truth maps must match the image size")
        if self.d_max < 1:
            raise ValueError("d_max must be positive")
        d = self.gt_disparity[self.gt_valid]
        if d.size and (d.min() < 0 or d.max() > self.d_max - 1):
            raise ValueError(f"ground-truth disparity outside [0, {self.d_max - 1}] on valid pixels")

    @property
    def shape(self):
        return self.left.shape[:2]


@dataclass
class CostConfig:
    window: int = 5
    p1: float = 0.008
    p2: float = 0.126
    paths: int = 4

    def __post_init__(self):
        if self.window not in CENSUS_WINDOWS:
            raise ValueError(f"census window must be one of {CENSUS_WINDOWS}")
        if not 0 < self.p1 <= self.p2:
            raise ValueError("SGM penalties must satisfy 0 < p1 <= p2")
        if self.paths not in (1, 2, 4):
            raise ValueError("SGM paths must be 1, 2 or 4")


@dataclass
class SynthConfig:
    count: int = 20
    height: int = 64
    width: int = 64
    d_max: int = 8
    n_layers: int = 3
    workers: int = 1


# ---------------------------------------------------------------------------
# Census transform and raw cost
# ---------------------------------------------------------------------------

def _check_window(window: int) -> None:
    if window % 2 == 0 or window not in CENSUS_WINDOWS:
        raise ValueError(f"census window must be odd and one of {CENSUS_WINDOWS}, got {window}")


def census_bits(image: np.ndarray, window: int) -> np.ndarray:
    """H x W x (window^2 - 1) booleans, neighbours in row-major order without the centre."""
    _check_window(window)
    if image.ndim != 2:
        raise ValueError("census_bits expects a single-channel H x W image")
    if not np.all(np.isfinite(image)):
        raise ValueError("census_bits: image must be finite")
    r = window // 2
    padded = np.pad(image, r, mode="edge")
    h, w = image.shape
    bits = []
    for dy in range(window):
        for dx in range(window):
            if dy == r and dx == r:
                continue
            bits.append(padded[dy:dy + h, dx:dx + w] < image)
    return np.stack(bits, axis=-1)


def census_transform(image: np.ndarray, window: int) -> np.ndarray:
    """Census codes; the first neighbour in row-major order is the most significant bit."""
    bits = census_bits(image, window)
    n = bits.shape[-1]
    weights = np.left_shift(np.uint64(1), np.arange(n - 1, -1, -1, dtype=np.uint64))
    return np.sum(bits.astype(np.uint64) * weights, axis=-1, dtype=np.uint64)


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Bit count of a XOR b for uint64 census codes."""
    x = np.bitwise_xor(np.asarray(a, dtype=np.uint64), np.asarray(b, dtype=np.uint64))
    as_bytes = x[..., None].view(np.uint8)
    return np.unpackbits(as_bytes, axis=-1).sum(axis=-1)


def _channels(image: np.ndarray) -> List[np.ndarray]:
    if image.ndim == 2:
        return [image]
    return [image[..., c] for c in range(image.shape[-1])]


def compute_raw_cost(sample: StereoSample, window: int) -> CostVolume:
    """Normalised census Hamming cost, mean over colour channels, in [0, 1]."""
    if sample.d_max < 2:
        raise ValueError("compute_raw_cost requires d_max >= 2")
    h, w = sample.shape
    cols = np.arange(w)
    cost = np.zeros((h, w, sample.d_max))
    left_ch, right_ch = _channels(sample.left), _channels(sample.right)
    for cl, cr in zip(left_ch, right_ch):
        bl = census_bits(cl, window)
        br = census_bits(cr, window)
        n_bits = bl.shape[-1]
        for d in range(sample.d_max):
            shifted = br[:, np.clip(cols - d, 0, w - 1), :]
            cost[:, :, d] += np.count_nonzero(bl != shifted, axis=-1) / n_bits
    cost /= len(left_ch)
    return CostVolume(cost, CostKind.RAW)


# ---------------------------------------------------------------------------
# Semi-global aggregation
# ---------------------------------------------------------------------------

def _path_left_to_right(c: np.ndarray, p1: float, p2: float) -> np.ndarray:
    h, w, d = c.shape
    out = np.empty_like(c)
    out[:, 0] = c[:, 0]
    inf = np.full((h, 1), np.inf)
    for x in range(1, w):
        prev = out[:, x - 1]
        prev_min = prev.min(axis=-1, keepdims=True)
        lower = np.concatenate([inf, prev[:, :-1]], axis=-1) + p1
        upper = np.concatenate([prev[:, 1:], inf], axis=-1) + p1
        best = np.minimum(np.minimum(prev, prev_min + p2), np.minimum(lower, upper))
        out[:, x] = c[:, x] + best - prev_min
    return out


def sgm_aggregate(cost: CostVolume, p1: float, p2: float, paths: int = 4) -> CostVolume:
    """Mean of the selected axis-aligned SGM path recursions."""
    if p1 > p2:
        raise ValueError(f"sgm_aggregate: p1 ({p1}) must not exceed p2 ({p2})")
    if p1 <= 0:
        raise ValueError("sgm_aggregate: p1 must be positive")
    if paths not in (1, 2, 4):
        raise ValueError("sgm_aggregate: paths must be 1, 2 or 4")
    c = np.asarray(cost.data, dtype=np.float64)
    runs = [_path_left_to_right(c, p1, p2)]
    if paths >= 2:
        runs.append(_path_left_to_right(c[:, ::-1], p1, p2)[:, ::-1])
    if paths == 4:
        ct = c.transpose(1, 0, 2)
        runs.append(_path_left_to_right(ct, p1, p2).transpose(1, 0, 2))
        runs.append(_path_left_to_right(ct[:, ::-1], p1, p2)[:, ::-1].transpose(1, 0, 2))
    return CostVolume(np.mean(runs, axis=0), CostKind.RAW)


def raw_cost_pipeline(sample: StereoSample, cfg: CostConfig) -> CostVolume:
    """Census cost followed by SGM; reuses the sample's cached volume when present."""
    if sample.raw_cost is not None:
        return sample.raw_cost
    raw = compute_raw_cost(sample, cfg.window)
    return sgm_aggregate(raw, cfg.p1, cfg.p2, cfg.paths)


def wta_disparity(cost: CostVolume) -> DisparityMap:
    """Per-pixel argmin; ties go to the smaller disparity."""
    return np.argmin(cost.data, axis=-1).astype(np.float64)


def ground_truth_confidence(d_est: DisparityMap, d_gt: DisparityMap, valid: ValidityMask,
                            rho: float = 0.9) -> ConfidenceMap:
    """Q* = 1 where |d_est - d_gt| < rho on valid pixels, else 0; invalid pixels are flagged."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    if not (np.shape(d_est) == np.shape(d_gt) == np.shape(valid)):
        raise ValueError(f"shape mismatch: {np.shape(d_est)}, {np.shape(d_gt)}, {np.shape(valid)}")
    valid = np.asarray(valid, dtype=bool)
    confident = (np.abs(np.asarray(d_est) - np.asarray(d_gt)) < rho) & valid
    return ConfidenceMap(confident.astype(np.float64), ConfidenceKind.GROUND_TRUTH, valid.copy())


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------

def _warp_coords(disparity: np.ndarray, width: int):
    xs = np.arange(width) - disparity
    xc = np.clip(xs, 0, width - 1)
    x0 = np.floor(xc).astype(np.int64)
    if width > 1:
        x0 = np.minimum(x0, width - 2)
    x1 = np.minimum(x0 + 1, width - 1)
    a = xc - x0
    inside = (xs > 0) & (xs < width - 1)
    return x0, x1, a, inside


def _gather_w(image: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(image, idx[..., None], axis=-2)


def _scatter_w(values: np.ndarray, idx: np.ndarray, shape) -> np.ndarray:
    *lead, h, w, c = shape
    rows = int(np.prod(lead, dtype=np.int64)) * h
    base = (np.arange(rows) * w).reshape(*lead, h, 1)
    out = np.zeros((rows * w, c), dtype=values.dtype)
    np.add.at(out, (base + idx).ravel(), values.reshape(-1, c))
    return out.reshape(shape)


def bilinear_warp(image: np.ndarray, disparity: np.ndarray) -> np.ndarray:
    """out(x, y) = image sampled at (x - disparity, y), column clamped to [0, W-1]."""
    if not np.all(np.isfinite(disparity)):
        raise ValueError("bilinear_warp: disparity must be finite")
    squeeze = image.ndim == disparity.ndim
    img = image[..., None] if squeeze else image
    x0, x1, a, _ = _warp_coords(disparity, img.shape[-2])
    a = a[..., None]
    out = (1.0 - a) * _gather_w(img, x0) + a * _gather_w(img, x1)
    return out[..., 0] if squeeze else out


def warp_op(tape: Tape, image: Var, disparity: Var) -> Var:
    """Tape primitive for bilinear_warp on (N,H,W,C) images and (N,H,W) disparities."""
    img = image.value
    x0, x1, a, inside = _warp_coords(disparity.value, img.shape[-2])
    tape.note(x0)
    tape.note(inside)
    a3 = a[..., None]
    v0, v1 = _gather_w(img, x0), _gather_w(img, x1)
    out = Var((1.0 - a3) * v0 + a3 * v1, requires_grad=_needs(image, disparity))

    def backward(g):
        if disparity.requires_grad:
            _accumulate(disparity, -np.sum(g * (v1 - v0), axis=-1) * inside)
        if image.requires_grad:
            gi = _scatter_w(g * (1.0 - a3), x0, img.shape) + _scatter_w(g * a3, x1, img.shape)
            _accumulate(image, gi)
    return tape.record(out, backward)


# ---------------------------------------------------------------------------
# Image helpers and crops
# ---------------------------------------------------------------------------

def to_luma_chroma(image: Image) -> np.ndarray:
    """RGB in [0,1] -> (Y, Cb, Cr) planes in [0,1]."""
    y = image @ LUMA_WEIGHTS
    cb = 0.5 + 0.564 * (image[..., 2] - y)
    cr = 0.5 + 0.713 * (image[..., 0] - y)
    return np.clip(np.stack([y, cb, cr], axis=-1), 0.0, 1.0)


def crop_sample(sample: StereoSample, y: int, x: int, size: int) -> StereoSample:
    sl = (slice(y, y + size), slice(x, x + size))
    raw = None
    if sample.raw_cost is not None:
        raw = CostVolume(sample.raw_cost.data[sl], sample.raw_cost.kind)
    return replace(sample, left=sample.left[sl], right=sample.right[sl],
                   gt_disparity=sample.gt_disparity[sl], gt_valid=sample.gt_valid[sl], raw_cost=raw)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=3)
    gains = rng.uniform(0.6, 1.0, size=3)
    noise = gaussian_filter(rng.uniform(-1.0, 1.0, size=(h, w)), sigma=1.0, mode="nearest")
    noise = noise / (noise.std() + 1e-12)
    return np.clip(base + 0.15 * noise[..., None] * gains, 0.0, 1.0)


def synth_scene(seed: int, h: int, w: int, d_max: int, n_layers: int) -> StereoSample:
    """Layered fronto-parallel textured rectangles over a textured background."""
    if h < 16 or w < 16:
        raise ValueError("synth_scene: h and w must be at least 16")
    if not 2 <= d_max <= w // 2:
        raise ValueError("synth_scene: need 2 <= d_max <= w/2")
    rng = stream_rng(seed, DATA_STREAM)
    ext = w + d_max
    bg_d = int(rng.integers(0, max(1, d_max // 2)))
    disparities = [bg_d]
    masks = [np.ones((h, ext), dtype=bool)]
    textures = [_texture(rng, h, ext)]
    for _ in range(n_layers):
        rh = int(rng.integers(h // 4, h // 2 + 1))
        rw = int(rng.integers(w // 4, w // 2 + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        mask = np.zeros((h, ext), dtype=bool)
        mask[y0:y0 + rh, x0:x0 + rw] = True
        disparities.append(int(rng.integers(bg_d, d_max)))
        masks.append(mask)
        textures.append(_texture(rng, h, ext))

    n = len(disparities)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]

    # z-buffer: larger disparity is closer; equal disparity -> later surface wins
    left_key = np.full((h, w), -1)
    right_key = np.full((h, w), -1)
    left_id = np.zeros((h, w), dtype=int)
    right_id = np.zeros((h, w), dtype=int)
    for s, d in enumerate(disparities):
        key = d * (n + 1) + s
        seen_left = masks[s][:, :w] & (key > left_key)
        left_key[seen_left] = key
        left_id[seen_left] = s
        xl = np.broadcast_to(cols + d, (h, w))
        seen_right = masks[s][rows, xl] & (key > right_key)
        right_key[seen_right] = key
        right_id[seen_right] = s

    tex = np.stack(textures)  # n x h x ext x 3
    d_arr = np.asarray(disparities)
    left = tex[left_id, rows, cols]
    right = tex[right_id, rows, cols + d_arr[right_id]]
    gt = d_arr[left_id].astype(np.float64)
    xr = cols - d_arr[left_id]
    in_view = xr >= 0
    valid = in_view & (right_id[rows, np.clip(xr, 0, w - 1)] == left_id)
    return StereoSample(left=left, right=right, gt_disparity=gt, gt_valid=valid,
                        d_max=d_max, name=f"scene_{seed}", seed=seed)


def planar_scene(seed: int, h: int, w: int, d_max: int, disparity: int) -> StereoSample:
    """Single textured fronto-parallel plane at a fixed integer disparity."""
    if not 0 <= disparity < d_max:
        raise ValueError("planar_scene: disparity must lie in [0, d_max)")
    rng = stream_rng(seed, DATA_STREAM)
    tex = _texture(rng, h, w + disparity)
    gt = np.full((h, w), float(disparity))
    valid = np.broadcast_to(np.arange(w) >= disparity, (h, w)).copy()
    return StereoSample(left=tex[:, :w], right=tex[:, disparity:disparity + w], gt_disparity=gt,
                        gt_valid=valid, d_max=d_max, name=f"plane_{disparity}", seed=seed)


def sample_seed(seed: int, index: int) -> int:
    return int(stream_rng(seed, DATA_STREAM, index).integers(0, 2 ** 31 - 1))


def synth_dataset(cfg: SynthConfig, seed: int) -> List[StereoSample]:
    """cfg.count scenes with per-sample seeds; order and content independent of cfg.workers."""
    seeds = [sample_seed(seed, i) for i in range(cfg.count)]

    def make(i_seed):
        i, s = i_seed
        sample = synth_scene(s, cfg.height, cfg.width, cfg.d_max, cfg.n_layers)
        return replace(sample, name=f"scene_{i:04d}")

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            samples = list(pool.map(make, enumerate(seeds)))
    else:
        samples = [make(item) for item in enumerate(seeds)]
    logger.info(f"Generated {len(samples)} synthetic scenes ({cfg.height}x{cfg.width}, d_max={cfg.d_max})")
    return samples
