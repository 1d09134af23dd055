# metrics.py
"""
Confidence and disparity quality measures: sparsification curves and their
area, the ground-truth lower bound, confidence MSE and bad-matching percentage.
"""
import logging
from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np

from stereo_data import ConfidenceMap

logger = logging.getLogger('Metrics')

ConfidenceLike = Union[ConfidenceMap, np.ndarray]


@dataclass
class EvalConfig:
    threshold_px: float = 1.0
    n_points: int = 100
    confidence: str = "learned"  # or "ground_truth"
    rho: float = 0.9

    def __post_init__(self):
        if self.threshold_px <= 0:
            raise ValueError("EvalConfig: threshold_px must be positive")
        if self.n_points < 2:
            raise ValueError("EvalConfig: n_points must be >= 2")
        if self.confidence not in ("learned", "ground_truth"):
            raise ValueError("EvalConfig: confidence must be 'learned' or 'ground_truth'")


@dataclass
class SparsificationCurve:
    densities: np.ndarray  # strictly decreasing from 1.0
    errors: np.ndarray     # bad-pixel rate of the kept subset
    threshold_px: float

    def rows(self) -> List[Tuple[float, float]]:
        return [(float(d), float(e)) for d, e in zip(self.densities, self.errors)]


def _values(q: ConfidenceLike) -> np.ndarray:
    return np.asarray(q.data if isinstance(q, ConfidenceMap) else q, dtype=np.float64)


def bad_pixels(d: np.ndarray, d_gt: np.ndarray, threshold_px: float) -> np.ndarray:
    return np.abs(np.asarray(d, dtype=np.float64) - d_gt) > threshold_px


def _valid_count(valid: np.ndarray) -> int:
    n = int(np.count_nonzero(valid))
    if n == 0:
        raise ValueError("no valid pixels to evaluate")
    return n


def sparsification(q: ConfidenceLike, d: np.ndarray, d_gt: np.ndarray, valid: np.ndarray,
                   threshold_px: float = 1.0, n_points: int = 100) -> SparsificationCurve:
    """Bad-pixel rate among the most confident valid pixels at densities 1, 1-1/n, ..., 1/n.

    A cut through a group of equal confidences counts the group's bad pixels
    pro rata, so constant confidence gives the overall bad rate at every density.
    This departs from keeping exactly the ceil(density * n) most confident pixels
    with ties broken by index: the two agree only when no cut falls inside a tie
    group. The pro-rata value is the expected error over all orderings of the
    group, so the curve does not depend on pixel order.
    """
    if n_points < 2:
        raise ValueError("sparsification: n_points must be >= 2")
    valid = np.asarray(valid, dtype=bool)
    n = _valid_count(valid)
    conf = _values(q)[valid]
    bad = bad_pixels(d, d_gt, threshold_px)[valid]
    order = np.lexsort((np.arange(n), -conf))
    ranked = conf[order]
    cum_bad = np.concatenate([[0.0], np.cumsum(bad[order])])
    new_group = np.r_[True, ranked[1:] != ranked[:-1]]
    group_start = np.flatnonzero(new_group)
    group_end = np.r_[group_start[1:], n]
    j = np.arange(n_points)
    kept = ((n_points - j) * n + n_points - 1) // n_points
    g = np.cumsum(new_group)[kept - 1] - 1
    lo, hi = group_start[g], group_end[g]
    bad_kept = cum_bad[lo] + (kept - lo) * (cum_bad[hi] - cum_bad[lo]) / (hi - lo)
    errors = bad_kept / kept
    densities = 1.0 - j / n_points
    return SparsificationCurve(densities, errors, threshold_px)


def auc(curve: SparsificationCurve) -> float:
    """Trapezoidal area under error-vs-density, divided by the density span."""
    dens, err = curve.densities, curve.errors
    span = dens[0] - dens[-1]
    area = np.sum(0.5 * (err[:-1] + err[1:]) * (dens[:-1] - dens[1:]))
    return float(area / span)


def optimal_curve(d: np.ndarray, d_gt: np.ndarray, valid: np.ndarray, threshold_px: float = 1.0,
                  n_points: int = 100) -> SparsificationCurve:
    q = 1.0 - bad_pixels(d, d_gt, threshold_px)
    return sparsification(q, d, d_gt, valid, threshold_px, n_points)


def optimal_auc(d: np.ndarray, d_gt: np.ndarray, valid: np.ndarray, threshold_px: float = 1.0,
                n_points: int = 100) -> float:
    return auc(optimal_curve(d, d_gt, valid, threshold_px, n_points))


def constant_auc(d: np.ndarray, d_gt: np.ndarray, valid: np.ndarray, threshold_px: float = 1.0,
                 n_points: int = 100) -> float:
    """AUC of an uninformative confidence; equals the overall bad rate."""
    return auc(sparsification(np.ones(np.shape(d)), d, d_gt, valid, threshold_px, n_points))


def mse_confidence(q: ConfidenceLike, q_star: ConfidenceLike, valid: np.ndarray) -> float:
    valid = np.asarray(valid, dtype=bool)
    qv, sv = _values(q), _values(q_star)
    if qv.shape != sv.shape or qv.shape != valid.shape:
        raise ValueError("mse_confidence: shape mismatch")
    _valid_count(valid)
    return float(np.mean((qv[valid] - sv[valid]) ** 2))


def bmp(d: np.ndarray, d_gt: np.ndarray, valid: np.ndarray, threshold_px: float) -> float:
    """Percentage of valid pixels whose error exceeds threshold_px."""
    if threshold_px <= 0:
        raise ValueError("bmp: threshold_px must be positive")
    valid = np.asarray(valid, dtype=bool)
    n = _valid_count(valid)
    return 100.0 * np.count_nonzero(bad_pixels(d, d_gt, threshold_px)[valid]) / n
