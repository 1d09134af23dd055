# agcp_refine.py
"""
Disparity refinement by propagating ground control points (GCPs).

Pixels whose confidence exceeds tau become GCPs. Every pixel is pulled towards
the GCPs of its (2m+1)^2 window through bilateral weights, and towards its
4-neighbours through a bilateral smoothness term. The quadratic energy is
minimised by solving a sparse SPD system with conjugate gradients.
"""
import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, laplacian

from stereo_data import ConfidenceMap

logger = logging.getLogger('AgcpRefine')

EPS_REG = 1e-8
# weights at or below this are cuts when refining
MIN_COUPLING = 1e-6


@dataclass
class AgcpConfig:
    tau: float = 0.7
    gamma: float = 1.0
    radius_m: int = 2
    sigma_color: float = 0.1
    sigma_space: float = 2.0
    cg_tol: float = 1e-8
    cg_max_iter: int = 2000

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("AgcpConfig: gamma must be positive")
        if self.radius_m < 0:
            raise ValueError("AgcpConfig: radius_m must be >= 0")
        if self.sigma_color <= 0 or self.sigma_space <= 0:
            raise ValueError("AgcpConfig: bandwidths must be positive")
        if self.cg_max_iter < 1:
            raise ValueError("AgcpConfig: cg_max_iter must be >= 1")


@dataclass
class AgcpSystem:
    A: sparse.csr_matrix
    b: np.ndarray
    shape: tuple
    gcp: np.ndarray           # H x W bool
    data_diag: np.ndarray     # N, aggregated data weights
    pair_i: np.ndarray        # data-term pairs (pixel, gcp, weight)
    pair_v: np.ndarray
    pair_w: np.ndarray
    edge_i: np.ndarray        # undirected 4-neighbour edges with weight
    edge_j: np.ndarray
    edge_w: np.ndarray
    targets: np.ndarray       # N, GCP disparities (only read where gcp)
    gamma: float


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool


@dataclass
class RefineResult:
    disparity: np.ndarray
    gcp_mask: np.ndarray
    cg: CgResult
    system: AgcpSystem


def _confidence(q: Union[ConfidenceMap, np.ndarray]) -> np.ndarray:
    return np.asarray(q.data if isinstance(q, ConfidenceMap) else q, dtype=np.float64)


def _features(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _kernel(fa: np.ndarray, fb: np.ndarray, dist2: float, cfg: AgcpConfig) -> np.ndarray:
    color2 = np.sum((fa - fb) ** 2, axis=-1)
    return np.exp(-color2 / cfg.sigma_color ** 2 - dist2 / cfg.sigma_space ** 2)


def build_system(d_final: np.ndarray, q: Union[ConfidenceMap, np.ndarray], img: np.ndarray,
                 cfg: AgcpConfig) -> AgcpSystem:
    """Assemble A x = b for the aggregated-data-term energy; A = diag(data) + gamma*L_w + eps*I."""
    d_final = np.asarray(d_final, dtype=np.float64)
    conf = _confidence(q)
    feats = _features(img)
    if conf.shape != d_final.shape or feats.shape[:2] != d_final.shape:
        raise ValueError(f"build_system: shape mismatch {d_final.shape}, {conf.shape}, {feats.shape[:2]}")
    h, w = d_final.shape
    n = h * w
    idx = np.arange(n).reshape(h, w)
    gcp = conf > cfg.tau
    targets = d_final.ravel()

    pi, pv, pw = [], [], []
    m = cfg.radius_m
    for dy in range(-m, m + 1):
        for dx in range(-m, m + 1):
            ys, ye = max(0, -dy), min(h, h - dy)
            xs, xe = max(0, -dx), min(w, w - dx)
            if ys >= ye or xs >= xe:
                continue
            here = (slice(ys, ye), slice(xs, xe))
            there = (slice(ys + dy, ye + dy), slice(xs + dx, xe + dx))
            keep = gcp[there]
            if not keep.any():
                continue
            c = _kernel(feats[here], feats[there], dy * dy + dx * dx, cfg)
            pi.append(idx[here][keep])
            pv.append(idx[there][keep])
            pw.append(c[keep])
    pair_i = np.concatenate(pi) if pi else np.zeros(0, dtype=int)
    pair_v = np.concatenate(pv) if pv else np.zeros(0, dtype=int)
    pair_w = np.concatenate(pw) if pw else np.zeros(0)
    data_diag = np.bincount(pair_i, weights=pair_w, minlength=n)
    b = np.bincount(pair_i, weights=pair_w * targets[pair_v], minlength=n)

    right = _kernel(feats[:, :-1], feats[:, 1:], 1.0, cfg)
    down = _kernel(feats[:-1, :], feats[1:, :], 1.0, cfg)
    edge_i = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    edge_j = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    edge_w = np.concatenate([right.ravel(), down.ravel()])

    adjacency = sparse.coo_matrix((np.concatenate([edge_w, edge_w]),
                                   (np.concatenate([edge_i, edge_j]), np.concatenate([edge_j, edge_i]))),
                                  shape=(n, n)).tocsr()
    A = (sparse.diags(data_diag + EPS_REG) + cfg.gamma * laplacian(adjacency)).tocsr()
    logger.debug(f"AGCP system: {n} unknowns, {int(gcp.sum())} GCPs, {pair_i.size} data pairs")
    return AgcpSystem(A, b, (h, w), gcp, data_diag, pair_i, pair_v, pair_w, edge_i, edge_j, edge_w,
                      targets, cfg.gamma)


def cg_solve(A, b: np.ndarray, tol: float = 1e-8, max_iter: int = 2000) -> CgResult:
    """Conjugate gradients from x0 = 0; stops when ||Ax - b|| <= tol * max(1, ||b||)."""
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    target = tol * max(1.0, float(np.linalg.norm(b)))
    best_x, best_res = x.copy(), np.sqrt(rs)
    if best_res <= target:
        return CgResult(x, 0, best_res, True)
    for it in range(1, max_iter + 1):
        ap = A @ p
        alpha = rs / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        res = np.sqrt(rs_new)
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= target:
            return CgResult(x, it, res, True)
        p = r + (rs_new / rs) * p
        rs = rs_new
    logger.warning(f"CG did not converge in {max_iter} iterations (residual {best_res:.3e}, target {target:.3e})")
    return CgResult(best_x, max_iter, best_res, False)


def energy(x: np.ndarray, system: AgcpSystem) -> float:
    """Aggregated data term plus gamma-weighted smoothness, evaluated directly."""
    x = np.asarray(x, dtype=np.float64).ravel()
    data = np.sum(system.pair_w * (x[system.pair_i] - system.targets[system.pair_v]) ** 2)
    smooth = np.sum(system.edge_w * (x[system.edge_i] - x[system.edge_j]) ** 2)
    return float(data + system.gamma * smooth)


def _anchored_pixels(system: AgcpSystem) -> np.ndarray:
    """Pixels whose component (over couplings above MIN_COUPLING) holds a data term above MIN_COUPLING."""
    n = system.b.size
    strong = system.gamma * system.edge_w > MIN_COUPLING
    graph = sparse.coo_matrix((np.ones(int(strong.sum())), (system.edge_i[strong], system.edge_j[strong])),
                              shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    supported = np.bincount(system.pair_i[system.pair_w > MIN_COUPLING], minlength=n) > 0
    anchored = np.zeros(labels.max() + 1, dtype=bool)
    anchored[labels[supported]] = True
    return anchored[labels]


def _reduced_system(system: AgcpSystem, keep: np.ndarray):
    """Data and smoothness terms above MIN_COUPLING, restricted to the kept pixels, without eps."""
    n = system.b.size
    data = system.pair_w > MIN_COUPLING
    pair_i, pair_w = system.pair_i[data], system.pair_w[data]
    diag = np.bincount(pair_i, weights=pair_w, minlength=n)
    b = np.bincount(pair_i, weights=pair_w * system.targets[system.pair_v[data]], minlength=n)
    strong = system.gamma * system.edge_w > MIN_COUPLING
    ei, ej, ew = system.edge_i[strong], system.edge_j[strong], system.gamma * system.edge_w[strong]
    adjacency = sparse.coo_matrix((np.concatenate([ew, ew]), (np.concatenate([ei, ej]), np.concatenate([ej, ei]))),
                                  shape=(n, n)).tocsr()
    A = (sparse.diags(diag) + laplacian(adjacency)).tocsr()
    sel = np.flatnonzero(keep)
    return A[sel][:, sel], b[sel], sel


def refine(d_final: np.ndarray, q: Union[ConfidenceMap, np.ndarray], img: np.ndarray,
           cfg: AgcpConfig) -> RefineResult:
    """
    Solve for the propagated disparity.

    Couplings at or below MIN_COUPLING are treated as cuts. Components left
    without GCP support keep d_final; the rest are solved without the eps term,
    so every refined value is a convex combination of GCP disparities.
    """
    system = build_system(d_final, q, img, cfg)
    d_final = np.asarray(d_final, dtype=np.float64).ravel()
    anchored = _anchored_pixels(system)
    out = d_final.copy()
    if anchored.any():
        A, b, sel = _reduced_system(system, anchored)
        result = cg_solve(A, b, cfg.cg_tol, cfg.cg_max_iter)
        out[sel] = result.x
    else:
        result = CgResult(np.zeros(0), 0, 0.0, True)
    logger.info(f"AGCP: {int(system.gcp.sum())} GCPs, CG {result.iterations} iterations, "
                f"residual {result.residual_norm:.2e}, {int((~anchored).sum())} pixels kept from the input")
    return RefineResult(out.reshape(system.shape), system.gcp, result, system)
