# training.py
"""
Losses and the adversarial training loop.

Each step first updates the confidence network F on detached generator outputs,
then updates the generator G on the disparity loss plus the non-saturating
adversarial term, whose gradient reaches G only through negative pixels.
"""
import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from discriminator import DiscriminatorConfig, confidence_pass, init_discriminator
from generator import GeneratorConfig, generator_pass, init_generator
from metrics import auc, bmp, constant_auc, optimal_auc, sparsification
from nn_core import (ParamStore, Tape, Var, _accumulate, add, detach, gate_gradient, scale,
                     sgd_momentum_step)
from seeding import SHUFFLE_STREAM, stream_rng
from stereo_data import (ConfidenceKind, ConfidenceMap, CostConfig, CostVolume, StereoSample, bilinear_warp,
                         crop_sample, ground_truth_confidence, raw_cost_pipeline, to_luma_chroma, warp_op,
                         wta_disparity)

logger = logging.getLogger('Training')

CONF_EPS = 1e-7
STATS_NAME = "stats.csv"
EPOCH_METRICS_NAME = "epoch_metrics.csv"
LATEST_NAME = "latest.txt"


class NonFiniteLossError(RuntimeError):
    """A loss turned NaN/inf; the affected update was not applied."""

    def __init__(self, message: str, diagnostic: Dict[str, float]):
        super().__init__(f"{message}: {diagnostic}")
        self.diagnostic = diagnostic


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch: int = 20
    momentum: float = 0.9
    lam: float = 1.0
    rho: float = 0.9
    recon_weight: float = 1.0
    gate_recon: bool = False
    warmup_epochs: int = 5
    epochs: int = 20
    crop: int = 64
    seed: int = 0
    resume: bool = False
    validation_count: int = 0
    cost_workers: int = 1
    cost: CostConfig = field(default_factory=CostConfig)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("TrainConfig: lr must be >= 0")
        if self.lam < 0:
            raise ValueError("TrainConfig: lambda must be >= 0")
        if self.crop <= 0 or self.crop % 4:
            raise ValueError("TrainConfig: crop must be a positive multiple of 4")
        if self.batch < 1:
            raise ValueError("TrainConfig: batch must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("TrainConfig: momentum must be in [0, 1)")
        if self.rho <= 0:
            raise ValueError("TrainConfig: rho must be positive")


@dataclass
class StepStats:
    loss_disp: float
    loss_conf_F: float
    loss_adv_G: float
    pos_fraction: float
    epoch: int
    step: int
    loss_sup: float = 0.0
    loss_recon: float = 0.0


STATS_COLUMNS = ["epoch", "step", "loss_disp", "loss_conf_F", "loss_adv_G", "pos_fraction",
                 "loss_sup", "loss_recon"]


@dataclass
class DispLoss:
    total: Var
    supervised: float
    recon: float
    has_valid: bool


@dataclass
class TrainResult:
    g_params: ParamStore
    f_params: ParamStore
    stats: List[StepStats]


# ---------------------------------------------------------------------------
# Loss primitives
# ---------------------------------------------------------------------------

def weighted_l1(tape: Tape, x: Var, target: np.ndarray, weights: np.ndarray, denom: float) -> Var:
    """sum(weights * |x - target|) / denom; zero when denom is zero."""
    diff = x.value - target
    w = np.broadcast_to(weights, diff.shape)
    tape.note(np.sign(diff))
    value = np.sum(w * np.abs(diff)) / denom if denom > 0 else 0.0
    out = Var(np.asarray(value, dtype=np.float64), requires_grad=x.requires_grad and denom > 0)
    return tape.record(out, lambda g: _accumulate(x, g * w * np.sign(diff) / denom))


def log_likelihood(tape: Tape, q: Var, pos: np.ndarray, neg: np.ndarray) -> Var:
    """-mean_pos log q - mean_neg log(1 - q) with q clamped to [eps, 1-eps]; empty sets add 0."""
    qv = q.value.astype(np.float64)
    qc = np.clip(qv, CONF_EPS, 1.0 - CONF_EPS)
    inside = (qv > CONF_EPS) & (qv < 1.0 - CONF_EPS)
    tape.note(inside)
    n_pos, n_neg = int(np.count_nonzero(pos)), int(np.count_nonzero(neg))
    value = 0.0
    grad = np.zeros_like(qc)
    if n_pos:
        value -= np.sum(np.log(qc[pos])) / n_pos
        grad -= pos / (n_pos * qc)
    if n_neg:
        value -= np.sum(np.log1p(-qc[neg])) / n_neg
        grad += neg / (n_neg * (1.0 - qc))
    out = Var(np.asarray(value), requires_grad=q.requires_grad and (n_pos + n_neg) > 0)
    return tape.record(out, lambda g: _accumulate(q, g * grad * inside))


def loss_disp_op(tape: Tape, d_pred: Var, d_gt: np.ndarray, valid: np.ndarray, left: np.ndarray,
                 right: np.ndarray, recon_weight: float, gate: Optional[np.ndarray] = None) -> DispLoss:
    """Mean L1 on valid pixels plus recon_weight * mean |warp(right, d) - left|."""
    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        logger.warning("loss_disp: batch has no valid ground-truth pixels, supervised term is 0")
    sup = weighted_l1(tape, d_pred, d_gt, valid, n_valid)
    if not np.all(np.isfinite(d_pred.value)):
        # warping needs finite coordinates
        return DispLoss(Var(np.asarray(np.nan)), float(sup.value), float("nan"), n_valid > 0)
    recon_w = np.ones(left.shape[:-1] + (1,)) if gate is None else np.asarray(gate)[..., None]
    if recon_weight > 0:
        warped = warp_op(tape, Var(right), d_pred)
        rec = weighted_l1(tape, warped, left, recon_w, left.size)
        total = add(tape, sup, scale(tape, rec, recon_weight))
        recon = float(rec.value)
    else:
        total = sup
        recon = float(np.sum(recon_w * np.abs(bilinear_warp(right, d_pred.value) - left)) / left.size)
    return DispLoss(total, float(sup.value), recon, n_valid > 0)


def _conf_values(q) -> np.ndarray:
    return np.asarray(q.data if isinstance(q, ConfidenceMap) else q, dtype=np.float64)


def _pos_neg(q_star, valid) -> Tuple[np.ndarray, np.ndarray]:
    valid = np.asarray(valid, dtype=bool)
    pos = (_conf_values(q_star) > 0.5) & valid
    return pos, valid & ~pos


def loss_disp(d_pred: np.ndarray, sample: StereoSample, recon_weight: float) -> float:
    out = loss_disp_op(Tape(), Var(np.asarray(d_pred, dtype=np.float64)), sample.gt_disparity,
                       sample.gt_valid, sample.left, sample.right, recon_weight)
    return float(out.total.value)


def loss_conf_f(q, q_star, valid) -> float:
    pos, neg = _pos_neg(q_star, valid)
    return float(log_likelihood(Tape(), Var(_conf_values(q)), pos, neg).value)


def loss_adv_g(q_on_negatives, q_star, valid) -> float:
    """-mean log q over valid negatives: G is rewarded when F trusts its wrong pixels."""
    _, neg = _pos_neg(q_star, valid)
    return float(log_likelihood(Tape(), Var(_conf_values(q_on_negatives)), neg, np.zeros_like(neg)).value)


# ---------------------------------------------------------------------------
# One step
# ---------------------------------------------------------------------------

@dataclass
class BatchArrays:
    raw: np.ndarray
    left: np.ndarray
    right: np.ndarray
    color: np.ndarray
    gt: np.ndarray
    valid: np.ndarray
    d_max: int


def stack_batch(batch: Sequence[StereoSample], cost_cfg: CostConfig, dtype) -> BatchArrays:
    if not batch:
        raise ValueError("train_step: empty batch")
    raw = np.stack([raw_cost_pipeline(s, cost_cfg).data for s in batch]).astype(dtype)
    left = np.stack([s.left for s in batch]).astype(np.float64)
    return BatchArrays(
        raw=raw, left=left, right=np.stack([s.right for s in batch]).astype(np.float64),
        color=to_luma_chroma(left).astype(dtype), gt=np.stack([s.gt_disparity for s in batch]),
        valid=np.stack([s.gt_valid for s in batch]), d_max=batch[0].d_max,
    )


def _check_finite(phase: str, epoch: int, step: int, **losses: float) -> None:
    if not all(np.isfinite(v) for v in losses.values()):
        diagnostic = {"phase": phase, "epoch": epoch, "step": step, **losses}
        logger.error(f"Non-finite loss in {phase} phase: {diagnostic}")
        raise NonFiniteLossError(f"non-finite loss in {phase} phase", diagnostic)


def train_step(batch: Sequence[StereoSample], g_params: ParamStore, f_params: ParamStore, cfg: TrainConfig,
               gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, epoch: int = 1, step: int = 1,
               warmup: bool = False) -> StepStats:
    arrays = stack_batch(batch, cfg.cost, g_params.dtype)
    lam = 0.0 if warmup else cfg.lam
    recon_weight = 0.0 if warmup else cfg.recon_weight

    tape_g = Tape()
    g_out = generator_pass(tape_g, Var(arrays.raw), g_params, gen_cfg, mode="train")
    d_est = g_out.disparity.value
    # Q* follows the current estimate, so it is recomputed every step
    q_star = ground_truth_confidence(d_est, arrays.gt, arrays.valid, cfg.rho)
    pos, neg = _pos_neg(q_star, arrays.valid)
    color = Var(arrays.color)
    disp = loss_disp_op(tape_g, g_out.disparity, arrays.gt, arrays.valid, arrays.left, arrays.right,
                        recon_weight, gate=q_star.data if cfg.gate_recon else None)

    # F-phase: generator outputs are constants here
    tape_f = Tape()
    f_out = confidence_pass(tape_f, detach(g_out.topk), detach(g_out.disparity), color, f_params, disc_cfg,
                            arrays.d_max, mode="train")
    loss_f = log_likelihood(tape_f, f_out.confidence, pos, neg)
    _check_finite("F", epoch, step, loss_conf_F=float(loss_f.value), loss_disp=disp.total.value.item())
    tape_f.backward(loss_f)
    sgd_momentum_step(f_params, cfg.lr, cfg.momentum)

    # G-phase: fresh F forward, F frozen, adversarial gradient only through negatives
    no_neg = np.zeros_like(neg)
    if lam > 0:
        topk_in = gate_gradient(tape_g, g_out.topk, neg[..., None])
        disp_in = gate_gradient(tape_g, g_out.disparity, neg)
        with f_params.frozen():
            q_g = confidence_pass(tape_g, topk_in, disp_in, color, f_params, disc_cfg, arrays.d_max, mode="train")
        adv = log_likelihood(tape_g, q_g.confidence, neg, no_neg)
        total = add(tape_g, disp.total, scale(tape_g, adv, lam))
    else:
        with f_params.frozen():
            q_g = confidence_pass(Tape(), detach(g_out.topk), detach(g_out.disparity), color, f_params,
                                  disc_cfg, arrays.d_max, mode="train")
        adv = log_likelihood(Tape(), q_g.confidence, neg, no_neg)
        total = disp.total
    _check_finite("G", epoch, step, loss_disp=disp.total.value.item(), loss_adv_G=float(adv.value))
    tape_g.backward(total)
    sgd_momentum_step(g_params, cfg.lr, cfg.momentum)

    n_valid = int(np.count_nonzero(arrays.valid))
    return StepStats(
        loss_disp=disp.total.value.item(), loss_conf_F=float(loss_f.value), loss_adv_G=float(adv.value),
        pos_fraction=float(np.count_nonzero(pos)) / n_valid if n_valid else 0.0,
        epoch=epoch, step=step, loss_sup=disp.supervised, loss_recon=disp.recon,
    )


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    raw_cost: CostVolume
    d_wta: np.ndarray
    disparity: np.ndarray
    confidence: ConfidenceMap
    fusion_weights: Optional[np.ndarray] = None


def _pad4(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    pad = [(0, (-h) % 4), (0, (-w) % 4)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, mode="edge")


def predict(sample: StereoSample, g_params: ParamStore, f_params: ParamStore, gen_cfg: GeneratorConfig,
            disc_cfg: DiscriminatorConfig, cost_cfg: CostConfig) -> Prediction:
    """Eval-mode forward of both networks; sizes not divisible by 4 are edge-padded and cropped back."""
    raw = raw_cost_pipeline(sample, cost_cfg)
    h, w = sample.shape
    dt = g_params.dtype
    tape = Tape()
    color = Var(to_luma_chroma(_pad4(sample.left).astype(np.float64)).astype(dt)[None])
    with g_params.frozen(), f_params.frozen():
        g_out = generator_pass(tape, Var(_pad4(raw.data).astype(dt)[None]), g_params, gen_cfg, mode="eval")
        f_out = confidence_pass(tape, g_out.topk, g_out.disparity, color, f_params, disc_cfg, sample.d_max,
                                mode="eval")
    weights = None if f_out.weights is None else f_out.weights.value[0, :h, :w].astype(np.float64)
    return Prediction(
        raw_cost=raw, d_wta=wta_disparity(raw),
        disparity=g_out.disparity.value[0, :h, :w].astype(np.float64),
        confidence=ConfidenceMap(f_out.confidence.value[0, :h, :w].astype(np.float64), ConfidenceKind.ESTIMATED),
        fusion_weights=weights,
    )


# ---------------------------------------------------------------------------
# Loop, checkpoints, logs
# ---------------------------------------------------------------------------

def precompute_costs(samples: Sequence[StereoSample], cost_cfg: CostConfig, workers: int = 1) -> List[StereoSample]:
    """Attach the census+SGM volume to every sample; results keep dataset order."""
    def attach(s: StereoSample) -> StereoSample:
        return replace(s, raw_cost=raw_cost_pipeline(s, cost_cfg))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(attach, samples))
    return [attach(s) for s in samples]


def epoch_dir(checkpoint_dir: str, epoch: int) -> str:
    return os.path.join(checkpoint_dir, f"epoch_{epoch:04d}")


def save_checkpoint(checkpoint_dir: str, epoch: int, g_params: ParamStore, f_params: ParamStore) -> str:
    path = epoch_dir(checkpoint_dir, epoch)
    os.makedirs(path, exist_ok=True)
    g_params.save(os.path.join(path, "g"))
    f_params.save(os.path.join(path, "f"))
    with open(os.path.join(checkpoint_dir, LATEST_NAME), "w", encoding="utf-8") as f:
        f.write(f"{epoch}\n")
    return path


def latest_epoch(checkpoint_dir: str) -> Optional[int]:
    path = os.path.join(checkpoint_dir, LATEST_NAME)
    if not os.path.isfile(path):
        return None
    with open(path, "r", encoding="utf-8") as f:
        return int(f.read().strip())


def load_checkpoint(checkpoint_dir: str, epoch: Optional[int] = None) -> Tuple[int, ParamStore, ParamStore]:
    if epoch is None:
        epoch = latest_epoch(checkpoint_dir)
        if epoch is None:
            raise FileNotFoundError(f"No checkpoint found in {checkpoint_dir}")
    path = epoch_dir(checkpoint_dir, epoch)
    return epoch, ParamStore.load(os.path.join(path, "g")), ParamStore.load(os.path.join(path, "f"))


def read_stats(path: str) -> List[StepStats]:
    if not os.path.isfile(path):
        return []
    kinds = {f.name: f.type for f in fields(StepStats)}
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [StepStats(**{k: (int(v) if kinds[k] in (int, "int") else float(v)) for k, v in row.items()})
                for row in csv.DictReader(f)]


def write_stats(path: str, stats: Sequence[StepStats], append: bool = False) -> None:
    new_file = not append or not os.path.isfile(path)
    with open(path, "a" if append else "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=STATS_COLUMNS)
        if new_file:
            writer.writeheader()
        for s in stats:
            row = asdict(s)
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in STATS_COLUMNS})


VALIDATION_COLUMNS = ["epoch", "bmp1", "bmp1_wta", "auc", "auc_constant", "auc_optimal"]


def validation_metrics(samples: Sequence[StereoSample], g_params: ParamStore, f_params: ParamStore,
                       gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, cost_cfg: CostConfig,
                       threshold_px: float = 1.0) -> Dict[str, float]:
    """Mean held-out metrics for the current networks."""
    rows = []
    for s in samples:
        pred = predict(s, g_params, f_params, gen_cfg, disc_cfg, cost_cfg)
        d, gt, valid = pred.disparity, s.gt_disparity, s.gt_valid
        rows.append({
            "bmp1": bmp(d, gt, valid, threshold_px),
            "bmp1_wta": bmp(pred.d_wta, gt, valid, threshold_px),
            "auc": auc(sparsification(pred.confidence, d, gt, valid, threshold_px)),
            "auc_constant": constant_auc(d, gt, valid, threshold_px),
            "auc_optimal": optimal_auc(d, gt, valid, threshold_px),
        })
    return {k: float(np.mean([r[k] for r in rows])) for k in VALIDATION_COLUMNS[1:]}


def _append_validation(path: str, epoch: int, values: Dict[str, float]) -> None:
    new_file = not os.path.isfile(path)
    with open(path, "a", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=VALIDATION_COLUMNS)
        if new_file:
            writer.writeheader()
        writer.writerow({"epoch": epoch, **{k: repr(v) for k, v in values.items()}})


def _epoch_crops(samples: Sequence[StereoSample], crop: int, seed: int, epoch: int) -> List[StereoSample]:
    rng = stream_rng(seed, SHUFFLE_STREAM, epoch)
    crops = []
    for i in rng.permutation(len(samples)):
        s = samples[i]
        h, w = s.shape
        y = int(rng.integers(0, h - crop + 1))
        x = int(rng.integers(0, w - crop + 1))
        crops.append(crop_sample(s, y, x, crop))
    return crops


def train_loop(dataset: Sequence[StereoSample], cfg: TrainConfig, checkpoint_dir: str,
               gen_cfg: Optional[GeneratorConfig] = None, disc_cfg: Optional[DiscriminatorConfig] = None,
               validation: Sequence[StereoSample] = ()) -> TrainResult:
    if not dataset:
        raise ValueError("train_loop: dataset is empty")
    d_max = dataset[0].d_max
    if any(s.d_max != d_max for s in dataset):
        raise ValueError("train_loop: all samples must share d_max")
    if any(min(s.shape) < cfg.crop for s in dataset):
        raise ValueError(f"train_loop: crop {cfg.crop} exceeds the size of some samples")
    gen_cfg = gen_cfg or GeneratorConfig(d_max=d_max)
    disc_cfg = disc_cfg or DiscriminatorConfig()
    if gen_cfg.d_max != d_max:
        raise ValueError(f"generator d_max {gen_cfg.d_max} does not match dataset d_max {d_max}")

    os.makedirs(checkpoint_dir, exist_ok=True)
    stats_path = os.path.join(checkpoint_dir, STATS_NAME)
    metrics_path = os.path.join(checkpoint_dir, EPOCH_METRICS_NAME)
    start = latest_epoch(checkpoint_dir) if cfg.resume else None
    if start is not None:
        start, g_params, f_params = load_checkpoint(checkpoint_dir, start)
        history = [s for s in read_stats(stats_path) if s.epoch <= start]
        write_stats(stats_path, history)
        logger.info(f"Resuming from epoch {start} in {checkpoint_dir}")
    else:
        start = 0
        g_params = init_generator(gen_cfg, cfg.seed)
        f_params = init_discriminator(disc_cfg, gen_cfg.k, cfg.seed)
        history = []
        write_stats(stats_path, [])
        if os.path.isfile(metrics_path):
            os.remove(metrics_path)

    samples = precompute_costs(dataset, cfg.cost, cfg.cost_workers)
    held_out = precompute_costs(validation, cfg.cost, cfg.cost_workers) if validation else []
    logger.info(f"Training on {len(samples)} samples, epochs {start + 1}..{cfg.epochs} "
                f"(warmup {cfg.warmup_epochs}), batch {cfg.batch}, crop {cfg.crop}")

    for epoch in range(start + 1, cfg.epochs + 1):
        warmup = epoch <= cfg.warmup_epochs
        crops = _epoch_crops(samples, cfg.crop, cfg.seed, epoch)
        epoch_stats = []
        for step, lo in enumerate(range(0, len(crops), cfg.batch), start=1):
            epoch_stats.append(train_step(crops[lo:lo + cfg.batch], g_params, f_params, cfg, gen_cfg, disc_cfg,
                                          epoch=epoch, step=step, warmup=warmup))
        write_stats(stats_path, epoch_stats, append=True)
        save_checkpoint(checkpoint_dir, epoch, g_params, f_params)
        history.extend(epoch_stats)
        logger.info(f"Epoch {epoch}{' (warmup)' if warmup else ''}: "
                    f"loss_disp={np.mean([s.loss_disp for s in epoch_stats]):.4f} "
                    f"loss_sup={np.mean([s.loss_sup for s in epoch_stats]):.4f} "
                    f"loss_conf_F={np.mean([s.loss_conf_F for s in epoch_stats]):.4f} "
                    f"loss_adv_G={np.mean([s.loss_adv_G for s in epoch_stats]):.4f}")
        if held_out:
            values = validation_metrics(held_out, g_params, f_params, gen_cfg, disc_cfg, cfg.cost)
            _append_validation(metrics_path, epoch, values)
            logger.info(f"Epoch {epoch} validation: {values}")

    return TrainResult(g_params, f_params, history)
