# map_io.py
"""
On-disk formats: PFM float maps, 8-bit PNG images and masks, KITTI-style 16-bit
disparity PNGs, dataset sample directories, evaluation reports and curve plots.
"""
import csv
import logging
import os
from typing import Dict, List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from dotenv import dotenv_values  # noqa: E402
from PIL import Image  # noqa: E402

from metrics import SparsificationCurve  # noqa: E402
from stereo_data import StereoSample  # noqa: E402

logger = logging.getLogger('MapIO')

REPORT_COLUMNS = ["image", "AUC", "optimal_AUC", "MSE", "BMP1", "BMP3", "BMP1_refined", "BMP3_refined"]
KITTI_SCALE = 256.0


class PfmFormatError(ValueError):
    """Malformed PFM content; offset is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def write_pfm(path: str, data: np.ndarray) -> None:
    """Single-channel little-endian PFM, rows stored top to bottom."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError(f"write_pfm expects an H x W map, got shape {arr.shape}")
    if np.isnan(arr).any():
        raise ValueError(f"write_pfm: refusing to write NaN values to {path}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _header_line(data: bytes, pos: int):
    end = data.find(b"\n", pos)
    if end < 0:
        raise PfmFormatError("truncated PFM header", pos)
    try:
        text = data[pos:end].decode("ascii").strip()
    except UnicodeDecodeError:
        raise PfmFormatError("non-ASCII bytes in PFM header", pos) from None
    return text, end + 1


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, pos = _header_line(data, 0)
    if magic == "PF":
        raise PfmFormatError("colour PFM ('PF') is not supported, expected single-channel 'Pf'", 0)
    if magic != "Pf":
        raise PfmFormatError(f"bad PFM magic {magic!r}", 0)
    dims_at = pos
    dims, pos = _header_line(data, pos)
    try:
        w, h = (int(t) for t in dims.split())
    except ValueError:
        raise PfmFormatError(f"bad PFM dimensions line {dims!r}", dims_at) from None
    if w <= 0 or h <= 0:
        raise PfmFormatError(f"non-positive PFM dimensions {w}x{h}", dims_at)
    scale_at = pos
    scale_txt, pos = _header_line(data, pos)
    try:
        scale = float(scale_txt)
    except ValueError:
        raise PfmFormatError(f"bad PFM scale {scale_txt!r}", scale_at) from None
    if scale > 0:
        raise PfmFormatError("big-endian PFM (positive scale) is not supported; expected a negative scale", scale_at)
    if scale == 0:
        raise PfmFormatError("PFM scale must be non-zero", scale_at)
    expected = w * h * 4
    if len(data) - pos != expected:
        raise PfmFormatError(f"PFM raster has {len(data) - pos} bytes, expected {expected}", pos)
    return np.frombuffer(data, dtype="<f4", offset=pos).reshape(h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def write_png(path: str, image: np.ndarray) -> None:
    """RGB in [0,1] to 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_mask_png(path: str, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def read_mask_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 127


def write_kitti_disparity(path: str, disparity: np.ndarray, valid: np.ndarray) -> None:
    """16-bit PNG, value = disparity * 256, 0 marks invalid pixels.

    Values are clipped to [0, 65535]. The format has no code for a valid
    disparity below 1/512, so such pixels read back as invalid.
    """
    scaled = np.clip(np.round(np.asarray(disparity, dtype=np.float64) * KITTI_SCALE), 0, 65535)
    scaled = np.where(valid, scaled, 0).astype(np.uint16)
    Image.fromarray(scaled).save(path)


def read_kitti_disparity(path: str):
    """(disparity, valid) from a KITTI-style 16-bit PNG."""
    with Image.open(path) as img:
        raw = np.asarray(img).astype(np.float64)
    valid = raw > 0
    return raw / KITTI_SCALE, valid


# ---------------------------------------------------------------------------
# Dataset samples
# ---------------------------------------------------------------------------

def save_sample(directory: str, sample: StereoSample) -> None:
    os.makedirs(directory, exist_ok=True)
    write_png(os.path.join(directory, "left.png"), sample.left)
    write_png(os.path.join(directory, "right.png"), sample.right)
    write_pfm(os.path.join(directory, "disp_gt.pfm"), sample.gt_disparity)
    write_mask_png(os.path.join(directory, "valid.png"), sample.gt_valid)
    with open(os.path.join(directory, "meta.txt"), "w", encoding="utf-8") as f:
        f.write(f"d_max={sample.d_max}\nseed={sample.seed}\n")


def load_sample(directory: str, d_max: Optional[int] = None) -> StereoSample:
    """Read a sample directory; disp_gt.pfm + valid.png, or a KITTI disp_gt.png."""
    meta_path = os.path.join(directory, "meta.txt")
    meta = dotenv_values(meta_path, interpolate=False) if os.path.isfile(meta_path) else {}
    if d_max is None:
        if "d_max" not in meta:
            raise ValueError(f"{directory}: no d_max in meta.txt and none given")
        d_max = int(meta["d_max"])
    left = read_png(os.path.join(directory, "left.png"))
    right = read_png(os.path.join(directory, "right.png"))
    pfm_path = os.path.join(directory, "disp_gt.pfm")
    if os.path.isfile(pfm_path):
        gt = read_pfm(pfm_path).astype(np.float64)
        mask_path = os.path.join(directory, "valid.png")
        valid = read_mask_png(mask_path) if os.path.isfile(mask_path) else np.isfinite(gt)
    else:
        gt, valid = read_kitti_disparity(os.path.join(directory, "disp_gt.png"))
    # pixels beyond the candidate range cannot be matched
    valid = valid & (gt <= d_max - 1)
    return StereoSample(left=left, right=right, gt_disparity=gt, gt_valid=valid, d_max=d_max,
                        name=os.path.basename(os.path.normpath(directory)), seed=int(meta.get("seed", 0) or 0))


def list_sample_dirs(dataset_dir: str) -> List[str]:
    if not os.path.isdir(dataset_dir):
        raise FileNotFoundError(f"Dataset directory not found: {dataset_dir}")
    dirs = [os.path.join(dataset_dir, d) for d in sorted(os.listdir(dataset_dir))]
    return [d for d in dirs if os.path.isfile(os.path.join(d, "left.png"))]


# ---------------------------------------------------------------------------
# Reports and curves
# ---------------------------------------------------------------------------

def _mean_row(rows: Sequence[Dict[str, object]]) -> Dict[str, object]:
    mean: Dict[str, object] = {"image": "mean"}
    for col in REPORT_COLUMNS[1:]:
        values = [r[col] for r in rows if r.get(col) not in (None, "")]
        mean[col] = float(np.mean(values)) if values else ""
    return mean


def write_report(path: str, rows: Sequence[Dict[str, object]]) -> Dict[str, object]:
    """Per-image rows plus a trailing mean row, columns in REPORT_COLUMNS order."""
    if not rows:
        raise ValueError("write_report: at least one image row is required")
    mean = _mean_row(rows)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in list(rows) + [mean]:
            writer.writerow({c: row.get(c, "") for c in REPORT_COLUMNS})
    return mean


def write_curve_csv(path: str, curve: SparsificationCurve, optimal: SparsificationCurve) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["density", "error", "optimal_error"])
        for (d, e), (_, o) in zip(curve.rows(), optimal.rows()):
            writer.writerow([repr(d), repr(e), repr(o)])


def plot_curves(path: str, curve: SparsificationCurve, optimal: SparsificationCurve, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(curve.densities, curve.errors, label="confidence")
    ax.plot(optimal.densities, optimal.errors, "--", label="optimal")
    ax.set_xlabel("density")
    ax.set_ylabel(f"bad pixel rate (>{curve.threshold_px:g}px)")
    ax.invert_xaxis()
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
