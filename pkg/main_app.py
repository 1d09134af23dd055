# main_app.py
"""
Command-line entry point.

    python main_app.py synth|train|infer|refine|eval|gradcheck [--config FILE] [--set KEY=VALUE ...]
                       [--out DIR] [--seed N] [--debug]

Every run writes run.log and effective_config.txt into its output directory.
An INCOMPLETE marker sits in that directory until the command finishes cleanly.
"""
import argparse
import csv
import logging
import os
import sys
import traceback
from typing import Callable, Dict, List, Optional

import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

import map_io
from agcp_refine import refine
from gradcheck import run_suite
from metrics import auc, bad_pixels, bmp, mse_confidence, optimal_curve, sparsification
from run_config import ConfigError, RunConfig
from stereo_data import ground_truth_confidence, raw_cost_pipeline, synth_dataset, wta_disparity
from training import NonFiniteLossError, load_checkpoint, predict, train_loop

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE_NAME = "run.log"
INCOMPLETE_MARKER = "INCOMPLETE"
REPORT_NAME = "metrics.csv"
GRADCHECK_REPORT_NAME = "gradcheck.csv"

console = Console()
logger = logging.getLogger('MainApp')
print_debug = False


def setup_logging(out_dir: str, debug: bool = False) -> str:
    """File log with the plain format plus a rich console handler."""
    log_path = os.path.join(out_dir, LOG_FILE_NAME)
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    file_handler = logging.FileHandler(log_path, mode='a', encoding='utf-8')
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(file_handler)
    root.addHandler(RichHandler(console=console, show_path=False, markup=False))
    root.setLevel(logging.DEBUG if debug else logging.INFO)
    for noisy in ("matplotlib", "PIL"):
        logging.getLogger(noisy).setLevel(logging.WARNING)
    return log_path


def dprint(message: str):
    if print_debug:
        logger.debug(message)


def log_info(message: str):
    logger.info(message)


def log_error(message: str):
    logger.error(message)


# #############################################################################
# Commands
# #############################################################################

def _load_dataset(cfg: RunConfig):
    dirs = map_io.list_sample_dirs(cfg["dataset_dir"])
    if not dirs:
        raise ValueError(f"No samples found in {cfg['dataset_dir']}")
    return [map_io.load_sample(d) for d in dirs]


def _prediction_path(cfg: RunConfig, sample_name: str, filename: str) -> str:
    return os.path.join(cfg.prediction_dir, sample_name, filename)


def cmd_synth(cfg: RunConfig) -> int:
    samples = synth_dataset(cfg.synth_config(), cfg["seed"])
    for s in samples:
        map_io.save_sample(os.path.join(cfg["dataset_dir"], s.name), s)
    log_info(f"Wrote {len(samples)} samples to {cfg['dataset_dir']}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    samples = _load_dataset(cfg)
    tc = cfg.train_config()
    n_val = tc.validation_count
    if n_val >= len(samples):
        raise ConfigError(f"train_validation_count={n_val} leaves no training samples")
    train_set, held_out = (samples[:-n_val], samples[-n_val:]) if n_val else (samples, [])
    result = train_loop(train_set, tc, cfg.checkpoint_dir, cfg.generator_config(samples[0].d_max),
                        cfg.discriminator_config(), validation=held_out)
    if result.stats:
        last = [s for s in result.stats if s.epoch == result.stats[-1].epoch]
        log_info(f"Final epoch {last[0].epoch}: loss_disp={np.mean([s.loss_disp for s in last]):.4f}")
    log_info(f"Checkpoints in {cfg.checkpoint_dir}")
    return 0


def cmd_infer(cfg: RunConfig) -> int:
    samples = _load_dataset(cfg)
    epoch, g_params, f_params = load_checkpoint(cfg.checkpoint_dir)
    gen_cfg = cfg.generator_config(samples[0].d_max)
    disc_cfg = cfg.discriminator_config()
    dprint(f"Loaded checkpoint epoch {epoch} from {cfg.checkpoint_dir}")
    for s in samples:
        pred = predict(s, g_params, f_params, gen_cfg, disc_cfg, cfg.cost_config())
        target = os.path.join(cfg.prediction_dir, s.name)
        os.makedirs(target, exist_ok=True)
        map_io.write_pfm(os.path.join(target, "disp_wta.pfm"), pred.d_wta)
        map_io.write_pfm(os.path.join(target, "disp.pfm"), pred.disparity)
        map_io.write_pfm(os.path.join(target, "conf.pfm"), pred.confidence.data)
        if cfg["infer_dump_fusion"] and pred.fusion_weights is not None:
            for m, plane in enumerate(("cost", "disp", "color")[:pred.fusion_weights.shape[-1]]):
                map_io.write_pfm(os.path.join(target, f"fusion_{plane}.pfm"), pred.fusion_weights[..., m])
    log_info(f"Wrote predictions for {len(samples)} samples to {cfg.prediction_dir}")
    return 0


def cmd_refine(cfg: RunConfig) -> int:
    samples = _load_dataset(cfg)
    agcp = cfg.agcp_config()
    for s in samples:
        d = map_io.read_pfm(_prediction_path(cfg, s.name, "disp.pfm")).astype(np.float64)
        q = map_io.read_pfm(_prediction_path(cfg, s.name, "conf.pfm")).astype(np.float64)
        result = refine(d, q, s.left, agcp)
        map_io.write_pfm(_prediction_path(cfg, s.name, "disp_refined.pfm"), result.disparity)
        map_io.write_pfm(_prediction_path(cfg, s.name, "gcp.pfm"), result.gcp_mask.astype(np.float32))
        if not result.cg.converged:
            log_error(f"{s.name}: CG stopped at residual {result.cg.residual_norm:.3e}")
    log_info(f"Refined {len(samples)} disparity maps")
    return 0


def _estimated_disparity(cfg: RunConfig, sample) -> np.ndarray:
    path = _prediction_path(cfg, sample.name, "disp.pfm")
    if os.path.isfile(path):
        return map_io.read_pfm(path).astype(np.float64)
    dprint(f"{sample.name}: no disp.pfm, scoring the census/SGM winner-take-all disparity")
    return wta_disparity(raw_cost_pipeline(sample, cfg.cost_config()))


def evaluate_sample(cfg: RunConfig, sample, curve_dir: Optional[str]) -> Dict[str, object]:
    ec = cfg.eval_config()
    d, gt, valid = _estimated_disparity(cfg, sample), sample.gt_disparity, sample.gt_valid
    if ec.confidence == "ground_truth":
        q = 1.0 - bad_pixels(d, gt, ec.threshold_px)
    else:
        q = map_io.read_pfm(_prediction_path(cfg, sample.name, "conf.pfm")).astype(np.float64)
    q_star = ground_truth_confidence(d, gt, valid, ec.rho)
    curve = sparsification(q, d, gt, valid, ec.threshold_px, ec.n_points)
    best = optimal_curve(d, gt, valid, ec.threshold_px, ec.n_points)
    row: Dict[str, object] = {
        "image": sample.name, "AUC": auc(curve), "optimal_AUC": auc(best),
        "MSE": mse_confidence(q, q_star, valid), "BMP1": bmp(d, gt, valid, 1.0), "BMP3": bmp(d, gt, valid, 3.0),
    }
    refined_path = _prediction_path(cfg, sample.name, "disp_refined.pfm")
    if os.path.isfile(refined_path):
        refined = map_io.read_pfm(refined_path).astype(np.float64)
        row["BMP1_refined"] = bmp(refined, gt, valid, 1.0)
        row["BMP3_refined"] = bmp(refined, gt, valid, 3.0)
    if curve_dir:
        map_io.write_curve_csv(os.path.join(curve_dir, f"{sample.name}_curve.csv"), curve, best)
        if cfg["eval_plots"]:
            map_io.plot_curves(os.path.join(curve_dir, f"{sample.name}_curve.png"), curve, best, sample.name)
    return row


def _summary_table(rows: List[Dict[str, object]], mean: Dict[str, object]) -> Table:
    table = Table(title="Evaluation")
    for col in map_io.REPORT_COLUMNS:
        table.add_column(col, justify="left" if col == "image" else "right")
    for row in list(rows) + [mean]:
        cells = []
        for col in map_io.REPORT_COLUMNS:
            v = row.get(col, "")
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        table.add_row(*cells, style="bold" if row is mean else None)
    return table


def cmd_eval(cfg: RunConfig) -> int:
    samples = _load_dataset(cfg)
    curve_dir = os.path.join(cfg.out_dir, "curves")
    os.makedirs(curve_dir, exist_ok=True)
    rows = [evaluate_sample(cfg, s, curve_dir) for s in samples]
    mean = map_io.write_report(os.path.join(cfg.out_dir, REPORT_NAME), rows)
    console.print(_summary_table(rows, mean))
    log_info(f"Report written to {os.path.join(cfg.out_dir, REPORT_NAME)}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = run_suite(seed=cfg["gradcheck_seed"], step=cfg["gradcheck_step"])
    table = Table(title="Gradient check")
    for col in ("check", "max rel err", "max abs err", "threshold", "samples", "skipped", "status"):
        table.add_column(col)
    with open(os.path.join(cfg.out_dir, GRADCHECK_REPORT_NAME), "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["check", "max_rel_error", "max_abs_error", "threshold", "samples", "skipped", "passed"])
        for r in results:
            writer.writerow([r.name, repr(r.max_rel_error), repr(r.max_abs_error), repr(r.threshold), r.samples,
                             r.skipped, r.passed])
            table.add_row(r.name, f"{r.max_rel_error:.2e}", f"{r.max_abs_error:.2e}", f"{r.threshold:.0e}",
                          str(r.samples), str(r.skipped),
                          "[green]ok[/green]" if r.passed else "[red]FAIL[/red]")
    console.print(table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        log_error(f"Gradient check failed for: {', '.join(failed)}")
        return 1
    log_info(f"All {len(results)} gradient checks passed")
    return 0


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Adversarial stereo confidence: data, training, refinement, evaluation")
    parser.add_argument("command", choices=sorted(COMMANDS), help="What to run")
    parser.add_argument("--config", metavar="PATH", help="key=value config file")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="Override one config key (repeatable)")
    parser.add_argument("--out", metavar="DIR", help="Output directory (overrides out_dir)")
    parser.add_argument("--seed", type=int, help="Master seed (overrides seed)")
    parser.add_argument("-d", "--debug", action="store_true", help="Enable debug logging")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    global print_debug
    args = build_parser().parse_args(argv)
    print_debug = args.debug
    try:
        cfg = RunConfig.from_sources(args.config, args.set, args.seed, args.out)
    except ConfigError as e:
        console.print(f"ERROR: {e}")
        return 2

    out_dir = cfg.out_dir
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        console.print(f"ERROR: cannot create output directory {out_dir}: {e}")
        return 1
    setup_logging(out_dir, args.debug)
    marker = os.path.join(out_dir, INCOMPLETE_MARKER)
    with open(marker, "w", encoding="utf-8") as f:
        f.write(f"{args.command}\n")
    cfg.write(out_dir)
    dprint(f"main_app.py - Parsed cmd args: {args}")

    try:
        status = COMMANDS[args.command](cfg)
    except ConfigError as e:
        log_error(f"Configuration error: {e}")
        return 2
    except (ValueError, OSError, NonFiniteLossError) as e:
        log_error(f"{args.command} failed: {e}")
        dprint(traceback.format_exc())
        return 1
    if status == 0:
        os.remove(marker)
    return status


if __name__ == "__main__":
    sys.exit(main())
