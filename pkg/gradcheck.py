# gradcheck.py
"""
Finite-difference gradient suite.

Every differentiable piece (tape primitives, warping, probability layers, both
networks and the training losses) is checked in float64: the analytic gradient
of sum(w * f(x)) for a fixed random w is compared with central differences at a
few random coordinates of each input.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

import nn_core as nn
from discriminator import DiscriminatorConfig, Fusion, confidence_pass, init_discriminator
from generator import GeneratorConfig, generator_pass, init_generator, probability_op, soft_argmax_op, topk_op
from stereo_data import to_luma_chroma, warp_op
from training import log_likelihood, loss_disp_op

logger = logging.getLogger('GradCheck')

SMOOTH_THRESHOLD = 1e-5
DEFAULT_THRESHOLD = 1e-4
# keeps relative_error finite when both gradients vanish
ERROR_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    threshold: float
    samples: int
    skipped: int = 0
    max_abs_error: float = 0.0

    @property
    def passed(self) -> bool:
        return self.samples > 0 and self.max_rel_error < self.threshold


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERROR_FLOOR)


def _sample_indices(rng: np.random.Generator, shape, count: int):
    size = int(np.prod(shape, dtype=np.int64))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def _same_decisions(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


class _CentralDifference:
    """Central differences that skip coordinates whose +/- step crosses a kink (relu, argmax, clamp)."""

    def __init__(self, evaluate: Callable[[], Tuple[float, List[np.ndarray]]], base: List[np.ndarray],
                 step: float):
        self.evaluate = evaluate
        self.base = base
        self.step = step
        self.worst = 0.0
        self.worst_abs = 0.0
        self.count = 0
        self.skipped = 0

    def sample(self, tensor: np.ndarray, idx, analytic: float) -> bool:
        orig = tensor[idx]
        tensor[idx] = orig + self.step
        vp, dp = self.evaluate()
        tensor[idx] = orig - self.step
        vm, dm = self.evaluate()
        tensor[idx] = orig
        if not (_same_decisions(dp, self.base) and _same_decisions(dm, self.base)):
            self.skipped += 1
            return False
        numeric = (vp - vm) / (2 * self.step)
        self.worst = max(self.worst, relative_error(analytic, numeric))
        self.worst_abs = max(self.worst_abs, abs(analytic - numeric))
        self.count += 1
        return True

    def run(self, tensor: np.ndarray, grad: np.ndarray, rng: np.random.Generator, samples: int) -> None:
        done = 0
        for idx in _sample_indices(rng, tensor.shape, 4 * samples):
            if done == samples:
                break
            done += self.sample(tensor, idx, float(grad[idx]))


def check_function(name: str, fn: Callable[[nn.Tape, Dict[str, nn.Var]], nn.Var], inputs: Dict[str, np.ndarray],
                   rng: np.random.Generator, threshold: float = DEFAULT_THRESHOLD, step: float = 1e-5,
                   samples: int = 6, wrt: Sequence[str] = ()) -> GradCheckResult:
    """Gradient of fn w.r.t. the named inputs (all inputs when wrt is empty)."""
    wrt = list(wrt) or list(inputs)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    variables = {k: nn.Var(a.copy(), requires_grad=k in wrt) for k, a in arrays.items()}
    tape = nn.Tape()
    out = fn(tape, variables)
    weights = rng.standard_normal(out.shape)
    tape.backward(nn.weighted_total(tape, out, weights))

    def evaluate():
        t = nn.Tape()
        val = float(np.sum(fn(t, {k: nn.Var(a) for k, a in arrays.items()}).value * weights))
        return val, t.decisions

    checker = _CentralDifference(evaluate, tape.decisions, step)
    for key in wrt:
        grad = variables[key].grad
        checker.run(arrays[key], np.zeros_like(arrays[key]) if grad is None else grad, rng, samples)
    return GradCheckResult(name, checker.worst, threshold, checker.count, checker.skipped, checker.worst_abs)


def check_params(name: str, fn: Callable[[nn.Tape], nn.Var], store: nn.ParamStore, names: Sequence[str],
                 rng: np.random.Generator, threshold: float = DEFAULT_THRESHOLD, step: float = 1e-5,
                 samples: int = 4) -> GradCheckResult:
    """Gradient of fn w.r.t. parameters held in a float64 ParamStore."""
    store.zero_grad()
    tape = nn.Tape()
    out = fn(tape)
    weights = rng.standard_normal(out.shape)
    tape.backward(nn.weighted_total(tape, out, weights))
    grads = {n: store.entries[n].grad.copy() for n in names}
    store.zero_grad()

    def evaluate():
        t = nn.Tape()
        with store.frozen():
            val = float(np.sum(fn(t).value * weights))
        return val, t.decisions

    checker = _CentralDifference(evaluate, tape.decisions, step)
    for pname in names:
        checker.run(store.entries[pname].tensor, grads[pname], rng, samples)
    return GradCheckResult(name, checker.worst, threshold, checker.count, checker.skipped, checker.worst_abs)


def _randomize(store: nn.ParamStore, names: Sequence[str], rng: np.random.Generator, scale: float = 0.3) -> None:
    for n in names:
        store.entries[n].tensor[...] = rng.standard_normal(store.entries[n].tensor.shape) * scale


def _off_kink_disparity(rng: np.random.Generator, shape, high: int) -> np.ndarray:
    return rng.integers(0, high, size=shape) + rng.uniform(0.2, 0.8, size=shape)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

def _merge(name: str, results: Sequence[GradCheckResult]) -> GradCheckResult:
    """One row per primitive: worst error and total samples over all sampled shapes."""
    return GradCheckResult(name, max(r.max_rel_error for r in results), results[0].threshold,
                           sum(r.samples for r in results), sum(r.skipped for r in results),
                           max(r.max_abs_error for r in results))


def _distinct(rng: np.random.Generator, shape, spacing: float) -> np.ndarray:
    """Values at least `spacing` apart, so max-pool and top-K decisions survive the step."""
    return rng.permutation(int(np.prod(shape))).reshape(shape) * spacing


def primitive_checks(rng: np.random.Generator, step: float) -> List[GradCheckResult]:
    def over(name, fn, make, shapes, threshold=SMOOTH_THRESHOLD):
        return _merge(name, [check_function(name, fn, make(*s), rng, threshold, step) for s in shapes])

    def bn_train(t, v):
        c = v["x"].shape[-1]
        return nn.batch_norm(t, v["x"], v["g"], v["b"], np.zeros(c), np.ones(c), mode="train")

    def bn_eval(t, v):
        c = v["x"].shape[-1]
        return nn.batch_norm(t, v["x"], v["g"], v["b"], np.full(c, 0.2), np.full(c, 1.5), mode="eval")

    def bn_inputs(*shape):
        c = shape[-1]
        return {"x": rng.standard_normal(shape), "g": rng.uniform(0.5, 1.5, c), "b": rng.standard_normal(c)}

    def mix(t, v):
        return nn.mix_modalities(t, nn.softmax(t, v["logits"]), [v["a"], v["b"], v["c"]])

    def mix_inputs(n, h, w, c):
        return {"logits": rng.standard_normal((n, h, w, 3)), "a": rng.standard_normal((n, h, w, c)),
                "b": rng.standard_normal((n, h, w, c)), "c": rng.standard_normal((n, h, w, c))}

    def signed(*shape):
        return {"x": rng.choice([-1, 1], shape) * rng.uniform(0.1, 2.0, shape)}

    def normal(*shape):
        return {"x": rng.standard_normal(shape)}

    return [
        over("conv2d", lambda t, v: nn.conv2d(t, v["x"], v["w"], v["b"]),
             lambda n, h, w, cin, cout: {"x": rng.standard_normal((n, h, w, cin)),
                                         "w": rng.standard_normal((3, 3, cin, cout)),
                                         "b": rng.standard_normal(cout)},
             [(2, 5, 5, 2, 3), (1, 4, 7, 3, 2), (3, 6, 4, 1, 4)]),
        over("batch_norm[train]", bn_train, bn_inputs, [(2, 4, 4, 3), (3, 5, 2, 2), (1, 6, 5, 4)],
             DEFAULT_THRESHOLD),
        over("batch_norm[eval]", bn_eval, bn_inputs, [(2, 4, 4, 3), (3, 5, 2, 2), (1, 6, 5, 4)]),
        over("relu", lambda t, v: nn.relu(t, v["x"]), signed, [(3, 4), (2, 3, 5), (1, 4, 4, 2)]),
        over("sigmoid", lambda t, v: nn.sigmoid(t, v["x"]), normal, [(3, 4), (2, 3, 5), (1, 4, 4, 2)]),
        over("softmax", lambda t, v: nn.softmax(t, v["x"]), normal, [(3, 5), (2, 4, 3), (1, 2, 2, 7)]),
        over("max_pool2", lambda t, v: nn.max_pool2(t, v["x"]), lambda *s: {"x": _distinct(rng, s, 0.1)},
             [(1, 4, 4, 4), (2, 6, 4, 3), (1, 2, 8, 2)]),
        over("bilinear_upsample2", lambda t, v: nn.bilinear_upsample2(t, v["x"]), normal,
             [(1, 3, 4, 2), (2, 2, 5, 1), (1, 4, 3, 3)]),
        over("mix_modalities", mix, mix_inputs, [(1, 3, 3, 2), (2, 4, 2, 3), (1, 2, 5, 1)]),
        over("bilinear_warp", lambda t, v: warp_op(t, v["image"], v["disparity"]),
             lambda n, h, w, c: {"image": rng.uniform(0, 1, (n, h, w, c)),
                                 "disparity": _off_kink_disparity(rng, (n, h, w), 3)},
             [(1, 4, 8, 3), (2, 3, 10, 1), (1, 5, 7, 2)]),
        over("normalize_probability", lambda t, v: probability_op(t, v["x"], 0.5), normal,
             [(2, 3, 6), (1, 4, 4, 5), (5, 3)]),
        over("topk_pool", lambda t, v: topk_op(t, nn.softmax(t, v["x"]), 3),
             lambda *s: {"x": _distinct(rng, s, 0.25)}, [(4, 6), (2, 3, 5), (3, 8)]),
        over("soft_argmax", lambda t, v: soft_argmax_op(t, nn.softmax(t, v["x"])), normal,
             [(4, 6), (2, 3, 5), (1, 2, 2, 8)]),
    ]


def network_checks(rng: np.random.Generator, step: float) -> List[GradCheckResult]:
    d_max, k = 4, 3
    gen_cfg = GeneratorConfig(base_channels=4, sigma=0.5, k=k, d_max=d_max)
    g = init_generator(gen_cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    _randomize(g, ["conv5.w"], rng)
    raw = rng.uniform(0, 1, (2, 8, 8, d_max))
    results = [check_params(
        "generator", lambda t: generator_pass(t, nn.Var(raw), g, gen_cfg).disparity, g,
        ["conv1.w", "conv2b.bn.gamma", "conv3.w", "conv4.b", "conv5.w"], rng, DEFAULT_THRESHOLD, step)]

    topk = rng.uniform(0, 1, (2, 6, 6, k))
    disp = rng.uniform(0, d_max - 1, (2, 6, 6))
    color = to_luma_chroma(rng.uniform(0, 1, (2, 6, 6, 3)))
    for fusion in (Fusion.DYNAMIC, Fusion.CONCAT):
        disc_cfg = DiscriminatorConfig(feat_channels=3, fusion=fusion, head_depth=2)
        f = init_discriminator(disc_cfg, k, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        _randomize(f, ["head.out.w"] + (["fusion.logits.w"] if fusion is Fusion.DYNAMIC else []), rng)
        names = ["cost.conv1.w", "disp.conv2.bn.beta", "color.conv3.w", "head.conv1.w", "head.out.w"]
        if fusion is Fusion.DYNAMIC:
            names += ["fusion.conv1.w", "fusion.logits.w"]
        results.append(check_params(
            f"discriminator[{fusion.value}]",
            lambda t, f=f, disc_cfg=disc_cfg: confidence_pass(t, nn.Var(topk), nn.Var(disp), nn.Var(color), f,
                                                             disc_cfg, d_max).confidence,
            f, names, rng, DEFAULT_THRESHOLD, step))
    return results


def loss_checks(rng: np.random.Generator, step: float) -> List[GradCheckResult]:
    d_max, k = 4, 3
    disc_cfg = DiscriminatorConfig(feat_channels=3, head_depth=2)
    f = init_discriminator(disc_cfg, k, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    _randomize(f, ["head.out.w", "fusion.logits.w"], rng)
    topk = rng.uniform(0, 1, (1, 6, 6, k))
    disp = rng.uniform(0, d_max - 1, (1, 6, 6))
    color = to_luma_chroma(rng.uniform(0, 1, (1, 6, 6, 3)))
    pos = rng.uniform(size=(1, 6, 6)) < 0.5
    results = [check_params(
        "loss_conf_F(F)",
        lambda t: log_likelihood(t, confidence_pass(t, nn.Var(topk), nn.Var(disp), nn.Var(color), f, disc_cfg,
                                                    d_max).confidence, pos, ~pos),
        f, ["cost.conv1.w", "head.out.w", "fusion.logits.w"], rng, DEFAULT_THRESHOLD, step)]

    gen_cfg = GeneratorConfig(base_channels=4, sigma=0.5, k=k, d_max=d_max)
    g = init_generator(gen_cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    _randomize(g, ["conv5.w"], rng)
    raw = rng.uniform(0, 1, (1, 8, 8, d_max))
    left, right = rng.uniform(0, 1, (1, 8, 8, 3)), rng.uniform(0, 1, (1, 8, 8, 3))
    gt = rng.integers(0, d_max, (1, 8, 8)).astype(np.float64) + 0.5
    valid = rng.uniform(size=(1, 8, 8)) < 0.8
    results.append(check_params(
        "loss_disp(G)",
        lambda t: loss_disp_op(t, generator_pass(t, nn.Var(raw), g, gen_cfg).disparity, gt, valid, left, right,
                               1.0).total,
        g, ["conv1.w", "conv5.w"], rng, DEFAULT_THRESHOLD, step))
    return results


def run_suite(seed: int = 7, step: float = 1e-5) -> List[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = primitive_checks(rng, step) + network_checks(rng, step) + loss_checks(rng, step)
    for r in results:
        level = logging.INFO if r.passed else logging.ERROR
        logger.log(level, f"{r.name}: max rel err {r.max_rel_error:.2e}, max abs err {r.max_abs_error:.2e} "
                          f"(threshold {r.threshold:.0e}, {r.samples} samples)")
    return results
