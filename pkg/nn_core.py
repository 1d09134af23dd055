# nn_core.py
"""
Minimal differentiable-operator substrate.

Tensors are numpy arrays in NHWC layout. A Tape records the backward closure of
every executed primitive; Tape.backward replays them in exact reverse order and
gradients accumulate additively into Var.grad. Parameters live in a ParamStore
together with their gradient accumulators, momentum buffers and BN running stats.
"""
import contextlib
import logging
import os
import shutil
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

from seeding import INIT_STREAM, stream_rng

logger = logging.getLogger('NnCore')

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
MANIFEST_NAME = "manifest.txt"


class Var:
    """A value on the tape, with an optional gradient accumulator."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False, grad: Optional[np.ndarray] = None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.grad = grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value, dtype=None) -> Var:
    arr = np.asarray(value, dtype=dtype) if dtype is not None else np.asarray(value)
    return Var(arr, requires_grad=False)


def _accumulate(var: Var, g: np.ndarray) -> None:
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = np.array(g, dtype=var.value.dtype, copy=True)
    else:
        var.grad += g


class Tape:
    """Ordered record of executed primitives."""

    def __init__(self):
        self._records: List[Callable[[], None]] = []
        # discrete choices (relu masks, argmax picks) of the forward pass
        self.decisions: List[np.ndarray] = []

    def __len__(self):
        return len(self._records)

    def note(self, decision: np.ndarray) -> None:
        self.decisions.append(decision)

    def record(self, out: Var, backward: Callable[[np.ndarray], None]) -> Var:
        if out.requires_grad:
            def step():
                if out.grad is not None:
                    backward(out.grad)
            self._records.append(step)
        return out

    def backward(self, loss: Var, seed: Optional[np.ndarray] = None) -> None:
        if not loss.requires_grad:
            return
        g = np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=loss.value.dtype)
        _accumulate(loss, g)
        for step in reversed(self._records):
            step()


def _needs(*vars_: Var) -> bool:
    return any(v.requires_grad for v in vars_)


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------

def detach(x: Var) -> Var:
    return Var(x.value, requires_grad=False)


def add(tape: Tape, a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Var(a.value + b.value, requires_grad=_needs(a, b))

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return tape.record(out, backward)


def scale(tape: Tape, x: Var, factor: float) -> Var:
    out = Var(x.value * factor, requires_grad=x.requires_grad)
    return tape.record(out, lambda g: _accumulate(x, g * factor))


def gate_gradient(tape: Tape, x: Var, mask: np.ndarray) -> Var:
    """Identity forward; backward lets the gradient through only where mask is set."""
    gate = np.broadcast_to(np.asarray(mask, dtype=x.value.dtype), x.shape)
    out = Var(x.value, requires_grad=x.requires_grad)
    return tape.record(out, lambda g: _accumulate(x, g * gate))


def concat(tape: Tape, parts: Sequence[Var], axis: int = -1) -> Var:
    out = Var(np.concatenate([p.value for p in parts], axis=axis), requires_grad=_needs(*parts))
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(idx)])
    return tape.record(out, backward)


def reshape(tape: Tape, x: Var, shape) -> Var:
    out = Var(x.value.reshape(shape), requires_grad=x.requires_grad)
    return tape.record(out, lambda g: _accumulate(x, g.reshape(x.shape)))


def weighted_total(tape: Tape, x: Var, weights: np.ndarray) -> Var:
    """Scalar sum(x * weights); the scalar loss used by gradient checks."""
    w = np.asarray(weights, dtype=x.value.dtype)
    out = Var(np.sum(x.value * w), requires_grad=x.requires_grad)
    return tape.record(out, lambda g: _accumulate(x, g * w))


def relu(tape: Tape, x: Var) -> Var:
    active = x.value > 0
    tape.note(active)
    out = Var(np.where(active, x.value, 0).astype(x.value.dtype), requires_grad=x.requires_grad)
    return tape.record(out, lambda g: _accumulate(x, g * active))


def sigmoid(tape: Tape, x: Var) -> Var:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    out = Var(s, requires_grad=x.requires_grad)
    return tape.record(out, lambda g: _accumulate(x, g * s * (1.0 - s)))


def activation(tape: Tape, x: Var, kind: str) -> Var:
    if kind == "relu":
        return relu(tape, x)
    if kind == "sigmoid":
        return sigmoid(tape, x)
    raise ValueError(f"Unknown activation kind: {kind}")


def softmax(tape: Tape, x: Var) -> Var:
    """Max-shifted softmax over the last axis."""
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Var(p, requires_grad=x.requires_grad)

    def backward(g):
        _accumulate(x, p * (g - np.sum(g * p, axis=-1, keepdims=True)))
    return tape.record(out, backward)


def mix_modalities(tape: Tape, weights: Var, feats: Sequence[Var]) -> Var:
    """out = sum_m weights[..., m] * feats[m], one scalar weight per pixel and modality."""
    if weights.shape[-1] != len(feats):
        raise ValueError("mix_modalities: one weight plane per modality required")
    w = weights.value
    out_val = sum(w[..., m:m + 1] * f.value for m, f in enumerate(feats))
    out = Var(out_val, requires_grad=_needs(weights, *feats))

    def backward(g):
        if weights.requires_grad:
            gw = np.stack([np.sum(g * f.value, axis=-1) for f in feats], axis=-1)
            _accumulate(weights, gw)
        for m, f in enumerate(feats):
            _accumulate(f, g * w[..., m:m + 1])
    return tape.record(out, backward)


# ---------------------------------------------------------------------------
# Convolution, normalisation, resampling
# ---------------------------------------------------------------------------

def _fold_replicate(gp: np.ndarray, pad: int) -> np.ndarray:
    """Adjoint of edge padding on axes 1 and 2."""
    if pad == 0:
        return gp
    g = gp.copy()
    g[:, pad] += g[:, :pad].sum(axis=1)
    g[:, -pad - 1] += g[:, -pad:].sum(axis=1)
    g = g[:, pad:-pad]
    g[:, :, pad] += g[:, :, :pad].sum(axis=2)
    g[:, :, -pad - 1] += g[:, :, -pad:].sum(axis=2)
    return g[:, :, pad:-pad]


def conv2d(tape: Tape, x: Var, w: Var, b: Var) -> Var:
    """Stride-1 cross-correlation with replicate padding; x (N,H,W,Cin), w (k,k,Cin,Cout)."""
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ValueError("conv2d expects x (N,H,W,C) and w (k,k,Cin,Cout)")
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
    n, h, wd, _ = x.shape
    pad = k // 2
    xp = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * wd, k * k * cin)
    wmat = w.value.reshape(k * k * cin, cout)
    out_val = (cols @ wmat + b.value).reshape(n, h, wd, cout)
    out = Var(out_val, requires_grad=_needs(x, w, b))

    def backward(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            _accumulate(w, (cols.T @ g2).reshape(w.shape))
        if b.requires_grad:
            _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, h, wd, k, k, cin)
            gp = np.zeros_like(xp)
            for dy in range(k):
                for dx in range(k):
                    gp[:, dy:dy + h, dx:dx + wd, :] += dcols[:, :, :, dy, dx, :]
            _accumulate(x, _fold_replicate(gp, pad))
    return tape.record(out, backward)


def batch_norm(tape: Tape, x: Var, gamma: Var, beta: Var, running_mean: np.ndarray,
               running_var: np.ndarray, mode: str = "train", eps: float = BN_EPS,
               momentum: float = BN_MOMENTUM, update_stats: bool = True) -> Var:
    """Per-channel batch normalisation over (N,H,W); running stats are updated in place."""
    if x.value.size == 0 or x.shape[0] == 0:
        raise ValueError("batch_norm: empty batch")
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    axes = (0, 1, 2)
    if mode == "train":
        mean = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        if update_stats:
            running_mean *= (1.0 - momentum)
            running_mean += momentum * mean
            running_var *= (1.0 - momentum)
            running_var += momentum * var
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"batch_norm: unknown mode {mode}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mean) * inv_std
    out = Var(gamma.value * xhat + beta.value, requires_grad=_needs(x, gamma, beta))
    m = x.value.size // x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, np.sum(g * xhat, axis=axes))
        if beta.requires_grad:
            _accumulate(beta, np.sum(g, axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.value
            if mode == "train":
                dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes)
                                      - xhat * np.sum(dxhat * xhat, axis=axes))
            else:
                dx = dxhat * inv_std
            _accumulate(x, dx)
    return tape.record(out, backward)


def max_pool2(tape: Tape, x: Var) -> Var:
    """2x2 non-overlapping max; gradient goes to the first maximal element of each block."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2: spatial dims must be even, got {h}x{w}")
    blocks = x.value.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    tape.note(arg)
    out = Var(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], requires_grad=x.requires_grad)

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        _accumulate(x, gx)
    return tape.record(out, backward)


def _upsample_matrix(size: int, dtype) -> np.ndarray:
    out = np.arange(2 * size)
    src = np.clip((out + 0.5) / 2.0 - 0.5, 0, size - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, size - 1)
    a = src - i0
    mat = np.zeros((2 * size, size), dtype=dtype)
    np.add.at(mat, (out, i0), 1.0 - a)
    np.add.at(mat, (out, i1), a)
    return mat


def bilinear_upsample2(tape: Tape, x: Var) -> Var:
    """Factor-2 bilinear upsampling with half-pixel centres and edge clamping."""
    _, h, w, _ = x.shape
    uh = _upsample_matrix(h, x.value.dtype)
    uw = _upsample_matrix(w, x.value.dtype)
    out = Var(np.einsum("ih,nhwc,jw->nijc", uh, x.value, uw), requires_grad=x.requires_grad)
    return tape.record(out, lambda g: _accumulate(x, np.einsum("ih,nijc,jw->nhwc", uh, g, uw)))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class ParamEntry:
    tensor: np.ndarray
    grad: np.ndarray
    momentum: np.ndarray


class ParamStore:
    """Named trainable tensors, their gradient/momentum buffers and BN running stats."""

    def __init__(self, rng_seed: int = 0, dtype=np.float32):
        self.rng_seed = int(rng_seed)
        self.dtype = np.dtype(dtype)
        self.entries: Dict[str, ParamEntry] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._frozen = False

    # --- creation ---

    def add(self, name: str, tensor: np.ndarray) -> None:
        if name in self.entries or name in self.buffers:
            raise ValueError(f"Duplicate parameter name: {name}")
        t = np.array(tensor, dtype=self.dtype)
        self.entries[name] = ParamEntry(t, np.zeros_like(t), np.zeros_like(t))

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self.entries or name in self.buffers:
            raise ValueError(f"Duplicate buffer name: {name}")
        self.buffers[name] = np.array(value, dtype=self.dtype)

    def init_rng(self, name: str) -> np.random.Generator:
        return stream_rng(self.rng_seed, INIT_STREAM, zlib.crc32(name.encode("utf-8")))

    def add_conv(self, name: str, k: int, cin: int, cout: int, zero: bool = False) -> None:
        """He fan-in normal weights (or zeros) and a zero bias."""
        if zero:
            w = np.zeros((k, k, cin, cout))
        else:
            w = self.init_rng(name).standard_normal((k, k, cin, cout)) * np.sqrt(2.0 / (k * k * cin))
        self.add(f"{name}.w", w)
        self.add(f"{name}.b", np.zeros(cout))

    def add_bn(self, name: str, channels: int) -> None:
        self.add(f"{name}.gamma", np.ones(channels))
        self.add(f"{name}.beta", np.zeros(channels))
        self.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.add_buffer(f"{name}.running_var", np.ones(channels))

    def add_block(self, name: str, k: int, cin: int, cout: int) -> None:
        """conv + BN, used by conv_bn_relu."""
        self.add_conv(name, k, cin, cout)
        self.add_bn(f"{name}.bn", cout)

    # --- use ---

    @property
    def is_frozen(self) -> bool:
        return self._frozen

    @contextlib.contextmanager
    def frozen(self) -> Iterator["ParamStore"]:
        """Within the block, variables carry no gradient and BN stats are not updated."""
        previous = self._frozen
        self._frozen = True
        try:
            yield self
        finally:
            self._frozen = previous

    def var(self, name: str) -> Var:
        entry = self.entries[name]
        if self._frozen:
            return Var(entry.tensor, requires_grad=False)
        return Var(entry.tensor, requires_grad=True, grad=entry.grad)

    def zero_grad(self) -> None:
        for entry in self.entries.values():
            entry.grad.fill(0)

    def names(self) -> List[str]:
        return list(self.entries)

    def copy(self) -> "ParamStore":
        other = ParamStore(self.rng_seed, self.dtype)
        for name, e in self.entries.items():
            other.entries[name] = ParamEntry(e.tensor.copy(), e.grad.copy(), e.momentum.copy())
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore(self.rng_seed, dtype)
        for name, e in self.entries.items():
            other.entries[name] = ParamEntry(e.tensor.astype(dtype), e.grad.astype(dtype), e.momentum.astype(dtype))
        other.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return other

    def equals(self, other: "ParamStore") -> bool:
        """Bit-exact comparison of tensors, momentum and buffers."""
        if self.entries.keys() != other.entries.keys() or self.buffers.keys() != other.buffers.keys():
            return False
        for name, e in self.entries.items():
            o = other.entries[name]
            if not (np.array_equal(e.tensor, o.tensor) and np.array_equal(e.momentum, o.momentum)):
                return False
        return all(np.array_equal(v, other.buffers[k]) for k, v in self.buffers.items())

    # --- checkpoint ---

    def _arrays(self) -> List[tuple]:
        items = []
        for name, e in self.entries.items():
            items.append((f"param/{name}", e.tensor))
            items.append((f"momentum/{name}", e.momentum))
        for name, v in self.buffers.items():
            items.append((f"buffer/{name}", v))
        return items

    def save(self, directory: str) -> None:
        """Manifest (key, shape, dtype, file per line) plus one little-endian blob per tensor."""
        tmp = directory.rstrip("/\\") + ".tmp"
        if os.path.exists(tmp):
            shutil.rmtree(tmp)
        os.makedirs(tmp)
        little = self.dtype.newbyteorder("<")
        lines = [f"# rng_seed={self.rng_seed} dtype={self.dtype.name}"]
        for i, (key, arr) in enumerate(self._arrays()):
            fname = f"{i:04d}.bin"
            with open(os.path.join(tmp, fname), "wb") as f:
                f.write(np.ascontiguousarray(arr, dtype=little).tobytes())
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{key}\t{shape}\t{self.dtype.name}\t{fname}")
        with open(os.path.join(tmp, MANIFEST_NAME), "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        if os.path.exists(directory):
            shutil.rmtree(directory)
        os.replace(tmp, directory)
        logger.debug(f"Saved {len(self.entries)} parameters to {directory}")

    @classmethod
    def load(cls, directory: str) -> "ParamStore":
        path = os.path.join(directory, MANIFEST_NAME)
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln.rstrip("\n") for ln in f if ln.strip()]
        header = dict(tok.split("=", 1) for tok in lines[0].lstrip("# ").split())
        store = cls(int(header["rng_seed"]), np.dtype(header["dtype"]))
        tensors: Dict[str, np.ndarray] = {}
        momenta: Dict[str, np.ndarray] = {}
        for line in lines[1:]:
            key, shape_txt, dtype_name, fname = line.split("\t")
            shape = () if shape_txt == "scalar" else tuple(int(s) for s in shape_txt.split("x"))
            little = np.dtype(dtype_name).newbyteorder("<")
            with open(os.path.join(directory, fname), "rb") as f:
                arr = np.frombuffer(f.read(), dtype=little).reshape(shape).astype(store.dtype)
            kind, name = key.split("/", 1)
            if kind == "param":
                tensors[name] = arr
            elif kind == "momentum":
                momenta[name] = arr
            elif kind == "buffer":
                store.buffers[name] = arr.copy()
            else:
                raise ValueError(f"Unknown checkpoint entry kind '{kind}' in {path}")
        for name, t in tensors.items():
            store.entries[name] = ParamEntry(t.copy(), np.zeros_like(t), momenta.get(name, np.zeros_like(t)).copy())
        return store


# ---------------------------------------------------------------------------
# Layers over a ParamStore
# ---------------------------------------------------------------------------

def conv_layer(tape: Tape, x: Var, params: ParamStore, name: str) -> Var:
    return conv2d(tape, x, params.var(f"{name}.w"), params.var(f"{name}.b"))


def conv_bn_relu(tape: Tape, x: Var, params: ParamStore, name: str, mode: str = "train") -> Var:
    y = conv_layer(tape, x, params, name)
    y = batch_norm(tape, y, params.var(f"{name}.bn.gamma"), params.var(f"{name}.bn.beta"),
                   params.buffers[f"{name}.bn.running_mean"], params.buffers[f"{name}.bn.running_var"],
                   mode=mode, update_stats=not params.is_frozen)
    return relu(tape, y)


def sgd_momentum_step(params: ParamStore, lr: float, mu: float) -> ParamStore:
    """m <- mu*m + grad; tensor <- tensor - lr*m; gradients are zeroed afterwards."""
    if lr < 0:
        raise ValueError("sgd_momentum_step: lr must be >= 0")
    if not 0 <= mu < 1:
        raise ValueError("sgd_momentum_step: mu must be in [0, 1)")
    for entry in params.entries.values():
        entry.momentum *= mu
        entry.momentum += entry.grad
        entry.tensor -= lr * entry.momentum
        entry.grad.fill(0)
    return params
