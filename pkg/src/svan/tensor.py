"""Rank-4 tensor arithmetic with a small reverse-mode tape.

Only the handful of operations the network needs are differentiable:
``conv2d``, ``gelu``, ``hadamard``, ``add``, ``pixel_shuffle``,
``pixel_norm``, ``l1_loss``, ``l2_loss`` and ``total``.  Each op records a
vector-Jacobian closure on the tape of its inputs; :func:`backward` replays
the tape in reverse.

    >>> tape = Tape()
    >>> x = tape.param(np.ones((1, 1, 2, 2)), "x")
    >>> grads = backward(tape, total(x))
    >>> grads["x"].tolist()
    [[[[1.0, 1.0], [1.0, 1.0]]]]
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "ConvSpec",
    "AdamState",
    "conv2d",
    "gelu",
    "hadamard",
    "add",
    "pixel_shuffle",
    "pixel_norm",
    "l1_loss",
    "l2_loss",
    "total",
    "backward",
    "adam_step",
    "save_tensor",
    "load_tensor",
]

PIXEL_NORM_EPS = 1e-6
_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised on any dimension or shape mismatch."""


class Tensor:
    """Immutable array value, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "name")

    def __init__(self, data, tape: Tape | None = None, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = arr.view()
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor | None, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    nodes: list[_Node] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)

    def param(self, data, name: str) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already watched on this tape")
        t = Tensor(data, tape=self, name=name)
        self.params[name] = t
        return t

    def watch(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.param(arr, name) for name, arr in arrays.items()}

    def record(self, out: Tensor, inputs: Sequence[Tensor | None], vjp) -> Tensor:
        out.tape = self
        self.nodes.append(_Node(out, tuple(inputs), vjp))
        return out

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor | None) -> Tape | None:
    tape = None
    for t in tensors:
        if t is None or t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("inputs belong to different tapes")
    return tape


def _emit(data: np.ndarray, inputs: Sequence[Tensor | None], vjp) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor(data)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _require4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Stride-1 convolution geometry."""

    in_channels: int
    out_channels: int
    kernel: int
    dilation: int = 1
    groups: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel must be an odd positive integer, got {self.kernel}")
        if self.dilation < 1:
            raise ShapeError(f"dilation must be positive, got {self.dilation}")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @classmethod
    def depthwise(cls, channels: int, kernel: int, dilation: int = 1, padding: str = "same"):
        return cls(channels, channels, kernel, dilation, channels, padding)

    @property
    def k_eff(self) -> int:
        return (self.kernel - 1) * self.dilation + 1

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.padding == "same":
            return h, w
        oh, ow = h - self.k_eff + 1, w - self.k_eff + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"valid {self.kernel}x{self.kernel} d={self.dilation} conv "
                f"on {h}x{w} leaves no output"
            )
        return oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Grouped, dilated, stride-1 cross-correlation."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    _require4(x, "conv2d input")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d expects {spec.in_channels} input channels, got {c}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d weight shape {weight.shape} != {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({spec.out_channels},)")
    oh, ow = spec.output_hw(h, w)

    k, d, g = spec.kernel, spec.dilation, spec.groups
    cin_g, cout_g = c // g, spec.out_channels // g
    pad = (spec.k_eff - 1) // 2 if spec.padding == "same" else 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wt = weight.data

    # taps[(ky, kx)] -> (g, cout_g, cin_g)
    def tap(ky, kx):
        return wt[:, :, ky, kx].reshape(g, cout_g, cin_g)

    def window(arr, ky, kx):
        return arr[:, :, ky * d : ky * d + oh, kx * d : kx * d + ow]

    out = np.zeros((n, g, cout_g, oh * ow), dtype=np.result_type(x.data, wt))
    for ky in range(k):
        for kx in range(k):
            xs = window(xp, ky, kx).reshape(n, g, cin_g, oh * ow)
            out += tap(ky, kx) @ xs
    out = out.reshape(n, spec.out_channels, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def vjp(gout):
        go = gout.reshape(n, g, cout_g, oh * ow)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wt)
        for ky in range(k):
            for kx in range(k):
                xs = window(xp, ky, kx).reshape(n, g, cin_g, oh * ow)
                t = tap(ky, kx)
                window(gxp, ky, kx)[...] += (t.transpose(0, 2, 1) @ go).reshape(n, c, oh, ow)
                gtap = (go @ xs.transpose(0, 1, 3, 2)).sum(axis=0)
                gw[:, :, ky, kx] = gtap.reshape(spec.out_channels, cin_g)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        gb = gout.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    return _emit(out, (x, weight, bias), vjp)


# ---------------------------------------------------------------------------
# elementwise


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    x = _as_tensor(x)
    v = x.data
    cdf = 0.5 * (1.0 + erf(v * _SQRT_HALF))
    out = v * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return (g * (cdf + v * pdf),)

    return _emit(out, (x,), vjp)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "hadamard")
    av, bv = a.data, b.data
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


# ---------------------------------------------------------------------------
# rearrangement and normalisation


def pixel_shuffle(x: Tensor, scale: int) -> Tensor:
    """Move ``scale**2`` channel groups into an ``scale``-times larger grid."""
    x = _as_tensor(x)
    _require4(x, "pixel_shuffle input")
    n, c, h, w = x.shape
    s = int(scale)
    if s < 1 or c % (s * s):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by scale^2={s * s}")
    co = c // (s * s)
    out = x.data.reshape(n, co, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * s, w * s)

    def vjp(g):
        return (g.reshape(n, co, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w),)

    return _emit(np.ascontiguousarray(out), (x,), vjp)


def pixel_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = PIXEL_NORM_EPS) -> Tensor:
    """Standardise each pixel's channel vector, then apply a per-channel affine."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    _require4(x, "pixel_norm input")
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"pixel_norm gain/shift must have shape ({c},)")
    v = x.data
    mu = v.mean(axis=1, keepdims=True)
    centred = v - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=1, keepdims=True) + eps)
    xhat = centred * inv_std
    gv = gain.data[None, :, None, None]
    out = xhat * gv + shift.data[None, :, None, None]

    def vjp(g):
        dxhat = g * gv
        gx = inv_std * (
            dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _emit(out, (x, gain, shift), vjp)


# ---------------------------------------------------------------------------
# reductions


def total(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _same_shape(pred, target, "l1_loss")
    diff = pred.data - target.data
    size = diff.size

    def vjp(g):
        s = np.sign(diff) * (g / size)
        return s, -s

    return _emit(np.asarray(np.abs(diff).mean()), (pred, target), vjp)


def l2_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _same_shape(pred, target, "l2_loss")
    diff = pred.data - target.data
    size = diff.size

    def vjp(g):
        s = diff * (2.0 * g / size)
        return s, -s

    return _emit(np.asarray((diff * diff).mean()), (pred, target), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter watched on ``tape``.

    Parameters that do not influence ``loss`` get exact zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.out), None)
        if gout is None:
            continue
        for inp, gin in zip(node.inputs, node.vjp(gout)):
            if inp is None or inp.tape is not tape or gin is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
    return {
        name: grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape)
        for name, t in tape.params.items()
    }


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update.  Returns new arrays; ``state`` is advanced in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    updated = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        updated[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return updated


# ---------------------------------------------------------------------------
# fixture dump format: four u32 LE dims (n, c, h, w), then f64 LE payload

_DIMS = struct.Struct("<4I")


def save_tensor(path, array) -> None:
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim != 4:
        raise ShapeError(f"tensor dump requires rank 4, got {arr.shape}")
    Path(path).write_bytes(_DIMS.pack(*arr.shape) + arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _DIMS.size:
        raise ShapeError(f"{path}: truncated tensor header")
    dims = _DIMS.unpack_from(raw)
    count = int(np.prod(dims))
    if len(raw) != _DIMS.size + 8 * count or min(dims) < 1:
        raise ShapeError(f"{path}: payload does not match dims {dims}")
    return np.frombuffer(raw, dtype="<f8", offset=_DIMS.size).reshape(dims).astype(np.float64)
