"""SVAN network: shallow conv, a chain of SLKAB blocks, refinement, pixel-shuffle head.

Parameters live in a flat, name-keyed dict (``"blocks.3.upper.dwd.weight"``)
so checkpoints survive refactors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import (
    ConvSpec,
    ShapeError,
    Tape,
    Tensor,
    add,
    conv2d,
    gelu,
    hadamard,
    pixel_norm,
    pixel_shuffle,
)

__all__ = [
    "ARRANGEMENTS",
    "SCALES",
    "SvanConfig",
    "SvanParams",
    "CheckpointError",
    "layer_specs",
    "param_shapes",
    "init_params",
    "slkab_forward",
    "svan_forward",
    "save_params",
    "load_params",
]

SCALES = (2, 3, 4)

# Receptive-field order inside (upper, lower) branches; "17" is the DW/DWD
# pair and "1" the point conv.
ARRANGEMENTS = {
    "17-1-1-17": ("pair-point", "point-pair"),
    "17-1-17-1": ("pair-point", "pair-point"),
    "1-17-1-17": ("point-pair", "point-pair"),
    "1-17-17-1": ("point-pair", "pair-point"),
}
DEFAULT_ARRANGEMENT = "17-1-1-17"


@dataclass(frozen=True)
class SvanConfig:
    scale: int = 4
    base_channels: int = 32
    inner_channels: int = 64
    num_blocks: int = 7
    arrangement: str = DEFAULT_ARRANGEMENT
    seed: int = 0

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale}")
        if self.base_channels < 1 or self.inner_channels != 2 * self.base_channels:
            raise ValueError(
                f"inner_channels ({self.inner_channels}) must be twice "
                f"base_channels ({self.base_channels})"
            )
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.arrangement not in ARRANGEMENTS:
            raise ValueError(
                f"unknown arrangement {self.arrangement!r}; expected one of {sorted(ARRANGEMENTS)}"
            )
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def small(cls, base_channels: int, num_blocks: int, **kw) -> SvanConfig:
        return cls(base_channels=base_channels, inner_channels=2 * base_channels, num_blocks=num_blocks, **kw)


def _block_specs(prefix: str, cfg: SvanConfig) -> dict[str, ConvSpec]:
    c, ci = cfg.base_channels, cfg.inner_channels
    return {
        f"{prefix}.expand": ConvSpec(c, ci, 1),
        f"{prefix}.upper.point": ConvSpec(ci, ci, 1),
        f"{prefix}.upper.dwd": ConvSpec.depthwise(ci, 5, 3),
        f"{prefix}.upper.dw": ConvSpec.depthwise(ci, 5),
        f"{prefix}.mid": ConvSpec(ci, ci, 1),
        f"{prefix}.lower.dw": ConvSpec.depthwise(ci, 5),
        f"{prefix}.lower.dwd": ConvSpec.depthwise(ci, 5, 3),
        f"{prefix}.lower.point": ConvSpec(ci, ci, 1),
        f"{prefix}.reduce": ConvSpec(ci, c, 1),
    }


def layer_specs(cfg: SvanConfig) -> dict[str, ConvSpec]:
    """Every convolution in the network, in forward order, keyed by layer name."""
    c = cfg.base_channels
    specs = {"shallow": ConvSpec(3, c, 3)}
    for i in range(cfg.num_blocks):
        specs.update(_block_specs(f"blocks.{i}", cfg))
    specs["refine"] = ConvSpec.depthwise(c, 3, 3)
    specs["recon"] = ConvSpec(c, 3 * cfg.scale**2, 3)
    return specs


def param_shapes(cfg: SvanConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, spec in layer_specs(cfg).items():
        shapes[f"{name}.weight"] = spec.weight_shape
        shapes[f"{name}.bias"] = (spec.out_channels,)
        if name.endswith(".reduce"):
            block = name.rsplit(".", 1)[0]
            shapes[f"{block}.norm.gain"] = (cfg.base_channels,)
            shapes[f"{block}.norm.shift"] = (cfg.base_channels,)
    return shapes


@dataclass
class SvanParams:
    config: SvanConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        missing = expected.keys() - self.tensors.keys()
        if missing:
            raise CheckpointError(f"missing tensor(s): {', '.join(sorted(missing))}")
        extra = self.tensors.keys() - expected.keys()
        if extra:
            raise CheckpointError(f"unexpected tensor(s): {', '.join(sorted(extra))}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: got {self.tensors[name].shape}, "
                    f"config expects {shape}"
                )
        # canonical order
        self.tensors = {name: self.tensors[name] for name in expected}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def num_params(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def astype(self, dtype) -> SvanParams:
        return SvanParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> SvanParams:
        return SvanParams(self.config, dict(tensors))

    def bind(self, tape: Tape | None = None) -> dict[str, Tensor]:
        """Tensors for a forward pass, watched on ``tape`` when given."""
        if tape is None:
            return {k: Tensor(v) for k, v in self.tensors.items()}
        return tape.watch(self.tensors)

    def equals(self, other: SvanParams) -> bool:
        return self.config == other.config and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def init_params(cfg: SvanConfig, dtype=np.float64) -> SvanParams:
    """Uniform ``±sqrt(1/fan_in)`` weights, zero biases, identity pixel-norm affine."""
    rng = np.random.default_rng(cfg.seed)
    specs = layer_specs(cfg)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        layer, kind = name.rsplit(".", 1)
        if kind == "weight":
            spec = specs[layer]
            bound = np.sqrt(1.0 / ((spec.in_channels // spec.groups) * spec.kernel**2))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif kind == "gain":
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return SvanParams(cfg, tensors)


# ---------------------------------------------------------------------------
# forward


def _conv(x: Tensor, p: Mapping[str, Tensor], specs: Mapping[str, ConvSpec], name: str) -> Tensor:
    return conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], specs[name])


def _branch(x, p, specs, prefix: str, order: str, pair: tuple[str, str]) -> Tensor:
    """One attention mask: large-kernel pair and point conv, in ``order``."""
    first, second = pair
    if order == "point-pair":
        x = _conv(x, p, specs, f"{prefix}.point")
    x = _conv(x, p, specs, f"{prefix}.{first}")
    x = _conv(x, p, specs, f"{prefix}.{second}")
    if order == "pair-point":
        x = _conv(x, p, specs, f"{prefix}.point")
    return x


def slkab_forward(
    x: Tensor,
    p: Mapping[str, Tensor],
    cfg: SvanConfig,
    index: int = 0,
    arrangement: str | None = None,
) -> Tensor:
    """One symmetric large-kernel attention block; shape-preserving.

    ``p`` maps full parameter names (``blocks.<index>.*``) to tensors.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or x.shape[1] != cfg.base_channels:
        raise ShapeError(f"SLKAB expects {cfg.base_channels} channels, got shape {x.shape}")
    upper_order, lower_order = ARRANGEMENTS[arrangement or cfg.arrangement]
    b = f"blocks.{index}"
    specs = _block_specs(b, cfg)

    xc1 = gelu(_conv(x, p, specs, f"{b}.expand"))
    mask1 = _branch(xc1, p, specs, f"{b}.upper", upper_order, ("dwd", "dw"))
    xc2 = _conv(hadamard(mask1, xc1), p, specs, f"{b}.mid")
    mask2 = _branch(xc2, p, specs, f"{b}.lower", lower_order, ("dw", "dwd"))
    xc3 = add(_conv(hadamard(mask2, xc2), p, specs, f"{b}.reduce"), x)
    return pixel_norm(xc3, p[f"{b}.norm.gain"], p[f"{b}.norm.shift"])


def svan_forward(lr, params: SvanParams, tape: Tape | None = None) -> Tensor:
    """Super-resolve ``lr`` (n, 3, h, w) to (n, 3, s*h, s*w).  Output is not clamped."""
    cfg = params.config
    dtype = next(iter(params.tensors.values())).dtype
    if not isinstance(lr, Tensor):
        lr = Tensor(np.asarray(lr, dtype=dtype))
    if lr.data.ndim != 4 or lr.shape[1] != 3:
        raise ShapeError(f"SVAN expects a (n, 3, h, w) input, got shape {lr.shape}")
    p = params.bind(tape)
    specs = layer_specs(cfg)

    x0 = _conv(lr, p, specs, "shallow")
    x = x0
    for i in range(cfg.num_blocks):
        x = slkab_forward(x, p, cfg, i)
    x_map = add(_conv(x, p, specs, "refine"), x0)
    return pixel_shuffle(_conv(x_map, p, specs, "recon"), cfg.scale)


# ---------------------------------------------------------------------------
# checkpoints
#
#   "SVANCKPT" | u32 version | config record | u32 count | entries
#   config: u32 scale, u32 base, u32 inner, u32 blocks, u16 len + arrangement, u64 seed
#   entry:  u16 len + name, u32 ndim, u32 dims..., f64 LE payload

MAGIC = b"SVANCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt checkpoint, or one that does not fit the requested config."""


class CorruptCheckpointError(CheckpointError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_params(params: SvanParams, path) -> None:
    cfg = params.config
    out = [MAGIC, struct.pack("<I", VERSION)]
    out.append(struct.pack("<4I", cfg.scale, cfg.base_channels, cfg.inner_channels, cfg.num_blocks))
    out.append(_pack_str(cfg.arrangement))
    out.append(struct.pack("<Q", cfg.seed))
    out.append(struct.pack("<I", len(params.tensors)))
    for name, arr in params.tensors.items():
        out.append(_pack_str(name))
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.asarray(arr, dtype="<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"{self.path}: bad string in checkpoint") from exc


def load_params(path, config: SvanConfig | None = None) -> SvanParams:
    """Read a checkpoint; validate it against ``config`` when one is given."""
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError(f"{path}: not an SVAN checkpoint (bad magic)")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported checkpoint version {version}")
    scale, base, inner, blocks = rd.unpack("<4I")
    arrangement = rd.string()
    (seed,) = rd.unpack("<Q")
    try:
        stored = SvanConfig(scale, base, inner, blocks, arrangement, seed)
    except ValueError as exc:
        raise CorruptCheckpointError(f"{path}: invalid config record: {exc}") from exc
    (count,) = rd.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = rd.string()
        (ndim,) = rd.unpack("<I")
        dims = rd.unpack(f"<{ndim}I")
        size = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(rd.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if rd.pos != len(rd.raw):
        raise CorruptCheckpointError(f"{path}: trailing bytes after tensor table")

    cfg = config or stored
    if config is not None:
        shapes = param_shapes(config)
        for name, shape in shapes.items():
            if name in tensors and tensors[name].shape != shape:
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: checkpoint has "
                    f"{tensors[name].shape}, config expects {shape}"
                )
    return SvanParams(cfg, tensors)
