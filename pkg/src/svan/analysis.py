"""Parameter, FLOP and receptive-field accounting for stride-1 conv chains.

Two FLOP conventions are supported and every report carries its tag:

``padded``
    Each layer produces ``h*w`` outputs.  A multiply-accumulate counts as one
    FLOP and, by default, each bias add also counts as one.  This is how
    whole-network totals at 256x256 are quoted.
``valid``
    Each layer is sized independently against the ``h x w`` probe with no
    padding, ``(h - k_eff + 1) * (w - k_eff + 1)`` outputs.  Biases are not
    counted by default.  This is how single-layer comparisons are quoted.

GELU, pixel shuffle, pixel norm and elementwise ops cost zero FLOPs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .model import SvanConfig, layer_specs

__all__ = [
    "LayerSpec",
    "ReportRow",
    "EfficiencyReport",
    "Comparison",
    "svan_layers",
    "receptive_field",
    "count_params",
    "count_flops",
    "compare_decompositions",
    "table3",
]

CONVENTIONS = ("padded", "valid")
_ALIASES = {"padded": "padded", "same-padded": "padded", "same": "padded", "valid": "valid"}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kernel: int
    in_channels: int
    out_channels: int
    dilation: int = 1
    groups: int = 1
    bias: bool = True
    kind: str = "conv"  # "conv" or "norm"

    def __post_init__(self):
        if self.kind not in ("conv", "norm"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"{self.name}: kernel must be odd and positive")
        if self.dilation < 1 or self.groups < 1:
            raise ValueError(f"{self.name}: dilation and groups must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(f"{self.name}: groups must divide both channel counts")

    @classmethod
    def dense(cls, name, k, cin, cout, dilation=1, bias=True):
        return cls(name, k, cin, cout, dilation, 1, bias)

    @classmethod
    def depthwise(cls, name, k, channels, dilation=1, bias=True):
        return cls(name, k, channels, channels, dilation, channels, bias)

    @classmethod
    def norm(cls, name, channels):
        return cls(name, 1, channels, channels, kind="norm")

    @property
    def k_eff(self) -> int:
        return (self.kernel - 1) * self.dilation + 1

    @property
    def weights(self) -> int:
        if self.kind == "norm":
            return 0
        return self.out_channels * (self.in_channels // self.groups) * self.kernel**2

    @property
    def params(self) -> int:
        if self.kind == "norm":
            return 2 * self.out_channels
        return self.weights + (self.out_channels if self.bias else 0)


def svan_layers(cfg: SvanConfig) -> list[LayerSpec]:
    """The network as a flat layer list, pixel norms included."""
    layers = []
    for name, spec in layer_specs(cfg).items():
        layers.append(
            LayerSpec(name, spec.kernel, spec.in_channels, spec.out_channels, spec.dilation, spec.groups)
        )
        if name.endswith(".reduce"):
            layers.append(LayerSpec.norm(name.rsplit(".", 1)[0] + ".norm", cfg.base_channels))
    return layers


def receptive_field(chain: Iterable[LayerSpec]) -> int:
    """``1 + sum(k_eff - 1)`` over a stride-1 chain; an empty chain sees one pixel."""
    return 1 + sum(layer.k_eff - 1 for layer in chain)


@dataclass(frozen=True)
class ReportRow:
    name: str
    params: int
    macs: int
    rf: int


@dataclass
class EfficiencyReport:
    rows: list[ReportRow]
    convention: str
    receptive_field: int
    h: int | None = None
    w: int | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    @property
    def kparams(self) -> float:
        return self.total_params / 1e3

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "params", "macs", "rf"])
        for r in self.rows:
            writer.writerow([r.name, r.params, r.macs, r.rf])
        writer.writerow(["total", self.total_params, self.total_macs, self.receptive_field])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        size = f" at {self.h}x{self.w}" if self.h else ""
        lines = [f"convention: {self.convention}{size}"]
        lines.append(f"{'name':<{width}}  {'params':>10}  {'macs':>15}  {'rf':>5}")
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.params:>10}  {r.macs:>15}  {r.rf:>5}")
        lines.append(
            f"{'total':<{width}}  {self.total_params:>10}  {self.total_macs:>15}  {self.receptive_field:>5}"
        )
        lines.append(f"params: {self.kparams:.3f} K   FLOPs: {self.gflops:.4f} G")
        lines.extend(self.notes)
        return "\n".join(lines)


def _as_chain(chain_or_config) -> list[LayerSpec]:
    if isinstance(chain_or_config, SvanConfig):
        return svan_layers(chain_or_config)
    return list(chain_or_config)


def _rows(chain: Sequence[LayerSpec], macs_of) -> list[ReportRow]:
    rows, rf = [], 1
    for layer in chain:
        rf += layer.k_eff - 1
        rows.append(ReportRow(layer.name, layer.params, macs_of(layer), rf))
    return rows


def count_params(chain_or_config) -> EfficiencyReport:
    chain = _as_chain(chain_or_config)
    return EfficiencyReport(_rows(chain, lambda _: 0), "params-only", receptive_field(chain))


def count_flops(
    chain_or_config,
    h: int,
    w: int,
    convention: str = "padded",
    bias_ops: bool | None = None,
) -> EfficiencyReport:
    """Per-layer MACs on an ``h x w`` input.

    ``bias_ops`` defaults to True for ``padded`` and False for ``valid``.
    """
    try:
        convention = _ALIASES[convention]
    except KeyError:
        raise ValueError(f"unknown FLOPs convention {convention!r}; expected one of {CONVENTIONS}") from None
    if bias_ops is None:
        bias_ops = convention == "padded"
    chain = _as_chain(chain_or_config)

    def positions(layer: LayerSpec) -> int:
        if convention == "padded":
            return h * w
        oh, ow = h - layer.k_eff + 1, w - layer.k_eff + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"{layer.name}: valid {layer.k_eff}-wide kernel leaves no output on {h}x{w}")
        return oh * ow

    def macs(layer: LayerSpec) -> int:
        if layer.kind == "norm":
            return 0
        per_out = layer.weights // layer.out_channels
        if bias_ops and layer.bias:
            per_out += 1
        return positions(layer) * layer.out_channels * per_out

    report = EfficiencyReport(_rows(chain, macs), convention, receptive_field(chain), h, w)
    report.notes.append(f"bias adds {'counted' if bias_ops else 'excluded'}")
    return report


@dataclass
class Comparison:
    dense: EfficiencyReport
    decomposed: EfficiencyReport
    # decomposed chain with the trailing 1x1 point conv
    decomposed_point: EfficiencyReport

    @property
    def param_ratio(self) -> float:
        return self.decomposed.total_params / self.dense.total_params

    @property
    def flop_ratio(self) -> float:
        return self.decomposed_point.total_macs / self.dense.total_macs

    def to_text(self) -> str:
        rows = [
            ("dense", self.dense.receptive_field, self.dense.total_params, self.dense.total_macs),
            ("decomposed", self.decomposed.receptive_field, self.decomposed.total_params, self.decomposed.total_macs),
            (
                "decomposed+1x1",
                self.decomposed_point.receptive_field,
                self.decomposed_point.total_params,
                self.decomposed_point.total_macs,
            ),
        ]
        lines = [f"{'chain':<16}{'rf':>5}{'params':>10}{'macs':>14}"]
        lines += [f"{n:<16}{rf:>5}{p:>10}{m:>14}" for n, rf, p, m in rows]
        lines.append(f"param ratio {self.param_ratio:.4f}   flop ratio {self.flop_ratio:.4f}")
        return "\n".join(lines)


def _decomposed_chain(k_dw: int, d: int, channels: int) -> list[LayerSpec]:
    chain = [LayerSpec.depthwise(f"dw{k_dw}", k_dw, channels)]
    if d > 1:
        chain.append(LayerSpec.depthwise(f"dw{k_dw}-d{d}", k_dw, channels, dilation=d))
    return chain


def compare_decompositions(
    k_large: int,
    k_dw: int,
    d: int,
    channels: int = 3,
    h: int = 256,
    w: int = 256,
    convention: str = "valid",
) -> Comparison:
    """Dense ``k_large`` conv against depth-wise ``k_dw`` followed by a ``d``-dilated ``k_dw``.

    With ``d == 1`` the decomposed chain is the single depth-wise layer.
    Raises ``ValueError`` when the two receptive fields differ.
    """
    dense = [LayerSpec.dense(f"conv{k_large}", k_large, channels, channels)]
    decomposed = _decomposed_chain(k_dw, d, channels)
    rf_dense, rf_dec = receptive_field(dense), receptive_field(decomposed)
    if rf_dense != rf_dec:
        raise ValueError(
            f"receptive fields differ: dense {k_large}x{k_large} sees {rf_dense}, "
            f"decomposed chain sees {rf_dec}"
        )
    point = decomposed + [LayerSpec.dense("point", 1, channels, channels)]
    return Comparison(
        count_flops(dense, h, w, convention),
        count_flops(decomposed, h, w, convention),
        count_flops(point, h, w, convention),
    )


def table3(h: int = 256, w: int = 256) -> list[tuple[str, int, float, float]]:
    """Rows of (conv, receptive field, params [K], FLOPs [G]) for 3-channel layers."""
    five = count_flops([LayerSpec.dense("5x5", 5, 3, 3)], h, w, "valid")
    cmp = compare_decompositions(17, 5, 3, channels=3, h=h, w=w)
    return [
        ("5x5", five.receptive_field, five.kparams, five.gflops),
        ("17x17", cmp.dense.receptive_field, cmp.dense.kparams, cmp.dense.gflops),
        # params without the point conv, FLOPs with it
        ("5-DW & 5-DW-D", cmp.decomposed.receptive_field, cmp.decomposed.kparams, cmp.decomposed_point.gflops),
    ]
