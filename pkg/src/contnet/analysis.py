"""Parameter and FLOP accounting.

Costs are derived from a symbolic shape trace of the model, so no forward pass is
needed. One multiply-accumulate counts as one FLOP. Convolutions and linear maps
are counted; normalisation, activations, softmax, pooling and additions are not.
The attention products (q k^T and A v, plus the relative-offset product when
present) are reported as separate ``attention`` rows so both conventions can be
read off one report.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import singledispatch
from typing import Optional

from .autograd import ShapeError
from .functional import conv_output_size
from .model import ConTBlock, ConTNet, ConvNormAct, Sequential, Stem
from .module import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, SeparableConv2d
from .patching import check_divisible, effective_patch
from .transformer import STE

# (GFLOPs, M params) reported for the four variants.
GOLDEN = {
    "ti": (0.8, 5.8),
    "s": (1.5, 10.1),
    "m": (3.1, 19.2),
    "b": (6.4, 39.6),
}
# ConT-M with grouped block convolutions: group setting -> (GFLOPs, M params).
GOLDEN_GROUPS = {
    1: (3.1, 19.2),
    4: (2.6, 15.0),
    8: (2.5, 14.3),
    16: (2.4, 14.0),
    "depthwise": (2.5, 15.3),
}


def ste_param_formula(d_mhsa: int, d_ffn: int, p: int) -> int:
    """2 D D_ffn + 4 D^2 + P^2 D: encoder weight matrices plus a P^2 x D position table."""
    return 2 * d_mhsa * d_ffn + 4 * d_mhsa ** 2 + p * p * d_mhsa


def ste_flops_formula(d_mhsa: int, d_ffn: int, p: int, h: int, w: int) -> int:
    """2 D D_ffn HW + 4 D^2 HW + HW / P^2, evaluated literally (integer division)."""
    hw = h * w
    return 2 * d_mhsa * d_ffn * hw + 4 * d_mhsa ** 2 * hw + hw // (p * p)


def conv_param_formula(c: int, k: int = 3) -> int:
    return k * k * c * c


def conv_flops_formula(c: int, h: int, w: int, k: int = 3) -> int:
    return k * k * c * c * h * w


@dataclass
class CostRow:
    name: str
    kind: str
    params: int
    flops: int
    output_shape: tuple


@dataclass
class CostReport:
    """Per-layer costs plus the running shapes; ``convention`` is always MAC = 1 FLOP."""

    rows: list = field(default_factory=list)
    stages: list = field(default_factory=list)  # (name, input shape)
    ste_audit: list = field(default_factory=list)
    input_shape: tuple = ()
    variant: str = "custom"
    convention: str = "mac=1"

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        """Convolution and linear-map FLOPs (the golden-table convention)."""
        return sum(r.flops for r in self.rows if r.kind != "attention")

    @property
    def attention_flops(self) -> int:
        return sum(r.flops for r in self.rows if r.kind == "attention")

    def to_tsv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
        writer.writerow(["layer", "kind", "params", "flops", "shape"])
        for r in self.rows:
            writer.writerow([r.name, r.kind, r.params, r.flops, "x".join(map(str, r.output_shape))])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'layer':<44} {'kind':<10} {'params':>12} {'flops':>15}  shape"]
        starts = {name: shape for name, shape in self.stages}
        for r in self.rows:
            prefix = ".".join(r.name.split(".")[:2])
            if prefix in starts:
                shape = starts.pop(prefix)
                lines.append(f"-- {prefix}  input {shape[2]}x{shape[3]}x{shape[1]}")
            shape = "x".join(map(str, r.output_shape))
            lines.append(f"{r.name:<44} {r.kind:<10} {r.params:>12,} {r.flops:>15,}  {shape}")
        lines.append("")
        lines.append(f"total params            {self.total_params:>15,}")
        lines.append(f"total flops (conv+fc)   {self.total_flops:>15,}")
        lines.append(f"attention matmul flops  {self.attention_flops:>15,}")
        lines.append(f"total incl. attention   {self.total_flops + self.attention_flops:>15,}")
        return "\n".join(lines)

    def golden_deltas(self) -> Optional[dict]:
        """Relative deviation from the published figures, when the variant has them."""
        if self.variant not in GOLDEN:
            return None
        gflops, mparams = GOLDEN[self.variant]
        return {
            "params": self.total_params / (mparams * 1e6) - 1,
            "flops": self.total_flops / (gflops * 1e9) - 1,
        }


class _Tracer:
    def __init__(self, biases: bool, norms: bool, pe: bool):
        self.rows: list[CostRow] = []
        self.audit: list[dict] = []
        self.skip = {k for k, keep in (("bias", biases), ("norm", norms), ("pe", pe)) if not keep}

    def params(self, mod: Module) -> int:
        return sum(p.size for p in mod._params.values() if p.kind not in self.skip)

    def subtree_params(self, mod: Module) -> int:
        return sum(p.size for _, p in mod.named_parameters() if p.kind not in self.skip)

    def add(self, name, kind, params, flops, shape):
        self.rows.append(CostRow(name, kind, int(params), int(flops), tuple(shape)))


@singledispatch
def _trace(mod: Module, shape: tuple, t: _Tracer, name: str) -> tuple:
    raise TypeError(f"no cost rule for {type(mod).__name__}")


@_trace.register
def _(mod: Conv2d, shape, t, name):
    n, c, h, w = shape
    if c != mod.c_in:
        raise ShapeError(f"{name}: expected {mod.c_in} channels, got {c}")
    ho = conv_output_size(h, mod.k, mod.stride, mod.padding)
    wo = conv_output_size(w, mod.k, mod.stride, mod.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"{name}: kernel {mod.k} does not fit a {h}x{w} map")
    out = (n, mod.c_out, ho, wo)
    flops = (mod.c_in // mod.groups) * mod.k * mod.k * mod.c_out * ho * wo * n
    t.add(name, "conv", t.params(mod), flops, out)
    return out


@_trace.register
def _(mod: SeparableConv2d, shape, t, name):
    shape = _trace(mod.depthwise, shape, t, f"{name}.depthwise")
    return _trace(mod.pointwise, shape, t, f"{name}.pointwise")


@_trace.register
def _(mod: BatchNorm2d, shape, t, name):
    t.add(name, "norm", t.params(mod), 0, shape)
    return shape


@_trace.register
def _(mod: LayerNorm, shape, t, name):
    t.add(name, "norm", t.params(mod), 0, shape)
    return shape


@_trace.register
def _(mod: Linear, shape, t, name):
    if shape[-1] != mod.c_in:
        raise ShapeError(f"{name}: expected last axis {mod.c_in}, got {shape}")
    positions = 1
    for v in shape[:-1]:
        positions *= v
    out = (*shape[:-1], mod.c_out)
    t.add(name, "linear", t.params(mod), positions * mod.c_in * mod.c_out, out)
    return out


@_trace.register
def _(mod: ConvNormAct, shape, t, name):
    shape = _trace(mod.conv, shape, t, f"{name}.conv")
    if mod.bn is not None:
        shape = _trace(mod.bn, shape, t, f"{name}.bn")
    return shape


@_trace.register
def _(mod: Stem, shape, t, name):
    shape = _trace(mod.conv, shape, t, f"{name}.conv")
    n, c, h, w = shape
    out = (n, c, conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1))
    t.add(f"{name}.maxpool", "pool", 0, 0, out)
    return out


def _trace_ste(ste: STE, shape, p_req, t: _Tracer, name: str) -> tuple:
    n, c, h, w = shape
    p = effective_patch(p_req, h, w)
    check_divisible(h, w, p, f"{name} (P={p_req})")
    if p != ste.patch_size and ste.pe.placement == "patch_wise" and ste.pe.kind != "none":
        raise ShapeError(f"{name}: built for P={ste.patch_size} but the map gives P={p}")
    if ste.pe.placement == "image_wise" and ste.pe.kind != "none" and ste.pe.extent != (h, w):
        raise ShapeError(f"{name}: image-wise encoding spans {ste.pe.extent}, map is {h}x{w}")
    seqs = n * (h // p) * (w // p)
    length = p * p
    seq_shape = (seqs, length, c)
    start = len(t.rows)
    if ste.pe.kind != "none":
        t.add(f"{name}.pe", "pe", t.subtree_params(ste.pe), 0, seq_shape)
    attn = ste.attn
    for part in ("q", "k", "v"):
        _trace(getattr(attn, part), seq_shape, t, f"{name}.attn.{part}")
    attn_flops = 2 * seqs * attn.heads * length * length * attn.head_dim
    if ste.pe.kind == "relative":
        attn_flops += seqs * attn.heads * length * ste.pe.rel_table.shape[1] * attn.head_dim
    t.add(f"{name}.attn.matmul", "attention", 0, attn_flops, (seqs, length, attn.dim))
    _trace(attn.proj, (seqs, length, attn.dim), t, f"{name}.attn.proj")
    _trace(attn.norm, seq_shape, t, f"{name}.attn.norm")
    hidden = _trace(ste.ffn.fc1, seq_shape, t, f"{name}.ffn.fc1")
    _trace(ste.ffn.fc2, hidden, t, f"{name}.ffn.fc2")
    _trace(ste.ffn.norm, seq_shape, t, f"{name}.ffn.norm")
    rows = t.rows[start:]
    t.audit.append({
        "layer": name,
        "D": attn.dim,
        "D_ffn": ste.ffn_dim,
        "P": p,
        "map": (h, w),
        "params": sum(r.params for r in rows),
        "flops": sum(r.flops for r in rows if r.kind != "attention"),
        "attention_flops": sum(r.flops for r in rows if r.kind == "attention"),
        "formula_params": ste_param_formula(attn.dim, ste.ffn_dim, p),
        "formula_flops": ste_flops_formula(attn.dim, ste.ffn_dim, p, h, w),
    })
    return shape


@_trace.register
def _(mod: ConTBlock, shape, t, name):
    y = _trace_ste(mod.ste1, shape, mod.patches[0], t, f"{name}.ste1")
    y = _trace_ste(mod.ste2, y, mod.patches[1], t, f"{name}.ste2")
    y = _trace(mod.conv, y, t, f"{name}.conv")
    if mod.shortcut is not None:
        s = _trace(mod.shortcut, shape, t, f"{name}.shortcut")
    else:
        s = shape
    if s != y:
        raise ShapeError(f"{name}: residual branch {y} does not match shortcut {s}")
    return y


@_trace.register
def _(mod: Sequential, shape, t, name):
    for i, m in enumerate(mod):
        shape = _trace(m, shape, t, f"{name}.{i}")
    return shape


def _normalize_shape(input_shape, in_channels: int) -> tuple:
    s = tuple(int(v) for v in input_shape)
    if len(s) == 2:
        return (1, in_channels, *s)
    if len(s) == 3:
        return (1, *s)
    if len(s) == 4:
        return s
    raise ShapeError(f"input shape must be (H, W), (C, H, W) or (N, C, H, W), got {input_shape}")


def summarize(m: ConTNet, input_shape=None, biases: bool = True, norms: bool = True,
              pe: bool = True) -> CostReport:
    """Full per-layer cost report for ``m`` on ``input_shape`` (defaults to the config size)."""
    shape = _normalize_shape(input_shape or m.cfg.input_size, m.cfg.in_channels)
    if shape[1] != m.cfg.in_channels:
        raise ShapeError(f"model takes {m.cfg.in_channels} input channels, got {shape[1]}")
    t = _Tracer(biases, norms, pe)
    report = CostReport(input_shape=shape, variant=m.cfg.variant)
    x = _trace(m.stem, shape, t, "stem")
    if m.stem_proj is not None:
        x = _trace(m.stem_proj, x, t, "stem_proj")
    for i, stage in enumerate(m.stages):
        report.stages.append((f"stages.{i}", x))
        x = _trace(stage, x, t, f"stages.{i}")
    n, c, h, w = x
    t.add("gap", "pool", 0, 0, (n, c))
    _trace(m.head, (n, c), t, "head")
    report.rows = t.rows
    report.ste_audit = t.audit
    return report


def count_params(m: Module, biases: bool = True, norms: bool = True, pe: bool = True) -> int:
    return m.parameter_store().numel(biases=biases, norms=norms, pe=pe)


def count_flops(m: ConTNet, input_shape=None, include_attention: bool = False) -> int:
    """MAC count of a forward pass; attention products only when asked for."""
    report = summarize(m, input_shape)
    return report.total_flops + (report.attention_flops if include_attention else 0)


def stage_shapes(m: ConTNet, input_shape=None) -> list[tuple]:
    """Input shape of every stage followed by the final feature-map shape."""
    report = summarize(m, input_shape)
    final = next(r.output_shape for r in reversed(report.rows) if r.name.startswith("stages."))
    return [s for _, s in report.stages] + [final]
