"""ConTNet assembly: stem, four stages of ConT blocks, pooled linear head.

A ConT block runs two patch-wise encoders and one convolution in sequence and
wraps the triple in a residual shortcut. The last block of each of the first
three stages halves the resolution and doubles the width with a stride-2 3x3
convolution (projection shortcut: 1x1, stride 2). The last block of stage 4
uses a 1x1 stride-1 convolution.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Union

import numpy as np

from . import functional as F
from .autograd import DEFAULT_DTYPE, ShapeError, Tensor
from .module import BatchNorm2d, Conv2d, Linear, Module, SeparableConv2d
from .patching import PE_KINDS, PE_PLACEMENTS, apply_ste_patchwise, check_divisible, effective_patch
from .transformer import STE

DEFAULT_PATCHES = (7, 14)


@dataclass
class StageSpec:
    D: int
    D_ffn: int
    H: int
    blocks: int
    patch_schedule: list = field(default_factory=list)

    def __post_init__(self):
        if self.D % self.H:
            raise ValueError(f"stage width D={self.D} is not divisible by H={self.H} heads")
        if self.blocks < 1:
            raise ValueError("a stage needs at least one block")
        if not self.patch_schedule:
            self.patch_schedule = [DEFAULT_PATCHES] * self.blocks
        self.patch_schedule = [tuple(int(p) for p in pair) for pair in self.patch_schedule]
        if len(self.patch_schedule) != self.blocks or any(len(p) != 2 for p in self.patch_schedule):
            raise ValueError(f"patch schedule {self.patch_schedule} must hold one (P1, P2) pair per block")


@dataclass
class ModelConfig:
    """Declarative description of a network variant.

    ``stem_width=None`` makes the stem emit the stage-1 width directly; any other
    value inserts a 1x1 projection when it differs from stage 1.
    ``conv_groups`` is an int or ``"depthwise"`` and applies to the convolutions
    inside ConT blocks (main and projection-shortcut).
    ``widen_last_stage`` makes the final 1x1 convolution double the width.
    """

    variant: str = "custom"
    stages: list = field(default_factory=list)
    stem_width: Optional[int] = None
    num_classes: int = 1000
    in_channels: int = 3
    input_size: tuple = (224, 224)
    pe_kind: str = "learnable_2d"
    pe_placement: str = "patch_wise"
    conv_groups: Union[int, str] = 1
    strict_paper: bool = False
    widen_last_stage: bool = True
    qkv_bias: bool = True
    max_rel_distance: Optional[int] = None

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]
        if len(self.stages) != 4:
            raise ValueError(f"a ConTNet has exactly 4 stages, got {len(self.stages)}")
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.pe_kind not in PE_KINDS:
            raise ValueError(f"unknown pe_kind {self.pe_kind!r}; expected one of {PE_KINDS}")
        if self.pe_placement not in PE_PLACEMENTS:
            raise ValueError(f"unknown pe_placement {self.pe_placement!r}")
        if self.conv_groups != "depthwise" and (not isinstance(self.conv_groups, int) or self.conv_groups < 1):
            raise ValueError(f"conv_groups must be a positive int or 'depthwise', got {self.conv_groups!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        for s in d["stages"]:
            s["patch_schedule"] = [list(p) for p in s["patch_schedule"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        stages = []
        for s in d.get("stages", []):
            extra = set(s) - {f.name for f in fields(StageSpec)}
            if extra:
                raise ValueError(f"unknown stage keys: {sorted(extra)}")
            stages.append(StageSpec(**s))
        return cls(**{**d, "stages": stages})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


# D, D_ffn per stage and blocks per stage; heads are [1, 2, 4, 8] throughout.
_VARIANTS = {
    "ti": ([48, 96, 192, 384], [192, 384, 768, 768], [1, 1, 1, 1]),
    "s": ([64, 128, 256, 512], [256, 512, 1024, 1024], [1, 1, 1, 1]),
    "m": ([64, 128, 256, 512], [256, 512, 1024, 1024], [2, 2, 2, 2]),
    "b": ([64, 128, 256, 512], [256, 512, 1024, 1024], [3, 4, 6, 3]),
}
HEADS = [1, 2, 4, 8]
VARIANTS = tuple(_VARIANTS)


def variant_config(name: str, **overrides) -> ModelConfig:
    """Named configuration ``ti``, ``s``, ``m`` or ``b`` with optional field overrides."""
    key = name.lower().replace("cont-", "")
    if key not in _VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    dims, ffn, blocks = _VARIANTS[key]
    stages = [StageSpec(D=d, D_ffn=f, H=h, blocks=b) for d, f, h, b in zip(dims, ffn, HEADS, blocks)]
    return ModelConfig(variant=key, stages=stages, **overrides)


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale network: widths [8, 16, 32, 64], one block per stage, 32x32 inputs."""
    base = dict(
        variant="custom",
        stages=[StageSpec(D=d, D_ffn=2 * d, H=h, blocks=1, patch_schedule=[(4, 8)])
                for d, h in zip([8, 16, 32, 64], [1, 2, 2, 4])],
        num_classes=2,
        input_size=(32, 32),
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------- ablations
PE_CHOICES = {
    "none": ("none", "patch_wise"),
    "1d": ("learnable_1d", "patch_wise"),
    "2d": ("learnable_2d", "patch_wise"),
    "2d_image": ("learnable_2d", "image_wise"),
    "relative": ("relative", "patch_wise"),
}
PATCH_CHOICES = ("all7", "all14", "block_alternate", "ste_alternate")
GROUP_CHOICES = (1, 4, 8, 16, "depthwise")


def patch_schedule(name: str, blocks: int) -> list:
    if name == "all7":
        return [(7, 7)] * blocks
    if name == "all14":
        return [(14, 14)] * blocks
    if name == "block_alternate":
        return [(7, 7) if i % 2 == 0 else (14, 14) for i in range(blocks)]
    if name in ("ste_alternate", "default"):
        return [(7, 14)] * blocks
    raise ValueError(f"unknown patch arrangement {name!r}; expected one of {PATCH_CHOICES}")


def make_ablation_config(base: ModelConfig, axis: str, choice) -> ModelConfig:
    """Copy of ``base`` with one ablation axis (``pe``, ``patch_size``, ``groups``) changed."""
    cfg = copy.deepcopy(base)
    if axis == "pe":
        if choice not in PE_CHOICES:
            raise ValueError(f"unknown pe choice {choice!r}; expected one of {tuple(PE_CHOICES)}")
        cfg.pe_kind, cfg.pe_placement = PE_CHOICES[choice]
    elif axis in ("patch_size", "patch"):
        for s in cfg.stages:
            s.patch_schedule = patch_schedule(choice, s.blocks)
    elif axis == "groups":
        if isinstance(choice, str) and choice.isdigit():
            choice = int(choice)
        if choice not in GROUP_CHOICES:
            raise ValueError(f"unknown group choice {choice!r}; expected one of {GROUP_CHOICES}")
        cfg.conv_groups = choice
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return cfg


# ------------------------------------------------------------------------ modules
class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        for i, m in enumerate(mods):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]

    def forward(self, x):
        for m in self:
            x = m(x)
        return x


class ConvNormAct(Module):
    """Convolution, then batch norm and ReLU unless switched off."""

    def __init__(self, conv: Module, c_out: int, norm: bool, act: bool, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv = conv
        self.bn = BatchNorm2d(c_out, dtype=dtype) if norm else None
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        return F.relu(x) if self.act else x


class Stem(Module):
    """7x7 stride-2 convolution and 3x3 stride-2 max pooling."""

    def __init__(self, c_in, width, strict, rng, dtype):
        super().__init__()
        self.conv = ConvNormAct(Conv2d(c_in, width, 7, 2, 3, rng=rng, dtype=dtype), width,
                                norm=not strict, act=not strict, dtype=dtype)

    def forward(self, x):
        return F.pool2d(self.conv(x), "max", 3, 2, 1)


def _block_conv(c_in, c_out, k, stride, groups, rng, dtype) -> Module:
    if groups == "depthwise":
        if k == 1:
            return Conv2d(c_in, c_out, 1, stride, 0, rng=rng, dtype=dtype)
        return SeparableConv2d(c_in, c_out, k, stride, k // 2, rng=rng, dtype=dtype)
    return Conv2d(c_in, c_out, k, stride, k // 2, groups=groups, rng=rng, dtype=dtype)


class ConTBlock(Module):
    """y = shortcut(x) + conv(STE_2(STE_1(x))), with ReLU after the sum outside strict mode."""

    def __init__(self, c_in: int, c_out: int, ffn_dim: int, heads: int, patches: tuple,
                 map_size: tuple, kernel: int = 3, stride: int = 1, cfg: Optional[ModelConfig] = None,
                 rng=None, dtype=DEFAULT_DTYPE, name: str = "block"):
        super().__init__()
        cfg = cfg if cfg is not None else ModelConfig(stages=[StageSpec(c_in, ffn_dim, heads, 1)] * 4)
        rng = rng if rng is not None else np.random.default_rng(0)
        strict = cfg.strict_paper
        h, w = map_size
        self.name = name
        self.patches = tuple(patches)
        self.effective_patches = []
        for i, p in enumerate(patches):
            pe = effective_patch(p, h, w)
            check_divisible(h, w, pe, f"{name} STE{i + 1} (P={p})")
            self.effective_patches.append(pe)
        ste_kw = dict(pe_kind=cfg.pe_kind, pe_placement=cfg.pe_placement, map_size=(h, w),
                      factorized_pe=not strict, strict=strict, qkv_bias=cfg.qkv_bias,
                      max_rel_distance=cfg.max_rel_distance, rng=rng, dtype=dtype)
        self.ste1 = STE(c_in, c_in, ffn_dim, heads, self.effective_patches[0], **ste_kw)
        self.ste2 = STE(c_in, c_in, ffn_dim, heads, self.effective_patches[1], **ste_kw)
        self.conv = ConvNormAct(_block_conv(c_in, c_out, kernel, stride, cfg.conv_groups, rng, dtype),
                                c_out, norm=not strict, act=False, dtype=dtype)
        self.stride, self.kernel, self.c_in, self.c_out = stride, kernel, c_in, c_out
        self.strict = strict
        if stride != 1 or c_in != c_out:
            g = cfg.conv_groups if isinstance(cfg.conv_groups, int) else 1
            self.shortcut = ConvNormAct(Conv2d(c_in, c_out, 1, stride, 0, groups=g, rng=rng, dtype=dtype),
                                        c_out, norm=not strict, act=False, dtype=dtype)
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        y = apply_ste_patchwise(x, self.ste1, self.patches[0], f"{self.name} STE1 (P={self.patches[0]})")
        y = apply_ste_patchwise(y, self.ste2, self.patches[1], f"{self.name} STE2 (P={self.patches[1]})")
        y = self.conv(y)
        s = self.shortcut(x) if self.shortcut is not None else x
        out = y + s
        return out if self.strict else F.relu(out)


class ConTNet(Module):
    """The full classifier built from a :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        strict = cfg.strict_paper
        d1 = cfg.stages[0].D
        stem_width = cfg.stem_width or d1
        self.stem = Stem(cfg.in_channels, stem_width, strict, rng, dtype)
        h, w = cfg.input_size
        h, w = _stem_out(h), _stem_out(w)
        if stem_width != d1:
            self.stem_proj = ConvNormAct(Conv2d(stem_width, d1, 1, rng=rng, dtype=dtype), d1,
                                         norm=not strict, act=not strict, dtype=dtype)
        else:
            self.stem_proj = None
        stages = []
        self.stage_sizes = []
        for si, spec in enumerate(cfg.stages):
            self.stage_sizes.append((h, w))
            last_stage = si == len(cfg.stages) - 1
            blocks = []
            for bi in range(spec.blocks):
                final = bi == spec.blocks - 1
                c_out, kernel, stride = spec.D, 3, 1
                if final and not last_stage:
                    c_out, stride = cfg.stages[si + 1].D, 2
                elif final:
                    c_out, kernel = (2 * spec.D if cfg.widen_last_stage else spec.D), 1
                blocks.append(ConTBlock(spec.D, c_out, spec.D_ffn, spec.H, spec.patch_schedule[bi], (h, w),
                                        kernel, stride, cfg, rng, dtype, name=f"stage{si + 1}.block{bi + 1}"))
                if stride == 2:
                    h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
            stages.append(Sequential(*blocks))
        self.stages = Sequential(*stages)
        self.out_width = blocks[-1].c_out
        self.head = Linear(self.out_width, cfg.num_classes, bias=True, rng=rng, dtype=dtype, group="conv")

    def features(self, x: Tensor) -> list[Tensor]:
        """Stage-input maps followed by the final feature map."""
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (N, {self.cfg.in_channels}, H, W) input, got {x.shape}")
        x = self.stem(x)
        if self.stem_proj is not None:
            x = self.stem_proj(x)
        maps = []
        for stage in self.stages:
            maps.append(x)
            x = stage(x)
        maps.append(x)
        return maps

    def forward(self, x: Tensor) -> Tensor:
        feats = self.features(x)[-1]
        return self.head(F.global_avg_pool(feats))


def _conv_out(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def _stem_out(size):
    return _conv_out(_conv_out(size, 7, 2, 3), 3, 2, 1)


def build_network(cfg: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> ConTNet:
    return ConTNet(cfg, seed=seed, dtype=dtype)
