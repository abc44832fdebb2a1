"""Parameter containers and the basic layers built on :mod:`contnet.functional`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from . import ops
from .autograd import DEFAULT_DTYPE, Tensor

GROUPS = ("conv", "ste")
KINDS = ("weight", "bias", "norm", "pe")


class Parameter(Tensor):
    """A learnable tensor tagged with a learning-rate group and a kind.

    ``group`` is ``"conv"`` or ``"ste"`` (selects the learning rate);
    ``kind`` is one of ``weight``, ``bias``, ``norm``, ``pe`` and drives weight-decay
    exemptions and the inclusion flags of parameter counting.
    """

    def __init__(self, data, group: str = "conv", kind: str = "weight", dtype=None):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if kind not in KINDS:
            raise ValueError(f"unknown parameter kind {kind!r}")
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.group = group
        self.kind = kind

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, group={self.group}, kind={self.kind})"


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal samples redrawn until they fall within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    """Minimal layer container with ordered parameter, buffer and child registries."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            raise KeyError(name)
        self._buffers[name][...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._modules.items())

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}.{name}" if prefix else name)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield (f"{prefix}.{name}" if prefix else name), b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_store(self) -> "ParameterStore":
        return ParameterStore(self.named_parameters())

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer in place."""
        for _, mod in self.named_modules():
            for p in mod._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(mod._buffers.items()):
                mod.register_buffer(name, b.astype(dtype))
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ParameterStore:
    """Ordered name -> :class:`Parameter` registry of a model."""

    def __init__(self, named):
        self._items: OrderedDict[str, Parameter] = OrderedDict(named)

    def __getitem__(self, name: str) -> Parameter:
        return self._items[name]

    def __iter__(self):
        return iter(self._items.items())

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def group(self, tag: str) -> dict[str, Parameter]:
        return OrderedDict((n, p) for n, p in self._items.items() if p.group == tag)

    def numel(self, biases: bool = True, norms: bool = True, pe: bool = True) -> int:
        skip = {k for k, keep in (("bias", biases), ("norm", norms), ("pe", pe)) if not keep}
        return int(sum(p.size for p in self._items.values() if p.kind not in skip))

    def zero_grad(self) -> None:
        for p in self._items.values():
            p.grad = None


class Conv2d(Module):
    """k x k convolution; weights drawn from N(0, 2 / fan_out)."""

    def __init__(self, c_in, c_out, k, stride=1, padding=0, groups=1, bias=False,
                 rng: Optional[np.random.Generator] = None, dtype=DEFAULT_DTYPE, group="conv"):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ValueError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_out = k * k * c_out // groups
        self.weight = Parameter(rng.standard_normal((c_out, c_in // groups, k, k)) * np.sqrt(2.0 / fan_out),
                                group=group, kind="weight", dtype=dtype)
        self.bias = Parameter(np.zeros(c_out), group=group, kind="bias", dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class SeparableConv2d(Module):
    """Depthwise k x k convolution followed by a pointwise 1 x 1 mixing convolution."""

    def __init__(self, c_in, c_out, k, stride=1, padding=0, rng=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.depthwise = Conv2d(c_in, c_in, k, stride, padding, groups=c_in, rng=rng, dtype=dtype)
        self.pointwise = Conv2d(c_in, c_out, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.c, self.momentum, self.eps = c, momentum, eps
        self.gain = Parameter(np.ones(c), group="conv", kind="norm", dtype=dtype)
        self.bias = Parameter(np.zeros(c), group="conv", kind="norm", dtype=dtype)
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gain, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, c, eps=1e-5, dtype=DEFAULT_DTYPE, group="ste"):
        super().__init__()
        self.c, self.eps = c, eps
        self.gain = Parameter(np.ones(c), group=group, kind="norm", dtype=dtype)
        self.bias = Parameter(np.zeros(c), group=group, kind="norm", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class Linear(Module):
    """``x @ W + b`` with W of shape (C_in, C_out), truncated-normal init (std 0.02)."""

    def __init__(self, c_in, c_out, bias=True, rng=None, dtype=DEFAULT_DTYPE, group="ste", std=0.02):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.weight = Parameter(trunc_normal(rng, (c_in, c_out), std), group=group, kind="weight", dtype=dtype)
        self.bias = Parameter(np.zeros(c_out), group=group, kind="bias", dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
