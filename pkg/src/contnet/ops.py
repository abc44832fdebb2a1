"""Differentiable primitive operations on :class:`~contnet.autograd.Tensor`.

Broadcasting is deliberately narrow: operands must have equal shapes, one of
them must hold a single element, or the smaller shape must be a trailing
suffix of the larger one (leading-batch broadcasting). Everything else is a
:class:`~contnet.autograd.ShapeError`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .autograd import ShapeError, Tensor, as_tensor, make_result


def _broadcast_kind(a: tuple, b: tuple) -> None:
    if a == b:
        return
    if int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if len(small) and big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"cannot broadcast shapes {a} and {b}: only leading-batch or scalar broadcasting")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_kind(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_kind(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``[..., M, K]``; ``b`` is either ``[K, N]`` (shared across the batch)
    or ``[..., K, N]`` with the same leading extents as ``a``. A 2-D ``a`` against
    a batched ``b`` is also accepted.
    """
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            if ga.shape != ad.shape:
                ga = ga.reshape(-1, *ad.shape).sum(axis=0)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
                if gb.shape != bd.shape:
                    gb = gb.reshape(-1, *bd.shape).sum(axis=0)
        return ga, gb

    return make_result(ad @ bd, (a, b), bw, "matmul")


def _norm_axes(axis, ndim) -> Optional[tuple]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Optional[Tensor], bias: Optional[Tensor], eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the per-channel affine map."""
    c = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"layer_norm {name} shape {p.shape} does not match last axis {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data if gain is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if bias is not None:
        out = out + bias.data
    parents = tuple(p for p in (x, gain, bias) if p is not None)

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        grads = []
        gx_hat = g * gd if gd is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads.append(gx)
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return make_result(out.astype(xd.dtype, copy=False), parents, bw, "layer_norm")


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., i, j] = x[..., i, index[i, j]]`` for a 2-D integer ``index``."""
    index = np.asarray(index)
    rows = x.shape[-2]
    if index.ndim != 2 or index.shape[0] != rows:
        raise ShapeError(f"gather index shape {index.shape} incompatible with {x.shape}")
    row_ix = np.arange(rows)[:, None]
    xshape = x.shape

    def bw(g):
        gx = np.zeros(xshape, dtype=g.dtype)
        lead = gx.reshape(-1, *xshape[-2:])
        np.add.at(lead, (slice(None), np.broadcast_to(row_ix, index.shape), index), g.reshape(-1, *index.shape))
        return (gx,)

    return make_result(x.data[..., row_ix, index], (x,), bw, "gather_last")
