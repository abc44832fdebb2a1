"""Convolution, pooling, normalisation and affine primitives with hand-written backward rules."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .autograd import ShapeError, Tensor, make_result


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Ho, Wo, k, k) strided view of a padded NCHW array."""
    if k == 1:
        return xp[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, None, None]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _col2im(gcols: np.ndarray, padded_shape: tuple, k: int, stride: int) -> np.ndarray:
    """Scatter-add (N, C, k, k, Ho, Wo) window gradients back onto the padded input."""
    dxp = np.zeros(padded_shape, dtype=gcols.dtype)
    ho, wo = gcols.shape[-2:]
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
    return dxp


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation.

    Args:
        x: input of shape (N, C_in, H, W).
        weight: kernel of shape (C_out, C_in / groups, k, k).
        bias: optional (C_out,) offsets.

    Returns:
        Tensor of shape (N, C_out, H', W') with H' = (H + 2 * padding - k) // stride + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and 4-D weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"only square kernels are supported, got {k}x{k2}")
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"groups={groups} must divide C_in={c} and C_out={o}")
    if cg != c // groups:
        raise ShapeError(f"input has {c} channels but weight {weight.shape} expects {cg * groups} (groups={groups})")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    g = groups
    og = o // g
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = _windows(xp, k, stride, ho, wo)  # N, C, Ho, Wo, k, k
    cols = (
        win.reshape(n, g, cg, ho, wo, k, k)
        .transpose(1, 0, 3, 4, 2, 5, 6)
        .reshape(g, n * ho * wo, cg * k * k)
    )
    wmat = weight.data.reshape(g, og, cg * k * k).transpose(0, 2, 1)
    out = (cols @ wmat).reshape(g, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(gout):
        gmat = gout.reshape(n, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, og)
        grads = []
        if x.requires_grad:
            gcols = (
                (gmat @ wmat.transpose(0, 2, 1))
                .reshape(g, n, ho, wo, cg, k, k)
                .transpose(1, 0, 4, 5, 6, 2, 3)
                .reshape(n, c, k, k, ho, wo)
            )
            dxp = _col2im(gcols, xp.shape, k, stride)
            grads.append(dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp)
        else:
            grads.append(None)
        gw = cols.transpose(0, 2, 1) @ gmat  # g, cg*k*k, og
        grads.append(gw.transpose(0, 2, 1).reshape(o, cg, k, k))
        if bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, parents, bw, "conv2d")


def pool2d(x: Tensor, kind: str, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max or average pooling; average pooling counts padded zeros in the window."""
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    fill = -np.inf if kind == "max" else 0.0
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill) if padding else xd
    win = _windows(xp, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)

    if kind == "avg":
        out = win.mean(axis=-1)

        def bw_avg(g):
            gcols = np.broadcast_to((g / (k * k))[:, :, None, None], (n, c, k, k, ho, wo))
            dxp = _col2im(gcols, xp.shape, k, stride)
            return (dxp[:, :, padding : padding + h, padding : padding + w],)

        return make_result(out.astype(xd.dtype, copy=False), (x,), bw_avg, "avgpool")

    arg = win.argmax(axis=-1)  # first maximal index on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw_max(g):
        rows = np.arange(ho)[:, None] * stride + arg // k
        cols = np.arange(wo)[None, :] * stride + arg % k
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dxp, (ni, ci, rows, cols), g)
        return (dxp[:, :, padding : padding + h, padding : padding + w],)

    return make_result(out, (x,), bw_max, "maxpool")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    return ops.mean(x, axis=(2, 3))


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of an NCHW tensor.

    In training mode the batch statistics are used and the running estimates are
    updated in place as ``(1 - momentum) * running + momentum * batch`` (the
    variance estimate is the unbiased one).
    """
    n, c, h, w = x.shape
    count = n * h * w
    xd = x.data
    shape = (1, c, 1, 1)
    if training:
        if count < 2:
            raise ValueError(f"batch_norm in train mode needs more than one value per channel, got {x.shape}")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(shape)
    xhat = (xd - mu.reshape(shape).astype(xd.dtype)) * inv
    gd = gain.data.reshape(shape)
    out = xhat * gd + bias.data.reshape(shape)

    def bw(g):
        gxhat = g * gd
        if training:
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv / count * (count * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out, (x, gain, bias), bw, "batch_norm")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis; ``weight`` is (C_in, C_out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if x.ndim == 1:
        out = ops.matmul(ops.reshape(x, (1, -1)), weight).reshape(weight.shape[1])
    else:
        out = ops.matmul(x, weight)
    if bias is not None:
        out = ops.add(out, bias)
    return out


def relu(x: Tensor) -> Tensor:
    return ops.relu(x)
