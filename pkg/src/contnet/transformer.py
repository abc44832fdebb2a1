"""Post-norm transformer encoder layer used inside ConT blocks.

    MHSA(x) = LN(concat_h(softmax(q_h k_h^T / sqrt(D_h)) v_h) W_mhsa + x)
    FFN(x)  = LN(W_2 act(W_1 x) + x)
    STE(x)  = FFN(MHSA(x + PE))
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import functional as F
from . import ops
from .autograd import DEFAULT_DTYPE, ShapeError, Tensor
from .module import LayerNorm, Linear, Module
from .patching import PositionalEncoding


def single_head_attention(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                          rel: Optional[Tensor] = None, rel_index: Optional[np.ndarray] = None) -> Tensor:
    """One attention head over sequences ``x`` of shape (..., L, C).

    ``rel`` is an optional (R, D_h) table of key-offset embeddings and ``rel_index``
    the (L, L) integer map from query/key pairs into it.
    """
    if x.shape[-1] != w_q.shape[0]:
        raise ShapeError(f"attention input {x.shape} does not match W_q {w_q.shape}")
    q, k, v = ops.matmul(x, w_q), ops.matmul(x, w_k), ops.matmul(x, w_v)
    d_h = w_q.shape[1]
    logits = ops.matmul(q, _swap_last(k))
    if rel is not None:
        logits = logits + ops.gather_last(ops.matmul(q, ops.transpose(rel, (1, 0))), rel_index)
    attn = ops.softmax(logits * (1.0 / math.sqrt(d_h)), axis=-1)
    return ops.matmul(attn, v)


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ops.transpose(t, axes)


class MultiHeadSelfAttention(Module):
    """Multi-head attention followed by the output projection, residual and layer norm."""

    def __init__(self, channels: int, dim: int, heads: int, bias: bool = True, rng=None,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        if dim % heads:
            raise ValueError(f"embedding width {dim} is not divisible by {heads} heads")
        self.channels, self.dim, self.heads, self.head_dim = channels, dim, heads, dim // heads
        self.q = Linear(channels, dim, bias=bias, rng=rng, dtype=dtype)
        self.k = Linear(channels, dim, bias=bias, rng=rng, dtype=dtype)
        self.v = Linear(channels, dim, bias=bias, rng=rng, dtype=dtype)
        self.proj = Linear(dim, channels, bias=bias, rng=rng, dtype=dtype)
        self.norm = LayerNorm(channels, dtype=dtype)
        self.capture = False
        self.last_attention: Optional[np.ndarray] = None

    def _heads(self, t: Tensor) -> Tensor:
        b, l, _ = t.shape
        return t.reshape(b, l, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def attend(self, x: Tensor, pe: Optional[PositionalEncoding] = None) -> Tensor:
        """Concatenated head outputs, shape (B, L, D)."""
        b, l, c = x.shape
        if c != self.channels:
            raise ShapeError(f"sequence has {c} channels, attention expects {self.channels}")
        q, k, v = self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x))
        logits = ops.matmul(q, _swap_last(k))  # B, H, L, L
        if pe is not None and pe.kind == "relative":
            rel_t = ops.transpose(pe.rel_table, (0, 2, 1))  # H, D_h, R
            qh = q.transpose(1, 0, 2, 3).reshape(self.heads, b * l, self.head_dim)
            rel = ops.matmul(qh, rel_t).reshape(self.heads, b, l, rel_t.shape[-1]).transpose(1, 0, 2, 3)
            logits = logits + ops.gather_last(rel, pe.relative_index(l))
        attn = ops.softmax(logits * (1.0 / math.sqrt(self.head_dim)), axis=-1)
        if self.capture:
            self.last_attention = attn.data.copy()
        out = ops.matmul(attn, v)  # B, H, L, D_h
        return out.transpose(0, 2, 1, 3).reshape(b, l, self.dim)

    def forward(self, x: Tensor, pe: Optional[PositionalEncoding] = None) -> Tensor:
        return self.norm(self.proj(self.attend(x, pe)) + x)


class FeedForward(Module):
    """Two linear maps with an optional ReLU between them, then residual and layer norm."""

    def __init__(self, channels: int, hidden: int, activation: str = "relu", bias: bool = True,
                 rng=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown FFN activation {activation!r}")
        self.activation = activation
        self.fc1 = Linear(channels, hidden, bias=bias, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, bias=bias, rng=rng, dtype=dtype)
        self.norm = LayerNorm(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        if self.activation == "relu":
            h = F.relu(h)
        return self.norm(self.fc2(h) + x)


class STE(Module):
    """Standard transformer encoder: positional encoding, MHSA, FFN.

    Args:
        channels: input/output width C.
        dim: attention width D (split into ``heads`` heads of D / heads).
        ffn_dim: hidden width of the feed-forward map.
        patch_size: the (already clamped) sequence side P, so L = P * P.
        pe_kind / pe_placement / map_size / factorized_pe: see :class:`PositionalEncoding`.
        strict: drop the linear biases and the FFN nonlinearity.
    """

    def __init__(self, channels: int, dim: int, ffn_dim: int, heads: int, patch_size: int,
                 pe_kind: str = "learnable_2d", pe_placement: str = "patch_wise",
                 map_size: Optional[tuple[int, int]] = None, factorized_pe: bool = True,
                 strict: bool = False, qkv_bias: bool = True, rng=None, dtype=DEFAULT_DTYPE,
                 pe_init: str = "trunc_normal", max_rel_distance: Optional[int] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.dim, self.ffn_dim, self.heads = channels, dim, ffn_dim, heads
        self.patch_size = patch_size
        bias = qkv_bias and not strict
        self.pe = PositionalEncoding(pe_kind, channels, patch_size, pe_placement, map_size,
                                     factorized=factorized_pe, heads=heads, head_dim=dim // heads,
                                     max_distance=max_rel_distance, init=pe_init, rng=rng, dtype=dtype)
        self.attn = MultiHeadSelfAttention(channels, dim, heads, bias=bias, rng=rng, dtype=dtype)
        self.ffn = FeedForward(channels, ffn_dim, activation="identity" if strict else "relu",
                               bias=bias, rng=rng, dtype=dtype)

    def encode(self, seqs: Tensor) -> Tensor:
        """MHSA then FFN on (B, L, C) sequences whose positions are already encoded."""
        return self.ffn(self.attn(seqs, self.pe))

    def forward(self, seq: Tensor) -> Tensor:
        """Full encoder on (L, C) or (B, L, C) sequences, adding a patch-wise table first."""
        squeeze = seq.ndim == 2
        if squeeze:
            seq = seq.reshape(1, *seq.shape)
        if self.pe.additive:
            if self.pe.placement != "patch_wise":
                raise ValueError("image-wise encodings need the feature map; use apply_ste_patchwise")
            table = self.pe.table_tensor()
            if table.shape[0] != seq.shape[1]:
                raise ShapeError(f"encoding covers {table.shape[0]} positions, sequence has {seq.shape[1]}")
            seq = seq + table
        out = self.encode(seq)
        return out.reshape(*out.shape[1:]) if squeeze else out
