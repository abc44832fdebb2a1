"""Feature-map <-> patch-sequence conversion and positional encodings.

A feature map (N, C, H, W) is cut into non-overlapping P x P tiles; each tile
becomes a sequence of P*P pixels (row-major inside the tile) with C channels.
One weight-shared encoder runs on every sequence and the results are stitched
back, so the encoder behaves like a kernel whose size and stride are both P.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .autograd import DEFAULT_DTYPE, ShapeError, Tensor
from .module import Module, Parameter, trunc_normal

PE_KINDS = ("none", "learnable_1d", "learnable_2d", "relative")
PE_PLACEMENTS = ("patch_wise", "image_wise")


@dataclass
class PatchGrid:
    """Patches of a feature map: ``grid`` has shape (N, H_p, W_p, P*P, C)."""

    grid: Tensor
    patch_size: int
    origin_shape: tuple[int, int]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.grid.shape[1], self.grid.shape[2]

    def sequences(self) -> Tensor:
        """All patch sequences stacked as (N * H_p * W_p, P*P, C)."""
        n, hp, wp, l, c = self.grid.shape
        return self.grid.reshape(n * hp * wp, l, c)

    def with_sequences(self, seqs: Tensor) -> "PatchGrid":
        n, hp, wp = self.grid.shape[:3]
        return PatchGrid(seqs.reshape(n, hp, wp, seqs.shape[-2], seqs.shape[-1]), self.patch_size, self.origin_shape)


def effective_patch(p: int, h: int, w: int) -> int:
    """Requested patch size clamped to the map (a whole-map patch is the limit)."""
    return min(p, h, w)


def check_divisible(h: int, w: int, p: int, where: str = "") -> None:
    if h % p or w % p:
        loc = f"{where}: " if where else ""
        raise ShapeError(f"{loc}feature map {h}x{w} is not divisible by patch size {p}")


def split_patches(x: Tensor, p: int) -> PatchGrid:
    n, c, h, w = x.shape
    check_divisible(h, w, p)
    hp, wp = h // p, w // p
    g = x.reshape(n, c, hp, p, wp, p).transpose(0, 2, 4, 3, 5, 1).reshape(n, hp, wp, p * p, c)
    return PatchGrid(g, p, (h, w))


def merge_patches(g: PatchGrid) -> Tensor:
    n, hp, wp, l, c = g.grid.shape
    p = g.patch_size
    if l != p * p or (hp * p, wp * p) != tuple(g.origin_shape):
        raise ShapeError(f"malformed patch grid {g.grid.shape} for patch size {p} and map {g.origin_shape}")
    return g.grid.reshape(n, hp, wp, p, p, c).transpose(0, 5, 1, 3, 2, 4).reshape(n, c, hp * p, wp * p)


def _row_col_selectors(h: int, w: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """One-hot (h*w, h) and (h*w, w) matrices picking the row / column of each flat position."""
    pos = np.arange(h * w)
    rows = np.zeros((h * w, h), dtype=dtype)
    rows[pos, pos // w] = 1
    cols = np.zeros((h * w, w), dtype=dtype)
    cols[pos, pos % w] = 1
    return rows, cols


class PositionalEncoding(Module):
    """Learnable position information for one encoder.

    kinds:
        ``none``          contributes nothing.
        ``learnable_1d``  one (L, C) table over the flattened positions.
        ``learnable_2d``  row table (h, C) plus column table (w, C) summed per pixel;
                          with ``factorized=False`` a full (h, w, C) table instead.
        ``relative``      per-head key-offset embeddings (heads, 2*max_dist + 1, D_h)
                          that enter the attention logits; nothing is added to the input.

    ``placement`` is ``patch_wise`` (one table shared by every patch, extents P x P)
    or ``image_wise`` (one table spanning the whole map, extents H x W).
    """

    def __init__(self, kind: str, channels: int, patch_size: int, placement: str = "patch_wise",
                 map_size: Optional[tuple[int, int]] = None, factorized: bool = True, heads: int = 1,
                 head_dim: Optional[int] = None, max_distance: Optional[int] = None,
                 init: str = "trunc_normal", rng=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        if kind not in PE_KINDS:
            raise ValueError(f"unknown positional encoding kind {kind!r}")
        if placement not in PE_PLACEMENTS:
            raise ValueError(f"unknown positional encoding placement {placement!r}")
        if kind == "relative" and placement != "patch_wise":
            raise ValueError("relative encoding only exists inside patch-wise attention")
        if placement == "image_wise" and map_size is None:
            raise ValueError("image-wise placement needs the feature-map size")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind, self.placement, self.channels = kind, placement, channels
        self.patch_size, self.factorized = patch_size, factorized
        self.extent = tuple(map_size) if placement == "image_wise" else (patch_size, patch_size)
        h, w = self.extent

        def draw(shape):
            return np.zeros(shape) if init == "zeros" else trunc_normal(rng, shape)

        if kind == "learnable_1d":
            self.table = Parameter(draw((h * w, channels)), group="ste", kind="pe", dtype=dtype)
        elif kind == "learnable_2d" and factorized:
            self.row = Parameter(draw((h, channels)), group="ste", kind="pe", dtype=dtype)
            self.col = Parameter(draw((w, channels)), group="ste", kind="pe", dtype=dtype)
            rows, cols = _row_col_selectors(h, w, dtype)
            self._rows, self._cols = Tensor(rows), Tensor(cols)
        elif kind == "learnable_2d":
            self.table = Parameter(draw((h, w, channels)), group="ste", kind="pe", dtype=dtype)
        elif kind == "relative":
            length = patch_size * patch_size
            self.max_distance = length - 1 if max_distance is None else int(max_distance)
            head_dim = head_dim if head_dim is not None else channels // heads
            self.rel_table = Parameter(draw((heads, 2 * self.max_distance + 1, head_dim)),
                                       group="ste", kind="pe", dtype=dtype)

    @property
    def additive(self) -> bool:
        return self.kind in ("learnable_1d", "learnable_2d")

    def table_tensor(self) -> Tensor:
        """The additive offsets as an (h*w, C) tensor, flattened row-major."""
        h, w = self.extent
        if self.kind == "learnable_1d":
            return self.table
        if self.kind == "learnable_2d" and self.factorized:
            rows = self._rows.astype(self.row.dtype) if self._rows.dtype != self.row.dtype else self._rows
            cols = self._cols.astype(self.col.dtype) if self._cols.dtype != self.col.dtype else self._cols
            return ops.matmul(rows, self.row) + ops.matmul(cols, self.col)
        if self.kind == "learnable_2d":
            return self.table.reshape(h * w, self.channels)
        raise ValueError(f"{self.kind} encoding has no additive table")

    def relative_index(self, length: int) -> np.ndarray:
        """(L, L) indices into the relative table for offsets j - i, clipped to +-max_distance."""
        off = np.arange(length)[None, :] - np.arange(length)[:, None]
        return np.clip(off, -self.max_distance, self.max_distance) + self.max_distance


def add_positional_encoding(g: PatchGrid, pe: Optional[PositionalEncoding]) -> PatchGrid:
    """Add positional offsets to every patch sequence of ``g``.

    Patch-wise tables are shared by all (m, n) grid positions; image-wise tables are
    cut into the same tiles as the map, which equals adding them before splitting.
    """
    if pe is None or pe.kind == "none":
        return g
    if pe.kind == "relative":
        raise ValueError("relative encoding is applied inside attention, not added to the input")
    p = g.patch_size
    n, hp, wp, l, c = g.grid.shape
    if c != pe.channels:
        raise ShapeError(f"encoding has {pe.channels} channels but grid has {c}")
    table = pe.table_tensor()
    if pe.placement == "patch_wise":
        if pe.extent != (p, p):
            raise ShapeError(f"patch-wise encoding for P={pe.extent[0]} applied to patches of size {p}")
        return PatchGrid(g.grid + table, p, g.origin_shape)
    h, w = g.origin_shape
    if pe.extent != (h, w):
        raise ShapeError(f"image-wise encoding spans {pe.extent} but the map is {h}x{w}")
    tiled = table.reshape(hp, p, wp, p, c).transpose(0, 2, 1, 3, 4).reshape(hp, wp, p * p, c)
    return PatchGrid(g.grid + tiled, p, g.origin_shape)


def apply_ste_patchwise(x: Tensor, ste, p: int, where: str = "") -> Tensor:
    """Run one shared encoder over every P x P tile of ``x``; output has the input's shape.

    ``p`` is clamped to the map size first; ``ste`` must provide ``pe`` and
    ``encode(seqs)`` (see :class:`contnet.transformer.STE`).
    """
    n, c, h, w = x.shape
    pe_eff = effective_patch(p, h, w)
    check_divisible(h, w, pe_eff, where)
    grid = split_patches(x, pe_eff)
    if ste.pe is not None and ste.pe.additive:
        grid = add_positional_encoding(grid, ste.pe)
    out = ste.encode(grid.sequences())
    return merge_patches(grid.with_sequences(out))
