"""``CTCK`` checkpoint files.

Layout (little-endian)::

    b"CTCK"  u32 version=1
    u32 config_len   config (UTF-8 JSON)
    u32 tensor_count
    per tensor: u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]  f32 data (row-major)

Tensors are the model parameters in registration order, then batch-norm
running statistics, then optimizer state (names prefixed ``optim.``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .autograd import DEFAULT_DTYPE
from .model import ConTNet, ModelConfig, build_network

MAGIC = b"CTCK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode(config: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    text = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    def need(off, n):
        if off + n > len(buf):
            raise CheckpointFormatError("truncated checkpoint")

    need(0, 12)
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, clen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    off = 12
    need(off, clen + 4)
    config = json.loads(buf[off : off + clen].decode("utf-8"))
    off += clen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = []
    for _ in range(count):
        need(off, 2)
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen + 1)
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        rank = buf[off]
        off += 1
        need(off, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        need(off, 4 * size)
        tensors.append((name, np.frombuffer(buf, "<f4", size, off).reshape(dims).copy()))
        off += 4 * size
    if off != len(buf):
        raise CheckpointFormatError(f"{len(buf) - off} trailing bytes")
    return config, tensors


def model_tensors(model: ConTNet) -> list[tuple[str, np.ndarray]]:
    return [(n, p.data) for n, p in model.named_parameters()] + list(model.named_buffers())


def save_checkpoint(path: Union[str, Path], model: ConTNet, optimizer=None, extra: Optional[dict] = None) -> None:
    config = {"model": model.cfg.to_dict()}
    if extra:
        config.update(extra)
    tensors = model_tensors(model)
    if optimizer is not None:
        tensors += [(f"optim.{k}", v) for k, v in optimizer.state_arrays()]
    Path(path).write_bytes(encode(config, tensors))


def load_checkpoint(path: Union[str, Path], dtype=DEFAULT_DTYPE, optimizer=None) -> tuple[ConTNet, dict]:
    """Rebuild the model described by the checkpoint and copy its arrays in."""
    config, tensors = decode(Path(path).read_bytes())
    if "model" not in config:
        raise CheckpointFormatError("checkpoint config has no model section")
    model = build_network(ModelConfig.from_dict(config["model"]), dtype=dtype)
    arrays = dict(tensors)
    params = dict(model.named_parameters())
    buffers = {}
    for prefix, mod in model.named_modules():
        for bname in mod._buffers:
            buffers[f"{prefix}.{bname}" if prefix else bname] = (mod, bname)
    for name, p in params.items():
        if name not in arrays:
            raise CheckpointFormatError(f"missing tensor {name}")
        if arrays[name].shape != p.shape:
            raise CheckpointFormatError(f"{name}: shape {arrays[name].shape} != model {p.shape}")
        p.data = arrays[name].astype(dtype)
    for name, (mod, bname) in buffers.items():
        if name not in arrays:
            raise CheckpointFormatError(f"missing buffer {name}")
        mod.set_buffer(bname, arrays[name])
    known = set(params) | set(buffers)
    optim = [(k[len("optim."):], v) for k, v in tensors if k.startswith("optim.")]
    stray = [k for k, _ in tensors if k not in known and not k.startswith("optim.")]
    if stray:
        raise CheckpointFormatError(f"unknown tensors in checkpoint: {stray[:5]}")
    if optimizer is not None and optim:
        optimizer.load_state_arrays(optim)
    return model, config
