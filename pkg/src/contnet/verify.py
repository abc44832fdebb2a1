"""The float64 finite-difference suite over every primitive and a tiny end-to-end network."""

from __future__ import annotations

import time
from typing import Callable, Optional

import numpy as np

from . import functional as F
from . import ops
from .autograd import Tensor
from .gradcheck import grad_check, grad_check_params
from .model import ModelConfig, StageSpec, build_network
from .patching import merge_patches, split_patches
from .train import label_smoothing_ce
from .transformer import STE, FeedForward, MultiHeadSelfAttention, single_head_attention

TOLERANCE = 1e-4


def gradcheck_config(**overrides) -> ModelConfig:
    """Network small enough for per-entry finite differences: widths <= 16, P <= 4, 64x64 input.

    Q/K/V biases are off because the key bias has an identically zero gradient
    (softmax ignores per-row shifts), which a relative error cannot measure.
    """
    base = dict(
        variant="custom",
        stages=[StageSpec(D=d, D_ffn=2 * d, H=h, blocks=1, patch_schedule=[(2, 4)])
                for d, h in zip([4, 8, 12, 16], [1, 2, 2, 4])],
        num_classes=3,
        input_size=(64, 64),
        widen_last_stage=False,
        qkv_bias=False,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _weighted(fn: Callable[[Tensor], Tensor], out_shape, rng) -> Callable[[Tensor], Tensor]:
    # a random projection keeps sums like softmax rows from having zero gradient
    w = Tensor(rng.standard_normal(out_shape))
    return lambda x: ops.sum(ops.mul(fn(x), w))


def op_checks(seed: int = 0) -> dict[str, float]:
    """Worst relative error per primitive, each on random float64 inputs."""
    rng = np.random.default_rng(seed)

    def rand(*shape):
        return Tensor(rng.standard_normal(shape), dtype=np.float64)

    def check(name, fn, x, out_shape):
        results[name] = grad_check(_weighted(fn, out_shape, rng), x)

    results: dict[str, float] = {}
    b = rand(3, 4)
    check("add", lambda x: x + b, rand(3, 4), (3, 4))
    row = rand(4)
    check("add_broadcast", lambda x: ops.add(x, row), rand(2, 3, 4), (2, 3, 4))
    check("mul", lambda x: ops.mul(x, b), rand(3, 4), (3, 4))
    m2, m3 = rand(4, 5), rand(2, 4, 3)
    check("matmul", lambda x: ops.matmul(x, m2), rand(3, 4), (3, 5))
    check("matmul_batched", lambda x: ops.matmul(x, m3), rand(2, 3, 4), (2, 3, 3))
    check("sum_axis", lambda x: ops.sum(x, axis=1), rand(2, 3, 4), (2, 4))
    check("mean_axis", lambda x: ops.mean(x, axis=(0, 2)), rand(2, 3, 4), (3,))
    check("reshape", lambda x: ops.reshape(x, (4, 6)), rand(2, 3, 4), (4, 6))
    check("transpose", lambda x: ops.transpose(x, (2, 0, 1)), rand(2, 3, 4), (4, 2, 3))
    check("relu", ops.relu, rand(3, 5), (3, 5))
    check("softmax", lambda x: ops.softmax(x, axis=-1), rand(3, 5), (3, 5))
    check("log_softmax", lambda x: ops.log_softmax(x, axis=0), rand(3, 5), (3, 5))
    g, bb = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
    check("layer_norm", lambda x: ops.layer_norm(x, g, bb), rand(2, 3, 6), (2, 3, 6))
    idx = rng.integers(0, 7, size=(4, 4))
    check("gather_last", lambda x: ops.gather_last(x, idx), rand(2, 4, 7), (2, 4, 4))

    w = Tensor(rng.standard_normal((4, 2, 3, 3)))
    check("conv2d_input", lambda x: F.conv2d(x, w, None, 1, 1, groups=2), rand(2, 4, 5, 5), (2, 4, 5, 5))
    xin = rand(2, 4, 6, 6)
    wt = rand(6, 4, 3, 3)
    results["conv2d_weight"] = grad_check(_weighted(lambda t: F.conv2d(xin, t, None, 2, 1), (2, 6, 3, 3), rng), wt)
    bias = rand(6)
    results["conv2d_bias"] = grad_check(
        _weighted(lambda t: F.conv2d(xin, Tensor(wt.data), t, 1, 0), (2, 6, 4, 4), rng), bias)
    wd = rand(3, 1, 3, 3)
    check("conv2d_depthwise", lambda x: F.conv2d(x, wd, None, 1, 1, groups=3), rand(1, 3, 4, 4), (1, 3, 4, 4))
    check("max_pool", lambda x: F.pool2d(x, "max", 3, 2, 1), rand(2, 2, 6, 6), (2, 2, 3, 3))
    check("avg_pool", lambda x: F.pool2d(x, "avg", 3, 2, 1), rand(2, 2, 6, 6), (2, 2, 3, 3))
    check("global_avg_pool", F.global_avg_pool, rand(2, 3, 4, 4), (2, 3))
    gain, shift = Tensor(rng.uniform(0.5, 1.5, 3)), Tensor(rng.standard_normal(3))
    rm, rv = np.zeros(3), np.ones(3)
    check("batch_norm_train",
          lambda x: F.batch_norm(x, gain, shift, rm.copy(), rv.copy(), training=True), rand(4, 3, 3, 3),
          (4, 3, 3, 3))
    check("batch_norm_infer",
          lambda x: F.batch_norm(x, gain, shift, rm + 0.3, rv * 2.0, training=False), rand(2, 3, 3, 3),
          (2, 3, 3, 3))
    lw, lb = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal(4))
    check("linear", lambda x: F.linear(x, lw, lb), rand(2, 3, 5), (2, 3, 4))
    check("split_merge", lambda x: merge_patches(split_patches(x, 2)), rand(1, 2, 4, 4), (1, 2, 4, 4))
    check("split_patches", lambda x: split_patches(x, 2).grid, rand(1, 2, 4, 4), (1, 2, 2, 4, 2))

    wq, wk, wv = (Tensor(rng.standard_normal((6, 3)) * 0.5) for _ in range(3))
    check("attention", lambda x: single_head_attention(x, wq, wk, wv), rand(5, 6), (5, 3))
    rel = Tensor(rng.standard_normal((9, 3)) * 0.5)
    ridx = np.clip(np.arange(5)[None, :] - np.arange(5)[:, None], -4, 4) + 4
    check("attention_relative", lambda x: single_head_attention(x, wq, wk, wv, rel, ridx), rand(5, 6), (5, 3))

    mods = _float64_modules(rng)
    check("mhsa", mods["mhsa"], rand(4, 8), (4, 8))
    check("ffn", mods["ffn"], rand(4, 8), (4, 8))
    check("ste", mods["ste"], rand(4, 4), (4, 4))
    check("ste_relative", mods["ste_relative"], rand(4, 4), (4, 4))
    labels = rng.integers(0, 4, size=3)
    results["label_smoothing_ce"] = grad_check(lambda x: label_smoothing_ce(x, labels, 0.1), rand(3, 4))
    return results


def _float64_modules(rng) -> dict[str, Callable[[Tensor], Tensor]]:
    mhsa = MultiHeadSelfAttention(8, 8, 2, rng=rng, dtype=np.float64)
    ffn = FeedForward(8, 16, rng=rng, dtype=np.float64)
    ste = STE(4, 4, 8, 2, patch_size=2, rng=rng, dtype=np.float64)
    rel = STE(4, 4, 8, 2, patch_size=2, pe_kind="relative", rng=rng, dtype=np.float64)
    for m in (mhsa, ffn, ste, rel):
        # move the default gains/biases and small initial weights away from trivial values
        for p in m.parameters():
            p.data = p.data + rng.normal(0, 0.3, p.shape)
    return {"mhsa": lambda x: mhsa(x.reshape(1, *x.shape)), "ffn": ffn, "ste": ste, "ste_relative": rel}


def network_check(cfg: Optional[ModelConfig] = None, seed: int = 0, batch: int = 2,
                  max_entries: int = 4) -> dict[str, float]:
    """Finite differences through a whole network, per parameter tensor.

    Batch norm runs in inference mode on random running statistics: in training
    mode a bias feeding a 1x1 conv and batch norm has an exactly zero gradient.
    Up to ``max_entries`` entries of each parameter are perturbed; the input image
    gradient is checked too.
    """
    cfg = cfg or gradcheck_config()
    model = build_network(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters():
        # check at a generic point: the 0.02-std init leaves attention gradients near round-off
        p.data = p.data + rng.normal(0, 0.2, p.shape)
    for _, mod in model.named_modules():
        for name, val in list(mod._buffers.items()):
            stat = rng.normal(0, 0.2, val.shape) if "mean" in name else rng.uniform(0.5, 2.0, val.shape)
            mod.set_buffer(name, stat)
    model.eval()
    h, w = cfg.input_size
    x = Tensor(rng.standard_normal((batch, cfg.in_channels, h, w)), requires_grad=True)
    labels = rng.integers(0, cfg.num_classes, size=batch)

    def loss():
        return label_smoothing_ce(model(x), labels, 0.1)

    params = dict(model.named_parameters())
    params["input"] = x
    return grad_check_params(loss, params, max_entries=max_entries, seed=seed)


def gradient_suite(cfg: Optional[ModelConfig] = None, seed: int = 0, max_entries: int = 4) -> dict:
    """Run both halves; returns ``{"ops", "network", "worst", "seconds", "passed"}``."""
    start = time.perf_counter()
    op_err = op_checks(seed)
    net_err = network_check(cfg, seed=seed, max_entries=max_entries)
    worst = max(max(op_err.values()), max(net_err.values()))
    return {
        "ops": op_err,
        "network": net_err,
        "worst": worst,
        "seconds": time.perf_counter() - start,
        "passed": worst < TOLERANCE,
    }
