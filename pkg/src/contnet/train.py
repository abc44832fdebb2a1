"""Desk-scale training and evaluation.

Two recipes mirror the ImageNet settings at toy scale: SGD with momentum 0.9,
weight decay 5e-5 and split learning rates (0.2 for convolutions, 0.005 for
encoders), or AdamW at 5e-4 with weight decay 0.05. Both use a cosine schedule
and label smoothing of 0.1.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import ops
from .autograd import Tensor, no_grad
from .data import Dataset
from .module import Module, ParameterStore

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class MissingGradientError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr_conv: float = 0.2
    lr_ste: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-5
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    steps: Optional[int] = None
    epochs: int = 1
    batch_size: int = 32
    label_smooth_eps: float = 0.1
    seed: int = 0
    schedule: str = "cosine"
    dtype: str = "float32"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_conv < 0 or self.lr_ste < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 <= self.label_smooth_eps < 1:
            raise ValueError("label_smooth_eps must lie in [0, 1)")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.betas = tuple(self.betas)

    @classmethod
    def sgd(cls, **kw) -> "TrainConfig":
        return cls(**{"optimizer": "sgd", "lr_conv": 0.2, "lr_ste": 0.005, "momentum": 0.9,
                      "weight_decay": 5e-5, **kw})

    @classmethod
    def adamw(cls, **kw) -> "TrainConfig":
        return cls(**{"optimizer": "adamw", "lr_conv": 5e-4, "lr_ste": 5e-4, "weight_decay": 0.05, **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """0.5 * base_lr * (1 + cos(pi * step / total_steps))."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def label_smoothing_ce(logits: Tensor, labels, eps: float = 0.1) -> Tensor:
    """Mean cross-entropy against the target ``(1 - eps) * onehot + eps / K``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or (n and (labels.min() < 0 or labels.max() >= k)):
        raise ValueError(f"labels must be {n} integers in [0, {k})")
    target = np.full((n, k), eps / k, dtype=logits.dtype)
    target[np.arange(n), labels] += 1.0 - eps
    logp = ops.log_softmax(logits, axis=-1)
    return ops.sum(ops.mul(logp, Tensor(target))) * (-1.0 / n)


class Optimizer:
    """SGD-with-momentum or AdamW over a :class:`ParameterStore` with per-group learning rates.

    Weight decay only touches ``weight``-kind parameters (not biases, norms or
    position tables). SGD adds it to the gradient; AdamW applies it decoupled.
    """

    def __init__(self, store: ParameterStore, cfg: TrainConfig, total_steps: int):
        self.store, self.cfg, self.total_steps = store, cfg, total_steps
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def lr(self, group: str, step: int) -> float:
        base = self.cfg.lr_conv if group == "conv" else self.cfg.lr_ste
        if self.cfg.schedule == "constant":
            return base
        return cosine_lr(min(step, self.total_steps), self.total_steps, base)

    def step(self, step: int) -> None:
        cfg = self.cfg
        self.t += 1
        for name, p in self.store:
            if p.grad is None:
                raise MissingGradientError(f"parameter {name} has no gradient")
            lr = self.lr(p.group, step)
            g = p.grad
            wd = cfg.weight_decay if p.kind == "weight" else 0.0
            st = self.state.setdefault(name, {})
            if cfg.optimizer == "sgd":
                if wd:
                    g = g + wd * p.data
                if cfg.momentum:
                    buf = st.get("velocity")
                    buf = g.copy() if buf is None else cfg.momentum * buf + g
                    st["velocity"] = buf
                    g = buf
                p.data = p.data - lr * g
            else:
                b1, b2 = cfg.betas
                m = st.get("m", np.zeros_like(p.data))
                v = st.get("v", np.zeros_like(p.data))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                st["m"], st["v"] = m, v
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                data = p.data * (1 - lr * wd) if wd else p.data
                p.data = data - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            p.grad = None

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("t", np.array(self.t, dtype=np.float32))]
        for name, st in self.state.items():
            for key in sorted(st):
                out.append((f"{key}.{name}", st[key]))
        return out

    def load_state_arrays(self, arrays) -> None:
        for key, arr in arrays:
            if key == "t":
                self.t = int(arr)
                continue
            slot, name = key.split(".", 1)
            self.state.setdefault(name, {})[slot] = arr.astype(self.store[name].dtype)


def optimizer_step(opt: Optimizer, step: int) -> None:
    opt.step(step)


def _batches(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    bs = min(batch_size, count)
    for start in range(0, count - bs + 1, bs):
        yield order[start : start + bs]


def train(model: Module, dataset: Dataset, cfg: TrainConfig, checkpoint_path=None) -> dict:
    """Seeded mini-batch training.

    Runs ``cfg.steps`` optimizer steps (or ``cfg.epochs`` passes when ``steps`` is
    unset); incomplete trailing batches are dropped. Returns the per-step loss and
    learning rates and the per-epoch accuracy over the batches seen.
    """
    dtype = np.dtype(cfg.dtype)
    model.to(dtype)
    model.train()
    store = model.parameter_store()
    per_epoch = max(1, len(dataset) // min(cfg.batch_size, len(dataset)))
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    opt = Optimizer(store, cfg, total)
    rng = np.random.default_rng(cfg.seed)
    history = {"loss": [], "lr_conv": [], "lr_ste": [], "epoch_accuracy": []}
    step = 0
    while step < total:
        correct = seen = 0
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            if step >= total:
                break
            x = Tensor(dataset.images(dtype, idx))
            y = dataset.labels[idx]
            logits = model(x)
            loss = label_smoothing_ce(logits, y, cfg.label_smooth_eps)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at step {step} "
                                       f"(lr_conv={opt.lr('conv', step):.3g}, lr_ste={opt.lr('ste', step):.3g})")
            store.zero_grad()
            loss.backward()
            history["lr_conv"].append(opt.lr("conv", step))
            history["lr_ste"].append(opt.lr("ste", step))
            with no_grad():
                opt.step(step)
            history["loss"].append(value)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
            step += 1
        history["epoch_accuracy"].append(correct / max(seen, 1))
        logger.info("step %d loss %.4f acc %.3f", step, history["loss"][-1], history["epoch_accuracy"][-1])
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(checkpoint_path, model, opt, extra={"train": cfg.to_dict()})
    history["optimizer"] = opt
    return history


def predict(model: Module, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    dtype = model.parameters()[0].dtype
    out = []
    try:
        with no_grad():
            for start in range(0, len(dataset), batch_size):
                idx = np.arange(start, min(start + batch_size, len(dataset)))
                out.append(model(Tensor(dataset.images(dtype, idx))).data.argmax(axis=1))
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def top1_accuracy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    return int((np.asarray(logits).argmax(axis=1) == labels).sum()) / max(len(labels), 1)


def evaluate(model: Module, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy with inference-mode batch norm."""
    preds = predict(model, dataset, batch_size)
    return int((preds == dataset.labels).sum()) / max(len(dataset), 1)


def load_train_config(path) -> TrainConfig:
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))
