"""Central-difference verification of autodiff gradients (run at float64)."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .autograd import Tensor, no_grad


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _numeric(f: Callable[[], Tensor], t: Tensor, flat_idx: Iterable[int], eps: float) -> np.ndarray:
    view = t.data.reshape(-1)
    out = []
    with no_grad():
        for i in flat_idx:
            orig = view[i]
            view[i] = orig + eps
            fp = f().item()
            view[i] = orig - eps
            fm = f().item()
            view[i] = orig
            out.append((fp - fm) / (2 * eps))
    return np.array(out)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Worst relative error between autodiff and central differences of ``f`` at ``x``.

    ``f`` must return a scalar tensor; ``x`` must be float64.
    """
    if x.dtype != np.float64:
        raise TypeError(f"grad_check needs float64 input, got {x.dtype}")
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    analytic = x.grad.reshape(-1).copy() if x.grad is not None else np.zeros(x.size)
    x.grad = None
    numeric = _numeric(lambda: f(x), x, range(x.size), eps)
    return float(_rel_error(analytic, numeric).max()) if x.size else 0.0


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter worst relative error for a closure over fixed inputs.

    With ``max_entries`` only that many randomly chosen entries of each tensor are
    perturbed, which keeps whole-network checks cheap.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        if p.dtype != np.float64:
            raise TypeError("grad_check_params needs float64 parameters")
        p.grad = None
    loss_fn().backward()
    errors = {}
    for name, p in params.items():
        analytic = p.grad.reshape(-1).copy() if p.grad is not None else np.zeros(p.size)
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        else:
            idx = np.arange(p.size)
        numeric = _numeric(loss_fn, p, idx, eps)
        errors[name] = float(_rel_error(analytic[idx], numeric).max()) if len(idx) else 0.0
    for p in params.values():
        p.grad = None
    return errors
