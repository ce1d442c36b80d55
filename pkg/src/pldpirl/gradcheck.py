"""Central finite-difference oracle for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Sequence

import numpy as np

from .tensor import RankError, Tensor, backward


# Below this magnitude a gradient entry is compared absolutely. Central
# differences at eps=1e-5 carry roundoff of about 2e-11 * |f|, which would
# swamp the relative error of a tiny entry, so the floor grows with |f|.
REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 1.0) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, REL_FLOOR * max(1, scale)).

    ``scale`` is the magnitude of the function value being differenced.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    floor = REL_FLOOR * max(1.0, abs(float(scale)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise RankError(f"finite-difference target must be scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def numeric_grad(f: Callable[[], Tensor], x: Tensor, eps: float) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = _scalar(f())
        flat[i] = orig - eps
        lo = _scalar(f())
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x.shape)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``x``."""
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    value = _scalar(out)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    numeric = numeric_grad(lambda: f(x), x, eps)
    return relative_error(analytic, numeric, value)


def check_params(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5
) -> Dict[str, float]:
    """Gradient check of a closure against each tensor in ``params``.

    Returns a mapping from parameter name (or position) to max relative error.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = loss_fn()
    value = _scalar(out)
    backward(out)
    report = {}
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(loss_fn, p, eps)
        report[p.name or str(i)] = relative_error(analytic, numeric, value)
    return report


def check_many(loss_fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error of ``loss_fn(*inputs)`` over all ``inputs``."""
    for t in inputs:
        t.requires_grad = True
    errs: List[float] = list(check_params(lambda: loss_fn(*inputs), inputs, eps).values())
    return max(errs) if errs else 0.0
