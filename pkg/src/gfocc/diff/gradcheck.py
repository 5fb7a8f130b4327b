"""Central finite-difference gradient checks against the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import DiffTensor, Tape, backward


def numeric_grad(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. the array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn()
        flat[i] = old - eps
        fm = fn()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def analytic_grads(loss_fn: Callable[[], DiffTensor], params: Sequence[DiffTensor]):
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-9) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(loss_fn: Callable[[], DiffTensor], params: Sequence[DiffTensor],
                    eps: float = 1e-5, floor: float = 1e-9, atol: float = 0.0) -> float:
    """Worst relative error between tape gradients and central differences.

    Elements whose absolute discrepancy is below ``atol`` count as exact;
    this absorbs cancellation noise on gradients that are essentially zero.
    """
    ana = analytic_grads(loss_fn, params)
    worst = 0.0
    for p, ga in zip(params, ana):
        gn = numeric_grad(lambda: float(loss_fn().values.sum()), p.values, eps)
        diff = np.abs(ga - gn)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), floor)
        rel = np.where(diff <= atol, 0.0, diff / denom)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
