"""AdamW with decoupled weight decay and a linear-warmup cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DiffTensor, ShapeError


def lr_schedule(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to zero at ``total_steps``.

    Steps past ``total_steps`` are clamped to the final value.
    """
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return peak_lr
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, DiffTensor], grads=None,
              lr: float | None = None, no_decay=()) -> None:
    """One AdamW update in place.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient are skipped. Names listed in ``no_decay`` skip weight decay.
    """
    state.step += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape, detail=name)
        m = state.m.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        vals = p.values.astype(np.float64)
        if state.weight_decay and name not in no_decay:
            vals *= 1.0 - lr * state.weight_decay
        vals -= lr * update
        p.values[...] = vals
