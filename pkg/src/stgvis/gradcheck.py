"""Central finite-difference gradient checking for tape-recorded functions."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, sum_


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d x by central differences; ``fn`` must read ``x.data`` afresh."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(fn().data.sum())
        flat[i] = old - h
        fm = float(fn().data.sum())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
        if out.size != 1:
            out = sum_(out)
    tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(|a|, |b|, 1e-8) over the whole array."""
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients."""
    analytic = analytic_grads(fn, inputs)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        gn = numerical_grad(fn, t, h)
        worst = max(worst, relative_error(ga, gn))
    return worst
