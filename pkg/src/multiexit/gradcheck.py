"""Finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-3,
               dtype=np.float64, analytic_dtype=None) -> float:
    """Compare analytic gradients of a scalar closure with central differences.

    ``fn`` takes no arguments and must read ``inputs`` (typically module
    parameters and an input batch) by reference. While checking, each input's
    data is swapped for a ``dtype`` copy so the whole forward pass reruns at
    that precision; original data and gradients are restored afterwards.

    ``analytic_dtype`` (default: ``dtype``) sets the precision of the backward
    pass, so float32 gradients can be judged against float64 differences.

    Returns:
        max over all elements of ``|a - f| / max(|a|, |f|, 1e-8)``.
    """
    saved = [(t.data, t.grad) for t in inputs]
    analytic_dtype = analytic_dtype or dtype
    try:
        for t in inputs:
            t.data = t.data.astype(analytic_dtype, copy=True)
            t.grad = None
        loss = fn()
        if loss.data.size != 1:
            raise ValueError(f"grad_check needs a scalar closure, got shape {loss.shape}")
        loss.backward()
        grads = [t.grad.astype(np.float64) if t.grad is not None else None for t in inputs]
        for t, (d, _) in zip(inputs, saved):
            t.data = d.astype(dtype, copy=True)
        worst = 0.0
        for t, g in zip(inputs, grads):
            analytic = g if g is not None else np.zeros(t.data.shape)
            numeric = np.zeros_like(t.data)
            flat, nflat = t.data.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = float(fn().data)
                flat[i] = orig - step
                down = float(fn().data)
                flat[i] = orig
                nflat[i] = (up - down) / (2 * step)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
        return worst
    finally:
        for t, (d, g) in zip(inputs, saved):
            t.data, t.grad = d, g
