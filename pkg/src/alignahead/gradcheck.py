"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_STEP = 1e-5


def numeric_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to ``tensor.values``."""
    base = tensor.values
    grad = np.zeros_like(base)
    with ad.no_grad():
        for idx in np.ndindex(base.shape):
            bumped = base.copy()
            bumped[idx] += h
            tensor.values = bumped
            up = loss_fn().item()
            bumped[idx] -= 2 * h
            down = loss_fn().item()
            grad[idx] = (up - down) / (2 * h)
    tensor.values = base
    return grad


def analytic_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    ad.backward(loss_fn())
    return [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in tensors]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max absolute difference scaled by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def max_relative_error(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = DEFAULT_STEP) -> float:
    analytic = analytic_gradients(loss_fn, tensors)
    return max(relative_error(a, numeric_gradient(loss_fn, t, h)) for a, t in zip(analytic, tensors))
