"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, no_grad


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5, index=None) -> np.ndarray:
    """d fn() / d x by central differences, optionally only at flat ``index`` entries."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(flat.size) if index is None else np.zeros(len(idx))
    with no_grad():
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            fp = fn().item()
            flat[i] = old - eps
            fm = fn().item()
            flat[i] = old
            out[k if index is not None else i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape) if index is None else out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(num / den)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Relative error between autodiff and finite differences for every input."""
    for t in inputs:
        t.grad = None
    fn().backward()
    errs = []
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errs.append(relative_error(analytic, numerical_grad(fn, t, eps)))
    return errs
