"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor


def numeric_grad(fn, tensors: list[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """d fn / d tensor by central differences; ``fn`` takes no arguments and returns a scalar Tensor."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = float(fn().data)
            flat[k] = orig - eps
            down = float(fn().data)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a|| + ||n||, floor)``.

    The floor keeps gradients that are identically zero (e.g. an attention
    key bias) from turning finite-difference roundoff into a huge ratio.
    """
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn, tensors: list[Tensor], eps: float = 1e-5) -> dict[str, float]:
    """Backprop once, compare with finite differences; returns per-tensor relative errors."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    fn().backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_grad(fn, tensors, eps)
    return {
        (t.name or f"arg{k}"): relative_error(a, n)
        for k, (t, a, n) in enumerate(zip(tensors, analytic, numeric))
    }
