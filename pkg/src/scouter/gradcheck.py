"""Central finite-difference checks for analytic gradients."""
from __future__ import annotations

from typing import Callable, Dict, Mapping

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``tensor``.

    ``fn`` must rebuild its graph on each call and be deterministic.
    """
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn().item()
        flat[i] = orig - step
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(np.asarray(analytic, dtype=np.float64) - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if den == 0 else float(num / den)


def check_gradients(
    fn: Callable[[], Tensor], tensors: Mapping[str, Tensor], step: float = 1e-5
) -> Dict[str, float]:
    """Relative error between backprop and finite differences for each named tensor."""
    for t in tensors.values():
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    return {k: relative_error(analytic[k], numerical_gradient(fn, t, step)) for k, t in tensors.items()}
