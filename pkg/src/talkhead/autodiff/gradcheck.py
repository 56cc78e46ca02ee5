from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NonFiniteError
from .tensor import Tensor, backward, get_tape, no_grad


def analytic_grad(f: Callable[[Tensor], Tensor], point) -> np.ndarray:
    get_tape().clear()
    x = Tensor(point, requires_grad=True)
    loss = f(x)
    backward(loss)
    return x.grad


def numeric_grad(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> np.ndarray:
    x0 = np.array(point, dtype=np.float64)
    out = np.zeros_like(x0)
    flat = out.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = xp.copy()
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"gradient_check: non-finite evaluation at coordinate {i}")
            flat[i] = (fp - fm) / (2.0 * h)
    return out


def gradient_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if h <= 0:
        raise ValueError("gradient_check: h must be positive")
    a = analytic_grad(f, point)
    n = numeric_grad(f, point, h)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))
