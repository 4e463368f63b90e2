"""Central finite-difference oracle for reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor, backward, no_grad


def numeric_grad(fn, arrays: list, step: float = 1e-5) -> list:
    """d fn / d arrays by central differences.  ``fn`` maps arrays -> float."""
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = fn(arrays)
            flat[j] = orig - step
            fm = fn(arrays)
            flat[j] = orig
            gf[j] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_grad(fn, arrays: list, step: float = 1e-5) -> float:
    """Max relative error between backprop and finite differences.

    ``fn`` takes a list of Tensors and returns a scalar Tensor; it is run
    in float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(leaves)
    backward(loss)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]

    def scalar(arrs):
        with no_grad():
            return float(fn([Tensor(a) for a in arrs]).data)

    numeric = numeric_grad(scalar, arrays, step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
