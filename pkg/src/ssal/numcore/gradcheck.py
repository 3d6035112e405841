"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the backward-pass gradient of ``f`` at ``x``
    and central differences, ``|a - n| / max(1e-8, |a| + |n|)``.

    ``f`` must rebuild its graph on every call; ``x`` should be float64.
    """
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    analytic = x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2 * eps)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))))
