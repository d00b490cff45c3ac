"""Central finite-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mprlab.numcore.tensor import Tape, Tensor


def numerical_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = 1e-5) -> list[np.ndarray]:
    """Perturb every element of every parameter in place and difference the loss."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().data)
            flat[i] = old - h
            down = float(loss_fn().data)
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = 1e-5, floor: float = 1e-8) -> float:
    """Largest relative error over all parameters.

    Deep graphs contain structurally zero gradients (a key bias under softmax
    shift invariance), where central differences return pure roundoff of
    order eps*|loss|/h.  Raise ``floor`` above that level for such graphs.
    """
    a = analytic_grads(loss_fn, params)
    n = numerical_grads(loss_fn, params, h)
    return max(relative_error(x, y, floor) for x, y in zip(a, n))
