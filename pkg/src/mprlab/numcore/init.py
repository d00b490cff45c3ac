"""Parameter initializers."""
from __future__ import annotations

import numpy as np

from mprlab.numcore.tensor import Tensor


def orthogonal_init(rows: int, cols: int, gain: float = 1.0,
                    rng: np.random.Generator | None = None) -> Tensor:
    """(rows, cols) matrix whose smaller-side Gram matrix is ``gain**2 * I``."""
    if rows < 1 or cols < 1:
        raise ValueError(f"orthogonal_init needs rows, cols >= 1, got {rows}x{cols}")
    rng = np.random.default_rng() if rng is None else rng
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return Tensor(gain * q, requires_grad=True)


def zero_init(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def uniform_fan_in(rows: int, cols: int, rng: np.random.Generator) -> Tensor:
    bound = 1.0 / np.sqrt(rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)
