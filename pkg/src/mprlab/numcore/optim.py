"""AdamW with decoupled weight decay."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from mprlab.errors import NumericError
from mprlab.numcore.tensor import Tensor

log = logging.getLogger(__name__)


class AdamW:
    """Bias-corrected Adam followed by decoupled decay ``lr * wd * p``.

    ``on_nonfinite='skip'`` drops a step whose gradients are not finite and
    counts it in ``skipped`` instead of raising.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, on_nonfinite: str = "raise"):
        if on_nonfinite not in ("raise", "skip"):
            raise ValueError("on_nonfinite must be 'raise' or 'skip'")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.on_nonfinite = on_nonfinite
        self.step_count = 0
        self.skipped = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        """Apply one update; returns False when a non-finite step was skipped."""
        for p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                if self.on_nonfinite == "raise":
                    raise NumericError(f"non-finite gradient for parameter {p.name or p.shape}")
                self.skipped += 1
                log.warning("skipping optimizer step with non-finite gradient")
                return False
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        lr_t = self.lr * np.sqrt(c2) / c1
        eps_t = self.eps * np.sqrt(c2)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            # algebraically equal to (m/c1) / (sqrt(v/c2) + eps), fewer passes
            step = np.sqrt(v)
            step += eps_t
            step = m / step
            step *= lr_t
            if self.weight_decay:
                step += (self.lr * self.weight_decay) * p.data
            p.data = p.data - step
        return True
