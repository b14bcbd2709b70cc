from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


def adam_step(params, grads, m, v, lr, beta1, beta2, eps, step):
    """One bias-corrected Adam update, in place on ``params``, ``m`` and ``v``.

    ``step`` is 1-based.  Returns the updated parameter arrays.
    """
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for p, g, mi, vi in zip(params, grads, m, v):
        if p.shape != g.shape or p.shape != mi.shape or p.shape != vi.shape:
            raise ValueError(f"adam_step: state shape mismatch {p.shape} vs {g.shape}")
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * (g * g)
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
    return params


class Adam:
    """Adam over a fixed list of ``Parameter`` objects.

    A step whose gradients contain NaN or Inf is skipped entirely and counted
    in ``rejected_steps``.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0
        self.rejected_steps = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, grad_scale: float = 1.0) -> bool:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad * grad_scale
                 for p in self.params]
        if not all(np.isfinite(g).all() for g in grads):
            self.rejected_steps += 1
            log.warning("non-finite gradient, step rejected (%d so far)", self.rejected_steps)
            return False
        self.step_count += 1
        adam_step([p.data for p in self.params], grads, self.m, self.v,
                  self.lr, self.beta1, self.beta2, self.eps, self.step_count)
        return True
