"""Nadam: Adam moments with a Nesterov lookahead on the first moment.

Update for step t (1-based), per parameter:

    m_t = b1*m + (1-b1)*g                 v_t = b2*v + (1-b2)*g^2
    m_hat = b1*m_t/(1-b1^(t+1)) + (1-b1)*g/(1-b1^t)
    v_hat = v_t/(1-b2^t)
    p   -= lr * m_hat / (sqrt(v_hat) + eps)

This is the schedule-free form of the optimizer (no momentum-decay
product); constants default to b1=0.9, b2=0.999, eps=1e-8.
"""

from __future__ import annotations

import numpy as np


class NonFiniteGradient(ArithmeticError):
    def __init__(self, param_name):
        self.param_name = param_name
        super().__init__(f"non-finite gradient for parameter {param_name!r}")


class Nadam:
    """Holds per-parameter moment buffers keyed like the parameter table."""

    def __init__(self, params, learning_rate=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        """Apply one update from the .grad of every parameter (missing grad
        counts as zero). A non-finite gradient aborts before touching any
        parameter."""
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(name)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c1_next = 1.0 - b1 ** (t + 1)
        c2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = (b1 / c1_next) * m + ((1.0 - b1) / c1) * g
            v_hat = v / c2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype,
                                                                             copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
