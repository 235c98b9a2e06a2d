"""Parameter updates."""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError


def sgd_step(weights, grads, lr, weight_decay=0.0, momentum=0.0, velocity=None):
    """In-place ``w <- w - lr * (grad + 2 * weight_decay * w)``.

    ``weights`` and ``grads`` are parallel sequences of Tensors and arrays.
    With ``momentum`` > 0 the step follows a heavy-ball velocity kept in the
    caller's ``velocity`` dict (keyed by tensor name, else identity).
    Nothing is modified if any gradient is non-finite.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if weight_decay < 0:
        raise ValueError("weight decay must be non-negative")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    if momentum and velocity is None:
        raise ValueError("momentum needs a velocity dict")
    bad = [getattr(w, "name", None) or str(i) for i, (w, g) in enumerate(zip(weights, grads))
           if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError("non-finite gradient, step aborted", {"tensors": bad})
    for w, g in zip(weights, grads):
        step = g + (2.0 * weight_decay) * w.data
        if momentum:
            key = getattr(w, "name", None) or id(w)
            step = velocity[key] = momentum * velocity.get(key, 0.0) + step
        w.data = w.data - lr * step
    return weights


class Adam:
    """Adam over plain numpy arrays, keyed by caller-supplied names."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, key, value, grad):
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite architecture gradient", {"key": key})
        m = self.m.get(key, np.zeros_like(grad))
        v = self.v.get(key, np.zeros_like(grad))
        t = self.t.get(key, 0) + 1
        m = self.b1 * m + (1 - self.b1) * grad
        v = self.b2 * v + (1 - self.b2) * grad * grad
        self.m[key], self.v[key], self.t[key] = m, v, t
        mhat = m / (1 - self.b1**t)
        vhat = v / (1 - self.b2**t)
        return value - self.lr * mhat / (np.sqrt(vhat) + self.eps)
