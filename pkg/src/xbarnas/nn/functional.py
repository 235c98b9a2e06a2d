"""Differentiable layer primitives built on :mod:`xbarnas.nn.tensor`.

Convolution is im2col followed by one matrix multiply.  The im2col row
layout is (input channel, kernel row, kernel column), the same order used
when a flattened kernel is written down a crossbar column.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, record


def relu(x):
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def out_extent(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    """``x`` [B, C, H, W] -> patch matrix [B*Ho*Wo, C*k*k]."""
    b, c, h, w = x.shape
    ho, wo = out_extent(h, k, stride, pad), out_extent(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k), ho, wo


def col2im(cols, shape, k, stride, pad, ho, wo):
    b, c, h, w = shape
    cols = cols.reshape(b, ho, wo, c, k, k)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for ky in range(k):
        for kx in range(k):
            xp[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += (
                cols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            )
    if pad:
        xp = xp[:, :, pad:-pad, pad:-pad]
    return xp


def weight_matrix(w):
    """Kernel [O, C, k, k] flattened to the [C*k*k, O] column layout."""
    return w.reshape(w.shape[0], -1).T


def conv2d(x, w, stride=1, pad=None):
    """2-D cross-correlation, "same" padding for odd kernels by default."""
    w = as_tensor(w)
    o, c, k, _ = w.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"conv2d input {x.shape} does not match kernel {w.shape}")
    if pad is None:
        pad = (k - 1) // 2
    cols, ho, wo = im2col(x.data, k, stride, pad)
    wm = weight_matrix(w.data)
    b = x.shape[0]
    y = (cols @ wm).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (cols.T @ gm).T.reshape(w.shape) if w.requires_grad else None
        gx = col2im(gm @ wm.T, x.shape, k, stride, pad, ho, wo) if x.requires_grad else None
        return gx, gw

    return record(np.ascontiguousarray(y), (x, w), back)


def linear(x, w, b=None):
    """``x`` [B, I] @ ``w``.T with ``w`` [O, I]."""
    y = x @ as_tensor(w).T
    return y if b is None else y + b


def global_avg_pool(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).mean(axis=2)


def batch_norm(x, gamma, beta, state=None, train=True, momentum=0.1, eps=1e-5):
    """Per-channel normalisation of [B, C, H, W].

    ``state`` is a dict holding ``mean``/``var`` running estimates, updated in
    place in training mode and used in eval mode.
    """
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if train:
        m = x.data.size // c
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if state is not None:
            state["mean"] = (1 - momentum) * state["mean"] + momentum * mu
            unbiased = var * m / max(m - 1, 1)
            state["var"] = (1 - momentum) * state["var"] + momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
        y = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def back(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(shape)
                gx = (inv.reshape(shape) / m) * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
                )
            return gx, gg, gb

        return record(y, (x, gamma, beta), back)

    inv = 1.0 / np.sqrt(state["var"] + eps)
    scale = gamma.data * inv
    xhat = (x.data - state["mean"].reshape(shape)) * inv.reshape(shape)
    y = scale.reshape(shape) * (x.data - state["mean"].reshape(shape)) + beta.data.reshape(shape)

    def back_eval(g):
        return (
            g * scale.reshape(shape),
            (g * xhat).sum(axis=(0, 2, 3)),
            g.sum(axis=(0, 2, 3)),
        )

    return record(y, (x, gamma, beta), back_eval)


def log_softmax(logits):
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=1, keepdims=True),)

    return record(out, (logits,), back)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels``."""
    labels = np.asarray(labels)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return record(np.array(loss), (logits,), back)


def straight_through(x, value):
    """Forward ``value``, backward as identity onto ``x``.

    Used when a non-differentiable simulator replaces an ideal op's output.
    """
    value = np.asarray(value, dtype=np.float64)
    if value.shape != x.shape:
        raise ValueError(f"straight_through value {value.shape} != {x.shape}")
    return record(value, (x,), lambda g: (g,))


def gated_sum(gates, outputs):
    """``sum_i gates[i] * outputs[i]`` with gradients to gates and outputs.

    ``outputs`` entries may be None for a zero operator.
    """
    ref = next(o for o in outputs if o is not None)
    acc = np.zeros(ref.shape)
    for i, o in enumerate(outputs):
        if o is not None and gates.data[i] != 0.0:
            acc = acc + gates.data[i] * o.data
    parents = [gates] + [o for o in outputs if o is not None]

    def back(g):
        gg = np.array([0.0 if o is None else float(np.sum(g * o.data)) for o in outputs])
        go = [gates.data[i] * g for i, o in enumerate(outputs) if o is not None]
        return [gg] + go

    return record(acc, parents, back)


def l2_sum(tensors):
    total = None
    for t in tensors:
        term = (t * t).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)
