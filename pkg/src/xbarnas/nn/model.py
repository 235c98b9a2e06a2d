"""Parameters and forward pass for a fixed (compact) network."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import functional as F
from .netspec import BlockItem, ConvItem, LinearItem
from .tensor import Tape, Tensor


class Weights:
    """Trainable tensors plus non-trainable batch-norm running statistics."""

    def __init__(self, params=None, buffers=None):
        self.params = dict(params or {})
        self.buffers = dict(buffers or {})

    def __getitem__(self, key):
        return self.params[key]

    def bn_state(self, name):
        return self.buffers.setdefault(name, {"mean": None, "var": None})

    def trainable(self):
        return [self.params[k] for k in sorted(self.params)]

    def to_arrays(self):
        out = {f"p:{k}": v.data for k, v in self.params.items()}
        for name, st in self.buffers.items():
            out[f"b:{name}:mean"] = st["mean"]
            out[f"b:{name}:var"] = st["var"]
        return out

    @classmethod
    def from_arrays(cls, arrays):
        w = cls()
        for key, arr in arrays.items():
            kind, _, rest = key.partition(":")
            if kind == "p":
                w.params[rest] = Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=rest)
            elif kind == "b":
                name, _, stat = rest.rpartition(":")
                w.buffers.setdefault(name, {})[stat] = np.array(arr, dtype=np.float64)
        return w


def he_conv(rng, o, i, k):
    std = np.sqrt(2.0 / (i * k * k))
    return rng.normal(0.0, std, size=(o, i, k, k))


def add_conv_params(weights, name, o, i, k, rng):
    weights.params[f"{name}.w"] = Tensor(he_conv(rng, o, i, k), True, f"{name}.w")
    weights.params[f"{name}.gamma"] = Tensor(np.ones(o), True, f"{name}.gamma")
    weights.params[f"{name}.beta"] = Tensor(np.zeros(o), True, f"{name}.beta")
    weights.buffers[name] = {"mean": np.zeros(o), "var": np.ones(o)}


def add_linear_params(weights, name, o, i, rng):
    bound = 1.0 / np.sqrt(i)
    weights.params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, size=(o, i)), True, f"{name}.w")
    weights.params[f"{name}.b"] = Tensor(np.zeros(o), True, f"{name}.b")


def init_weights(net, rng):
    """He-initialised weights for every layer of ``net``."""
    w = Weights()
    for sp in net.layer_specs():
        if sp.kind == "conv2d":
            add_conv_params(w, sp.name, sp.O, sp.I, sp.K, rng)
        else:
            add_linear_params(w, sp.name, sp.O, sp.I, rng)
    return w


def conv_bn(weights, sp, x, train):
    y = F.conv2d(x, weights[f"{sp.name}.w"], sp.S)
    return F.batch_norm(
        y,
        weights[f"{sp.name}.gamma"],
        weights[f"{sp.name}.beta"],
        weights.buffers[sp.name],
        train=train,
    )


def apply_network(net, weights, x, train=False, hook=None):
    """Run ``net`` on tensor ``x``; returns logits.

    ``hook(layer_spec, x)``, when given, replaces every crossbar-mapped layer
    (conv+BN, or linear incl. bias) and must return a Tensor.
    """
    if tuple(x.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(f"batch shape {x.shape[1:]} does not match network input {net.input_shape}")
    specs = {sp.name: sp for sp in net.layer_specs()}

    def run(name, inp):
        sp = specs[name]
        if hook is not None:
            return hook(sp, inp)
        if sp.kind == "linear":
            return F.linear(inp, weights[f"{name}.w"], weights[f"{name}.b"])
        return conv_bn(weights, sp, inp, train)

    nconv = nblock = nlin = 0
    for item in net.items:
        if isinstance(item, ConvItem):
            x = F.relu(run(f"conv{nconv}", x))
            nconv += 1
        elif isinstance(item, BlockItem):
            name = f"block{nblock}"
            branch = None
            if item.k1 and item.k2:
                h = F.relu(run(f"{name}.conv1", x))
                branch = run(f"{name}.conv2", h)
            elif item.k1:
                branch = run(f"{name}.conv1", x)
            elif item.k2:
                branch = run(f"{name}.conv2", x)
            skip = run(f"{name}.proj", x) if item.needs_projection else x
            x = F.relu(skip if branch is None else branch + skip)
            nblock += 1
        elif isinstance(item, LinearItem):
            if x.ndim == 4:
                x = F.global_avg_pool(x)
            x = run("fc" if nlin == 0 else f"fc{nlin}", x)
            nlin += 1
    return x


def forward(net, weights, batch, train=False, hook=None):
    """Forward pass recorded on a fresh tape: returns ``(logits, tape)``."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    with Tape() as tape:
        logits = apply_network(net, weights, x, train=train, hook=hook)
    return logits, tape


def fold_batchnorm(weights, sp, eps=1e-5):
    """Fold eval-mode BN into the conv: returns (kernel, bias) arrays."""
    w = weights[f"{sp.name}.w"].data
    st = weights.buffers[sp.name]
    scale = weights[f"{sp.name}.gamma"].data / np.sqrt(st["var"] + eps)
    kernel = w * scale[:, None, None, None]
    bias = weights[f"{sp.name}.beta"].data - st["mean"] * scale
    return kernel, bias
