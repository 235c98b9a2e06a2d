"""Training and evaluating compact (extracted) networks; weight files."""

from __future__ import annotations

import io
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .configio import atomic_write_bytes
from .errors import ConvergenceError, MissingArtifactError, NumericalError
from .mapper import map_layer
from .nn import functional as F
from .nn.model import Weights, apply_network, fold_batchnorm
from .nn.optim import sgd_step
from .nn.tensor import Tape, Tensor, backward
from .xbar.config import HardwareConfig
from .xbar.layer import ProgrammedLayer, quantized_ideal_forward

MODES = ("float", "ideal", "nonideal")


def train_network(net, weights, data, epochs, lr, weight_decay, batch_size, rng, momentum=0.9, log=None):
    """Mini-batch momentum SGD with cosine learning-rate decay; returns per-epoch mean loss."""
    params = weights.trainable()
    velocity = {}
    history = []
    steps = math.ceil(len(data) / batch_size)
    total = max(epochs * steps, 1)
    t = 0
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for s in range(steps):
            idx = order[s * batch_size : (s + 1) * batch_size]
            with Tape() as tape:
                logits = apply_network(net, weights, Tensor(data.images[idx]), train=True)
                ce = F.cross_entropy(logits, data.labels[idx])
            value = float(ce.data)
            if not math.isfinite(value):
                raise NumericalError("training loss is not finite", {"epoch": epoch, "step": s})
            backward(tape, ce)
            step_lr = 0.5 * lr * (1.0 + math.cos(math.pi * t / total))
            sgd_step(params, [p.grad for p in params], step_lr, weight_decay, momentum, velocity)
            losses.append(value)
            t += 1
        history.append(float(np.mean(losses)))
        if log:
            log(f"epoch {epoch}: loss {history[-1]:.4f}")
    return history


@dataclass(frozen=True)
class Evaluation:
    top1: float
    topk: float
    k: int
    count: int
    failures: int = 0


class _Crossbars:
    """BN-folded layers, programmed once, used as an ``apply_network`` hook."""

    def __init__(self, net, weights, hw: HardwareConfig, mode):
        self.hw = hw
        self.mode = mode
        self.layers = {}
        for sp in net.layer_specs():
            if sp.kind == "linear":
                kernel, bias = weights[f"{sp.name}.w"].data, weights[f"{sp.name}.b"].data
            else:
                kernel, bias = fold_batchnorm(weights, sp)
            n = sp.n or hw.n
            if mode == "nonideal":
                self.layers[sp.name] = ProgrammedLayer(sp, map_layer(sp, n), kernel, bias, hw)
            else:
                self.layers[sp.name] = (kernel, bias)

    def __call__(self, sp, x):
        layer = self.layers[sp.name]
        if self.mode == "nonideal":
            return Tensor(layer(x.data))
        kernel, bias = layer
        return Tensor(quantized_ideal_forward(sp, x.data, kernel, bias, self.hw.fmt))


def predict(net, weights, images, mode="float", hw=None, batch_size=256, skip_failures=False):
    """Logits for ``images``; rows whose batch hit a solver failure are NaN when skipped."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    hook = None if mode == "float" else _Crossbars(net, weights, hw or HardwareConfig(), mode)
    out = []
    failures = 0
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        try:
            logits = apply_network(net, weights, Tensor(chunk), train=False, hook=hook).data
        except ConvergenceError:
            if not skip_failures:
                raise
            failures += len(chunk)
            logits = np.full((len(chunk), net.classes), np.nan)
        out.append(logits)
    return np.concatenate(out), failures


def evaluate(net, weights, data, mode="float", hw=None, k=5, batch_size=256, skip_failures=False):
    """Top-1 and top-k accuracy over ``data`` (skipped samples count as wrong)."""
    logits, failures = predict(net, weights, data.images, mode, hw, batch_size, skip_failures)
    k = min(k, logits.shape[1])
    valid = ~np.isnan(logits).any(axis=1)
    pred = np.argmax(np.where(valid[:, None], logits, -np.inf), axis=1)
    top = np.argsort(-np.nan_to_num(logits, nan=-np.inf), axis=1, kind="stable")[:, :k]
    hit1 = valid & (pred == data.labels)
    hitk = valid & (top == data.labels[:, None]).any(axis=1)
    n = len(data)
    return Evaluation(float(hit1.mean()), float(hitk.mean()), k, n, failures)


# weight files ----------------------------------------------------------------


def encode_weights(weights: Weights) -> bytes:
    """``.npz`` bytes with fixed member timestamps, so equal weights give equal files."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for key, arr in sorted(weights.to_arrays().items()):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    return buf.getvalue()


def save_weights(weights, path):
    atomic_write_bytes(path, encode_weights(weights))


def load_weights(path) -> Weights:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"weights file not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        return Weights.from_arrays({k: z[k] for k in z.files})
