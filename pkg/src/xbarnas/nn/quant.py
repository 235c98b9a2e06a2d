"""Fixed-point encoding at the crossbar boundary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class FixedPointFormat:
    weight_bits: int = 16
    activation_bits: int = 16
    slice_bits: int = 2
    stream_bits: int = 1

    def __post_init__(self):
        for name in ("weight_bits", "activation_bits", "slice_bits", "stream_bits"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.weight_bits % self.slice_bits:
            raise ConfigError("weight_bits must be divisible by slice_bits")
        if self.activation_bits % self.stream_bits:
            raise ConfigError("activation_bits must be divisible by stream_bits")
        if self.weight_bits < 2:
            raise ConfigError("weight_bits must be at least 2 for offset-binary weights")

    @property
    def slices(self):
        return self.weight_bits // self.slice_bits

    @property
    def cycles(self):
        return self.activation_bits // self.stream_bits

    @property
    def weight_offset(self):
        return 1 << (self.weight_bits - 1)


def tensor_scale(values, bits):
    m = float(np.max(np.abs(values))) if np.size(values) else 0.0
    if m == 0.0:
        return 1.0
    return m / ((1 << (bits - 1)) - 1)


def quantize(t, fmt, mode):
    """Return ``(integers, scale)``.

    Weights become offset-binary: ``clamp(round(w/scale)) + 2**(bits-1)``.
    Activations must be non-negative and become plain unsigned integers.
    """
    t = np.asarray(getattr(t, "data", t), dtype=np.float64)
    if mode == "weight":
        bits = fmt.weight_bits
        scale = tensor_scale(t, bits)
        lim = (1 << (bits - 1)) - 1
        q = np.clip(np.rint(t / scale), -lim, lim).astype(np.int64)
        return q + fmt.weight_offset, scale
    if mode == "activation":
        if np.any(t < 0):
            raise ValueError("activation quantisation requires non-negative input")
        bits = fmt.activation_bits
        scale = tensor_scale(t, bits)
        q = np.clip(np.rint(t / scale), 0, (1 << bits) - 1).astype(np.int64)
        return q, scale
    raise ValueError(f"unknown quantisation mode {mode!r}")


def dequantize(q, scale, fmt, mode):
    q = np.asarray(q, dtype=np.int64)
    if mode == "weight":
        return (q - fmt.weight_offset).astype(np.float64) * scale
    return q.astype(np.float64) * scale
