"""Running a whole conv or linear layer through programmed crossbars."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..nn.functional import im2col, weight_matrix
from ..nn.quant import quantize
from .config import HardwareConfig
from .mvm import AdcSpec, nonideal_mvm, program_weights


def layer_matrix(layer, kernel):
    """Flattened weights [rows, O] in crossbar column layout."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if layer.kind == "linear":
        expected = (layer.O, layer.I)
        if kernel.shape != expected:
            raise ShapeError(f"{layer.name}: weight shape {kernel.shape}, expected {expected}")
        return kernel.T
    expected = (layer.O, layer.I, layer.K, layer.K)
    if kernel.shape != expected:
        raise ShapeError(f"{layer.name}: kernel shape {kernel.shape}, expected {expected}")
    return weight_matrix(kernel)


def layer_inputs(layer, x):
    """Row vectors fed to the crossbars: im2col patches or flat features."""
    x = np.asarray(x, dtype=np.float64)
    if layer.kind == "linear":
        if x.ndim != 2 or x.shape[1] != layer.I:
            raise ShapeError(f"{layer.name}: input {x.shape} does not match {layer.I} features")
        return x, None
    if x.ndim != 4 or x.shape[1:] != (layer.I, layer.H_i, layer.W_i):
        raise ShapeError(f"{layer.name}: input {x.shape[1:]} does not match {(layer.I, layer.H_i, layer.W_i)}")
    cols, ho, wo = im2col(x, layer.K, layer.S, layer.pad)
    return cols, (x.shape[0], ho, wo)


def layer_outputs(layer, flat, shape):
    if shape is None:
        return flat
    b, ho, wo = shape
    return np.ascontiguousarray(flat.reshape(b, ho, wo, layer.O).transpose(0, 3, 1, 2))


class ProgrammedLayer:
    """A layer's quantized weight matrix programmed chunk-wise onto crossbars.

    Programming (and the per-slice circuit set-up) happens once; every
    forward call reuses it.
    """

    def __init__(self, layer, mapped, kernel, bias, hw: HardwareConfig, method="transfer"):
        if mapped.rows_needed != (layer.I if layer.kind == "linear" else layer.K**2 * layer.I):
            raise ShapeError(f"{layer.name}: mapping rows {mapped.rows_needed} do not match the layer")
        if mapped.cols_needed != layer.O:
            raise ShapeError(f"{layer.name}: mapping cols {mapped.cols_needed} do not match the layer")
        self.layer = layer
        self.mapped = mapped
        self.hw = hw
        self.fmt = hw.fmt
        self.method = method
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        self.cfg = hw.crossbar(mapped.N)
        self.adc = AdcSpec.for_crossbar(self.cfg)
        self.w_int, self.w_scale = quantize(layer_matrix(layer, kernel), self.fmt, "weight")
        self.chunks = []
        for ch in mapped.chunks():
            block = self.w_int[ch.row_start : ch.row_stop, ch.col_start : ch.col_stop]
            self.chunks.append((ch, program_weights(block, self.fmt, self.cfg)))

    def integer_mvm(self, x_int):
        """Signed integer products [M, O]; row partitions summed in integers."""
        out = np.zeros((x_int.shape[0], self.layer.O), dtype=np.int64)
        for ch, stack in self.chunks:
            out[:, ch.col_start : ch.col_stop] += nonideal_mvm(
                x_int[:, ch.row_start : ch.row_stop], stack, self.adc, self.method
            )
        return out

    def _unsigned_pass(self, rows, tile_size):
        x_int, x_scale = quantize(rows, self.fmt, "activation")
        acc = np.zeros((rows.shape[0], self.layer.O), dtype=np.int64)
        for start in range(0, rows.shape[0], tile_size):
            acc[start : start + tile_size] = self.integer_mvm(x_int[start : start + tile_size])
        return acc * (self.w_scale * x_scale)

    def __call__(self, x, tile_size=None):
        tile_size = tile_size or self.hw.tile_size
        rows, shape = layer_inputs(self.layer, x)
        flat = self._unsigned_pass(np.maximum(rows, 0.0), tile_size)
        if np.any(rows < 0):
            # crossbars take unsigned drives: negative inputs run as a second pass
            flat = flat - self._unsigned_pass(np.maximum(-rows, 0.0), tile_size)
        if self.bias is not None:
            flat = flat + self.bias
        return layer_outputs(self.layer, flat, shape)


def layer_nonideal_forward(layer, mapped, x, kernel, bias, hw: HardwareConfig, tile_size=None, method="transfer"):
    """Program ``layer`` per ``mapped`` and evaluate it on ``x``."""
    return ProgrammedLayer(layer, mapped, kernel, bias, hw, method)(x, tile_size)


def quantized_ideal_forward(layer, x, kernel, bias, fmt):
    """Same fixed-point arithmetic as the crossbar pipeline, computed exactly."""
    rows, shape = layer_inputs(layer, x)
    w_int, w_scale = quantize(layer_matrix(layer, kernel), fmt, "weight")
    signed = w_int - fmt.weight_offset
    flat = np.zeros((rows.shape[0], layer.O))
    for sign, part in ((1.0, np.maximum(rows, 0.0)), (-1.0, np.maximum(-rows, 0.0))):
        if sign < 0 and not np.any(rows < 0):
            break
        x_int, x_scale = quantize(part, fmt, "activation")
        flat += sign * (x_int @ signed) * (w_scale * x_scale)
    if bias is not None:
        flat = flat + bias
    return layer_outputs(layer, flat, shape)
