"""Bit-sliced weights on conductances and the bit-serial MVM pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from ..nn.quant import FixedPointFormat
from .config import CrossbarConfig
from .solver import CrossbarNetwork

MVM_METHODS = ("exact", "transfer")
LEVELS = 3  # largest 2-bit slice value


@dataclass(frozen=True)
class AdcSpec:
    bits: int
    lsb: float  # amperes per code step
    offset_per_row: float  # current of one driven G_min cell

    @classmethod
    def for_crossbar(cls, cfg: CrossbarConfig):
        # ceil(log2(3N + 1)) without floating point
        bits = (LEVELS * cfg.N).bit_length()
        lsb = cfg.v_supply * (cfg.g_max - cfg.g_min) / LEVELS
        return cls(bits, lsb, cfg.v_supply * cfg.g_min)

    @property
    def max_code(self):
        return (1 << self.bits) - 1

    def convert(self, currents, popcount):
        """Offset-subtracted, mid-tread rounded, clamped codes."""
        signal = (currents - self.offset_per_row * popcount) / self.lsb
        return np.clip(np.rint(signal), 0, self.max_code).astype(np.int64)


def conductance_levels(values, cfg):
    return cfg.g_min + (values / LEVELS) * (cfg.g_max - cfg.g_min)


@dataclass
class ConductanceSliceStack:
    """Slice s of an offset-binary weight chunk lives on its own N x N crossbar."""

    levels: np.ndarray  # [slices, N, N] integers 0..3
    conductances: np.ndarray  # [slices, N, N] siemens
    rows: int  # rows holding weights
    cols: int
    fmt: FixedPointFormat
    cfg: CrossbarConfig
    _networks: dict = field(default_factory=dict, repr=False)
    _transfer: dict = field(default_factory=dict, repr=False)

    @property
    def slices(self):
        return self.levels.shape[0]

    def network(self, s):
        if s not in self._networks:
            self._networks[s] = CrossbarNetwork(self.conductances[s], self.cfg)
        return self._networks[s]

    def transfer(self, s):
        if s not in self._transfer:
            # the factorised circuit is only kept when exact solves need it
            net = self._networks.get(s) or CrossbarNetwork(self.conductances[s], self.cfg)
            self._transfer[s] = net.transfer_matrix()
        return self._transfer[s]


def program_weights(w_int, fmt: FixedPointFormat, cfg: CrossbarConfig) -> ConductanceSliceStack:
    """Split an offset-binary chunk into 2-bit slices and map them to conductances.

    Cells outside the chunk are programmed to G_min.
    """
    w_int = np.asarray(w_int)
    if w_int.ndim != 2:
        raise ShapeError("weight chunk must be 2-D")
    r, c = w_int.shape
    if r > cfg.N or c > cfg.N:
        raise ShapeError(f"chunk {r}x{c} does not fit a {cfg.N}x{cfg.N} crossbar")
    if not np.issubdtype(w_int.dtype, np.integer):
        raise ConfigError("weight chunk must hold integers")
    top = (1 << fmt.weight_bits) - 1
    if w_int.size and (w_int.min() < 0 or w_int.max() > top):
        raise ConfigError(f"weight entries must lie in [0, {top}]")
    levels = np.zeros((fmt.slices, cfg.N, cfg.N), dtype=np.int64)
    for s in range(fmt.slices):
        levels[s, :r, :c] = (w_int.astype(np.int64) >> (fmt.slice_bits * s)) & LEVELS
    return ConductanceSliceStack(levels, conductance_levels(levels, cfg), r, c, fmt, cfg)


def _slice_currents(stack, s, volts, method):
    """Column currents [M, N] for drives ``volts`` [M, rows] on slice ``s``.

    Rows past ``stack.rows`` are undriven, so only the used rows enter.
    """
    cfg, r = stack.cfg, stack.rows
    if cfg.is_ideal:
        return volts @ stack.conductances[s][:r]
    if method == "transfer":
        return volts @ stack.transfer(s)[:r]
    net = stack.network(s)
    out = np.empty((volts.shape[0], cfg.N))
    chunk = max(1, 65536 // (cfg.N * cfg.N))
    for start in range(0, volts.shape[0], chunk):
        part = volts[start : start + chunk]
        full = np.zeros((cfg.N, part.shape[0]))
        full[:r] = part.T
        _, currents, _, _ = net.solve(full)
        out[start : start + chunk] = currents.T
    return out


def nonideal_mvm(x_int, stack: ConductanceSliceStack, adc: AdcSpec | None = None, method="exact"):
    """Integer result of the bit-serial, bit-sliced crossbar pipeline.

    ``x_int`` holds unsigned activations for the used rows, shape [rows] or
    [B, rows].  ``method="transfer"`` replaces the per-vector circuit solve by
    the network's linear response at the all-rows-driven operating point
    (identical when beta = 0).  Returns signed integers [cols] or [B, cols].
    """
    if method not in MVM_METHODS:
        raise ConfigError(f"unknown MVM method {method!r}; choose from {MVM_METHODS}")
    cfg, fmt = stack.cfg, stack.fmt
    adc = adc or AdcSpec.for_crossbar(cfg)
    x = np.asarray(x_int, dtype=np.int64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != stack.rows:
        raise ShapeError(f"activation length {x.shape[1]} does not match {stack.rows} programmed rows")
    if x.size and (x.min() < 0 or x.max() >= 1 << fmt.activation_bits):
        raise ConfigError(f"activations must lie in [0, 2^{fmt.activation_bits})")
    b, cycles = x.shape[0], fmt.cycles
    bits = np.empty((b, cycles, stack.rows))
    for t in range(cycles):
        bits[:, t] = (x >> t) & 1
    popcount = bits.sum(axis=2).reshape(b * cycles, 1)
    volts = cfg.v_supply * bits.reshape(b * cycles, stack.rows)
    weights_t = 2.0 ** np.arange(cycles)
    # codes and their shifted sums stay far below 2**53, so float64 is exact
    acc = np.zeros((b, cfg.N))
    for s in range(stack.slices):
        signal = _slice_currents(stack, s, volts, method)
        signal -= adc.offset_per_row * popcount
        signal *= 1.0 / adc.lsb
        np.rint(signal, out=signal)
        np.clip(signal, 0, adc.max_code, out=signal)
        acc += float(1 << (fmt.slice_bits * s)) * np.einsum("btn,t->bn", signal.reshape(b, cycles, cfg.N), weights_t)
    out = acc[:, : stack.cols].astype(np.int64)
    out -= fmt.weight_offset * (popcount.reshape(b, cycles).astype(np.int64) @ (np.int64(1) << np.arange(cycles, dtype=np.int64)))[:, None]
    return out[0] if single else out
