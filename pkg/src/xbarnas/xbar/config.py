"""Crossbar electrical parameters and the hardware config file."""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..configio import dump_dataclass, load_dataclass
from ..errors import ConfigError
from ..nn.quant import FixedPointFormat

LUT_SIZES = (16, 32, 64, 128)


@dataclass(frozen=True)
class CrossbarConfig:
    """Electrical description of one N x N crossbar.

    Device conductance under voltage dv is ``G0 * (1 + beta*(|dv| - v_supply/2))``
    clamped to ``[1/r_off, 1/r_on]``.
    """

    N: int = 64
    r_on: float = 100e3
    r_off: float = 600e3
    v_supply: float = 0.25
    r_wire: float = 0.3
    r_source: float = 52.5
    r_sink: float = 52.5
    beta: float = 0.3
    tol: float = 1e-9
    max_iters: int = 200
    relaxation: float = 0.9

    def __post_init__(self):
        if self.N < 2:
            raise ConfigError(f"crossbar size must be >= 2, got {self.N}")
        if not 0 < self.r_on < self.r_off:
            raise ConfigError("need 0 < r_on < r_off")
        for name in ("r_wire", "r_source", "r_sink"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative (negative resistance)")
        if self.v_supply <= 0:
            raise ConfigError("v_supply must be positive")
        if not 0 < self.relaxation <= 1:
            raise ConfigError("relaxation must be in (0, 1]")

    @property
    def g_min(self):
        return 1.0 / self.r_off

    @property
    def g_max(self):
        return 1.0 / self.r_on

    @property
    def is_ideal(self):
        return self.r_wire == 0 and self.r_source == 0 and self.r_sink == 0 and self.beta == 0

    def ideal(self):
        return replace(self, r_wire=0.0, r_source=0.0, r_sink=0.0, beta=0.0)


@dataclass(frozen=True)
class HardwareConfig:
    """Everything in a hardware config file: default crossbar size, device and
    parasitic values, fixed-point widths, solver and tiling knobs."""

    n: int = 64
    r_on: float = 100e3
    r_off: float = 600e3
    v_supply: float = 0.25
    r_wire: float = 0.3
    r_source: float = 52.5
    r_sink: float = 52.5
    beta: float = 0.3
    weight_bits: int = 16
    activation_bits: int = 16
    slice_bits: int = 2
    stream_bits: int = 1
    solver_tol: float = 1e-9
    solver_max_iters: int = 200
    tile_size: int = 4096

    def __post_init__(self):
        self.crossbar(self.n)
        self.fmt  # noqa: B018 - validates widths
        if self.slice_bits != 2 or self.stream_bits != 1:
            raise ConfigError("only 2-bit slices and 1-bit streaming are modelled")
        if self.tile_size < 1:
            raise ConfigError("tile_size must be >= 1")

    @property
    def fmt(self):
        return FixedPointFormat(self.weight_bits, self.activation_bits, self.slice_bits, self.stream_bits)

    def crossbar(self, n=None):
        return CrossbarConfig(
            N=n or self.n,
            r_on=self.r_on,
            r_off=self.r_off,
            v_supply=self.v_supply,
            r_wire=self.r_wire,
            r_source=self.r_source,
            r_sink=self.r_sink,
            beta=self.beta,
            tol=self.solver_tol,
            max_iters=self.solver_max_iters,
        )

    def ideal(self):
        return replace(self, r_wire=0.0, r_source=0.0, r_sink=0.0, beta=0.0)


_CONVERTERS = {
    "n": int,
    "r_on": float,
    "r_off": float,
    "v_supply": float,
    "r_wire": float,
    "r_source": float,
    "r_sink": float,
    "beta": float,
    "weight_bits": int,
    "activation_bits": int,
    "slice_bits": int,
    "stream_bits": int,
    "solver_tol": float,
    "solver_max_iters": int,
    "tile_size": int,
}


def load_hardware(path):
    return load_dataclass(HardwareConfig, path, _CONVERTERS)


def dump_hardware(cfg):
    return dump_dataclass(cfg)
