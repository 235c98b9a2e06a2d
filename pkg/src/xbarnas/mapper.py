"""Partitioning flattened layer weights onto crossbars and MVMUs onto tiles."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .errors import ConfigError


def ceil_div(a, b):
    return -(-a // b)


@dataclass(frozen=True)
class Chunk:
    """Block of the flattened weight matrix held by one MVMU."""

    row_part: int
    col_part: int
    row_start: int
    row_stop: int
    col_start: int
    col_stop: int

    @property
    def shape(self):
        return self.row_stop - self.row_start, self.col_stop - self.col_start


@dataclass(frozen=True)
class MappedLayer:
    name: str
    N: int
    rows_needed: int
    cols_needed: int
    vectors_per_inference: int

    @property
    def row_partitions(self):
        return ceil_div(self.rows_needed, self.N)

    @property
    def col_partitions(self):
        return ceil_div(self.cols_needed, self.N)

    @property
    def mvmu_count(self):
        return self.row_partitions * self.col_partitions

    @property
    def utilization(self):
        return (self.rows_needed * self.cols_needed) / (self.mvmu_count * self.N * self.N)

    def chunks(self):
        n = self.N
        out = []
        for rp in range(self.row_partitions):
            for cp in range(self.col_partitions):
                out.append(
                    Chunk(
                        rp,
                        cp,
                        rp * n,
                        min((rp + 1) * n, self.rows_needed),
                        cp * n,
                        min((cp + 1) * n, self.cols_needed),
                    )
                )
        return out


def map_layer(layer, n) -> MappedLayer:
    """Flattened conv weights are (K*K*I) x O; linear layers are I x O."""
    if n < 1:
        raise ConfigError(f"crossbar size must be >= 1, got {n}")
    if layer.kind == "linear":
        rows = layer.I
    else:
        rows = layer.K * layer.K * layer.I
    return MappedLayer(layer.name, int(n), rows, layer.O, layer.H_o * layer.W_o)


@dataclass(frozen=True)
class HierarchyConfig:
    mvmus_per_core: int = 2
    cores_per_tile: int = 8

    def __post_init__(self):
        if self.mvmus_per_core < 1 or self.cores_per_tile < 1:
            raise ConfigError("hierarchy limits must be >= 1")

    @property
    def mvmus_per_tile(self):
        return self.mvmus_per_core * self.cores_per_tile


@dataclass(frozen=True)
class TileAllocation:
    tiles: tuple  # per layer
    idle_slots: tuple  # per layer

    @property
    def total_tiles(self):
        return sum(self.tiles)


def layer_tiles(mvmus, h: HierarchyConfig):
    return ceil_div(mvmus, h.mvmus_per_tile)


def allocate_tiles(mapped, h: HierarchyConfig = HierarchyConfig()) -> TileAllocation:
    """Each layer owns whole tiles."""
    tiles = tuple(layer_tiles(m.mvmu_count, h) for m in mapped)
    idle = tuple(t * h.mvmus_per_tile - m.mvmu_count for t, m in zip(tiles, mapped))
    return TileAllocation(tiles, idle)


REPORT_HEADER = ("layer", "N", "rows", "cols", "row_parts", "col_parts", "mvmus", "utilization", "tiles")


def mapping_report(net, sizes=None, h: HierarchyConfig = HierarchyConfig()):
    """Rows of (MappedLayer, tiles) in network order.

    ``sizes`` maps layer name to crossbar size and overrides the per-layer
    ``n`` recorded in the network spec.
    """
    sizes = sizes or {}
    mapped = []
    for layer in net.layer_specs() if net.items else []:
        n = sizes.get(layer.name, layer.n)
        if not n:
            raise ConfigError(f"layer {layer.name} has no crossbar size")
        mapped.append(map_layer(layer, n))
    alloc = allocate_tiles(mapped, h)
    return list(zip(mapped, alloc.tiles))


def format_mapping_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for m, tiles in rows:
        w.writerow(
            [m.name, m.N, m.rows_needed, m.cols_needed, m.row_partitions, m.col_partitions,
             m.mvmu_count, f"{m.utilization:.6f}", tiles]
        )
    return buf.getvalue()
