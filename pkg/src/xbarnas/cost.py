"""Component-level energy, delay and area of mapped layers; the per-edge
lookup table used by the search; network totals and EDAP.

Default component values are calibration targets chosen to reproduce
relative trends across crossbar sizes.  Absolute magnitudes are not claims.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .configio import dump_dataclass, load_dataclass, parse_int_list
from .errors import ConfigError, MissingArtifactError
from .mapper import HierarchyConfig, allocate_tiles, ceil_div, map_layer
from .nn.netspec import BlockItem, ConvItem, conv_spec
from .nn.quant import FixedPointFormat


def adc_bits(n):
    """ceil(log2(3N + 1)), enough codes for every ideal column sum."""
    return (3 * n).bit_length()


@dataclass(frozen=True)
class ComponentCosts:
    e_xbar_cell: float = 2e-16  # J per cell per crossbar read
    e_dac: float = 4e-15  # J per row drive
    e_adc0: float = 8e-15  # e_adc(b) = e_adc0 * 2**b
    e_sna: float = 4e-10  # J per shift-and-add per MVMU per vector
    e_mem_bit: float = 5e-14  # J per bit of shared-memory traffic
    t_xbar: float = 1e-7  # s per crossbar read
    t_adc0: float = 1e-12  # t_adc(b) = t_adc0 * b
    t_sna: float = 2e-9
    a_xbar_cell: float = 2.5e-8  # mm2 per cell
    a_dac: float = 1.7e-7  # mm2 per row
    a_adc0: float = 5e-6  # a_adc(b) = a_adc0 * 2**b
    a_sna: float = 6e-5
    a_core: float = 2e-3
    a_tile: float = 5.0
    n_adc: int = 1  # ADCs per crossbar
    mvmus_per_core: int = 2
    cores_per_tile: int = 8
    sizes: tuple = (16, 32, 64, 128)

    def __post_init__(self):
        for f in self.__dataclass_fields__:
            v = getattr(self, f)
            if isinstance(v, (int, float)) and v < 0:
                raise ConfigError(f"{f} must be non-negative")
        if self.n_adc < 1:
            raise ConfigError("n_adc must be >= 1")
        if self.e_xbar_cell <= 0 or self.e_adc0 <= 0 or self.a_xbar_cell <= 0 or self.a_adc0 <= 0:
            raise ConfigError("crossbar and ADC costs must be positive to keep them increasing")
        if not self.sizes or min(self.sizes) < 2:
            raise ConfigError("sizes must list crossbar sizes >= 2")
        HierarchyConfig(self.mvmus_per_core, self.cores_per_tile)

    @property
    def hierarchy(self):
        return HierarchyConfig(self.mvmus_per_core, self.cores_per_tile)

    def e_xbar(self, n):
        return self.e_xbar_cell * n * n

    def a_xbar(self, n):
        return self.a_xbar_cell * n * n

    def e_adc(self, b):
        return self.e_adc0 * 2.0**b

    def t_adc(self, b):
        return self.t_adc0 * b

    def a_adc(self, b):
        return self.a_adc0 * 2.0**b

    def check_size(self, n):
        if n not in self.sizes:
            raise ConfigError(f"crossbar size {n} not in the cost table {self.sizes}")

    def vector_energy(self, n, slices):
        """Energy of one input vector through one MVMU for one bit-cycle."""
        b = adc_bits(n)
        return slices * (self.e_xbar(n) + n * self.e_dac + n * self.e_adc(b)) + self.e_sna

    def vector_delay(self, n):
        return self.t_xbar + ceil_div(n, self.n_adc) * self.t_adc(adc_bits(n)) + self.t_sna

    def mvmu_area(self, n, slices):
        b = adc_bits(n)
        return slices * (self.a_xbar(n) + n * self.a_dac + self.n_adc * self.a_adc(b)) + self.a_sna

    def tile_area(self, n, slices):
        per_core = self.mvmus_per_core * self.mvmu_area(n, slices) + self.a_core
        return self.cores_per_tile * per_core + self.a_tile


_COST_CONVERTERS = {f: float for f in ComponentCosts.__dataclass_fields__}
_COST_CONVERTERS.update(n_adc=int, mvmus_per_core=int, cores_per_tile=int, sizes=parse_int_list)


def load_costs(path):
    return load_dataclass(ComponentCosts, path, _COST_CONVERTERS)


def dump_costs(costs):
    return dump_dataclass(costs)


@dataclass(frozen=True)
class CostEntry:
    energy: float = 0.0  # J
    delay: float = 0.0  # s
    area: float = 0.0  # mm2
    latency_area: float = 0.0  # s*mm2

    @property
    def energy_mJ(self):
        return self.energy * 1e3

    def __add__(self, other):
        return CostEntry(
            self.energy + other.energy,
            self.delay + other.delay,
            self.area + other.area,
            self.latency_area + other.latency_area,
        )


ZERO_COST = CostEntry()


def op_cost(layer, mapped, fmt: FixedPointFormat, costs: ComponentCosts) -> CostEntry:
    """Energy, delay and tile area of one mapped layer for one inference."""
    n = mapped.N
    costs.check_size(n)
    vectors = mapped.vectors_per_inference
    e_vec = costs.vector_energy(n, fmt.slices)
    memory = (mapped.rows_needed + mapped.cols_needed) * fmt.activation_bits * costs.e_mem_bit * vectors
    energy = vectors * fmt.cycles * mapped.mvmu_count * e_vec + memory
    delay = vectors * fmt.cycles * costs.vector_delay(n)
    tiles = allocate_tiles([mapped], costs.hierarchy).tiles[0]
    area = tiles * costs.tile_area(n, fmt.slices)
    return CostEntry(energy, delay, area, delay * area)


def layer_cost(layer, n, fmt, costs):
    return op_cost(layer, map_layer(layer, n), fmt, costs)


@dataclass(frozen=True)
class Totals:
    energy_mJ: float
    latency_smm2: float
    area_mm2: float

    @property
    def edap(self):
        """mJ * ms * mm2."""
        return self.energy_mJ * self.latency_smm2 * 1e3


def network_totals(entries) -> Totals:
    energy = latency = area = 0.0
    for e in entries:
        energy += e.energy
        latency += e.latency_area
        area += e.area
    return Totals(energy * 1e3, latency, area)


def network_cost(net, fmt, costs, sizes=None):
    """Per-layer CostEntry list for a compact network (per-layer ``n``)."""
    sizes = sizes or {}
    out = []
    for layer in net.layer_specs():
        n = sizes.get(layer.name, layer.n)
        if not n:
            raise ConfigError(f"layer {layer.name} has no crossbar size")
        out.append(layer_cost(layer, n, fmt, costs))
    return out


# candidate space and lookup table ---------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    K: int  # 0 marks the zero operator
    N: int

    @property
    def is_zero(self):
        return self.K == 0

    @property
    def label(self):
        return "zero" if self.is_zero else f"k{self.K}n{self.N}"


ZERO = Candidate(0, 0)


@dataclass(frozen=True)
class Edge:
    """A searchable conv slot of the backbone with its fixed geometry."""

    name: str
    I: int
    O: int
    S: int
    H_i: int
    W_i: int

    @property
    def shape_preserving(self):
        return self.S == 1 and self.I == self.O

    def layer(self, k, n=None):
        return conv_spec(self.name, k, self.I, self.O, self.S, self.H_i, self.W_i, n)


def searchable_edges(net):
    """Searchable conv slots of ``net`` in network order."""
    edges = []
    c, h, w = net.input_shape
    nconv = nblock = 0
    for item in net.items:
        if isinstance(item, ConvItem):
            sp = conv_spec(f"conv{nconv}", item.k, item.cin, item.cout, item.s, h, w)
            if item.searchable:
                edges.append(Edge(sp.name, item.cin, item.cout, item.s, h, w))
            c, h, w = item.cout, sp.H_o, sp.W_o
            nconv += 1
        elif isinstance(item, BlockItem):
            name = f"block{nblock}"
            first = conv_spec(f"{name}.conv1", 3, item.cin, item.cout, item.s, h, w)
            if item.searchable:
                edges.append(Edge(f"{name}.conv1", item.cin, item.cout, item.s, h, w))
                edges.append(Edge(f"{name}.conv2", item.cout, item.cout, 1, first.H_o, first.W_o))
            c, h, w = item.cout, first.H_o, first.W_o
            nblock += 1
    return edges


def edge_candidates(edge, kernels, sizes, with_zero=None):
    """Conv candidates in (K, N) order; the zero op goes last when allowed."""
    cands = [Candidate(k, n) for k in kernels for n in sizes]
    if with_zero is None:
        with_zero = edge.shape_preserving
    if with_zero:
        cands.append(ZERO)
    return cands


LUT_HEADER = ("edge_id", "K", "N", "energy_J", "delay_s", "area_mm2", "latency_area")


@dataclass
class CostLut:
    entries: dict = field(default_factory=dict)  # (edge_id, K, N) -> CostEntry

    def __getitem__(self, key):
        edge, cand = key
        if cand.is_zero:
            return ZERO_COST
        try:
            return self.entries[(edge, cand.K, cand.N)]
        except KeyError:
            raise MissingArtifactError(f"no LUT entry for {edge} {cand.label}") from None

    def edge_ids(self):
        seen = []
        for e, _, _ in self.entries:
            if e not in seen:
                seen.append(e)
        return seen

    def count(self, edge):
        return sum(1 for e, _, _ in self.entries if e == edge)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LUT_HEADER)
        for (edge, k, n), c in self.entries.items():
            w.writerow([edge, k, n, repr(c.energy), repr(c.delay), repr(c.area), repr(c.latency_area)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, path=None):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != LUT_HEADER:
            raise ConfigError("LUT file lacks the expected header", path, 1)
        lut = cls()
        for no, row in enumerate(rows[1:], start=2):
            if len(row) != len(LUT_HEADER):
                raise ConfigError(f"expected {len(LUT_HEADER)} fields", path, no)
            try:
                key = (row[0], int(row[1]), int(row[2]))
                lut.entries[key] = CostEntry(*(float(v) for v in row[3:]))
            except ValueError as exc:
                raise ConfigError(f"bad LUT row: {exc}", path, no) from None
        return lut


def build_lut(edges, kernels, sizes, fmt, costs) -> CostLut:
    """One entry per (edge, candidate), including a zero row for every edge."""
    lut = CostLut()
    for edge in edges:
        for cand in edge_candidates(edge, kernels, sizes, with_zero=True):
            if cand.is_zero:
                lut.entries[(edge.name, 0, 0)] = ZERO_COST
            else:
                lut.entries[(edge.name, cand.K, cand.N)] = layer_cost(edge.layer(cand.K), cand.N, fmt, costs)
    return lut
