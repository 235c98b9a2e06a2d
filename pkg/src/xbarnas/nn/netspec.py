"""Backbone / compact network description and its line-oriented text format.

Format, one item per line (``#`` starts a comment)::

    input 3 16 16
    conv k=3 in=3 out=8 s=1 searchable=false
    block in=8 out=16 s=2 searchable=true
    linear in=16 out=10

Extracted networks add crossbar sizes: ``n=`` on conv/linear, and on blocks
``k1= n1= k2= n2=`` for the two branch convs (``k=0`` marks a deleted conv)
plus ``n=`` for the projection.  A projection block with both convs deleted
reduces to ``relu(proj(x))``.  A global average pool is implied before a
``linear`` that follows a spatial layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from ..errors import ConfigError, ShapeError

KINDS = ("conv2d", "linear", "relu", "avgpool", "batchnorm", "residual-add")


@dataclass(frozen=True)
class LayerSpec:
    """One crossbar-mapped (or digital) layer with resolved feature-map sizes."""

    name: str
    kind: str
    K: int
    I: int
    O: int
    S: int = 1
    H_i: int = 1
    W_i: int = 1
    H_o: int = 1
    W_o: int = 1
    n: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.K < 1 or self.K % 2 == 0:
                raise ConfigError(f"{self.name}: kernel size must be odd, got {self.K}")
            pad = (self.K - 1) // 2
            ho = (self.H_i + 2 * pad - self.K) // self.S + 1
            wo = (self.W_i + 2 * pad - self.K) // self.S + 1
            if (ho, wo) != (self.H_o, self.W_o):
                raise ShapeError(
                    f"{self.name}: output {self.H_o}x{self.W_o} inconsistent with "
                    f"input {self.H_i}x{self.W_i}, K={self.K}, S={self.S}"
                )

    @property
    def pad(self):
        return (self.K - 1) // 2

    @property
    def signature(self):
        return (self.K, self.I, self.O, self.S, self.H_i, self.W_i)


def conv_spec(name, k, i, o, s, h, w, n=None):
    pad = (k - 1) // 2
    ho = (h + 2 * pad - k) // s + 1
    wo = (w + 2 * pad - k) // s + 1
    return LayerSpec(name, "conv2d", k, i, o, s, h, w, ho, wo, n)


@dataclass
class ConvItem:
    k: int
    cin: int
    cout: int
    s: int = 1
    searchable: bool = False
    n: int | None = None


@dataclass
class BlockItem:
    """Residual basic block: conv-bn-relu, conv-bn, add skip, relu."""

    cin: int
    cout: int
    s: int = 1
    searchable: bool = False
    k1: int = 3
    k2: int = 3
    n1: int | None = None
    n2: int | None = None
    n: int | None = None

    @property
    def needs_projection(self):
        return self.s != 1 or self.cin != self.cout

    @property
    def shape_preserving(self):
        return not self.needs_projection


@dataclass
class LinearItem:
    cin: int
    cout: int
    n: int | None = None


@dataclass
class NetworkSpec:
    input_shape: tuple
    items: list = field(default_factory=list)

    @property
    def classes(self):
        for item in reversed(self.items):
            if isinstance(item, LinearItem):
                return item.cout
        return 0

    def layer_specs(self, validate=True):
        """Crossbar-mapped layers (convs incl. projections, linears) in network order."""
        c, h, w = self.input_shape
        specs = []
        nconv = nblock = nlin = 0
        for pos, item in enumerate(self.items):
            if isinstance(item, ConvItem):
                if validate and item.cin != c:
                    raise ShapeError(f"item {pos + 1} (conv{nconv}): expects {item.cin} channels, got {c}")
                sp = conv_spec(f"conv{nconv}", item.k, item.cin, item.cout, item.s, h, w, item.n)
                specs.append(sp)
                c, h, w = item.cout, sp.H_o, sp.W_o
                nconv += 1
            elif isinstance(item, BlockItem):
                name = f"block{nblock}"
                if validate and item.cin != c:
                    raise ShapeError(f"item {pos + 1} ({name}): expects {item.cin} channels, got {c}")
                hh, ww = h, w
                cur = item.cin
                stride = item.s
                if item.k1:
                    sp = conv_spec(f"{name}.conv1", item.k1, cur, item.cout, stride, hh, ww, item.n1)
                    specs.append(sp)
                    cur, hh, ww, stride = item.cout, sp.H_o, sp.W_o, 1
                if item.k2:
                    sp = conv_spec(f"{name}.conv2", item.k2, cur, item.cout, stride, hh, ww, item.n2)
                    specs.append(sp)
                    cur, hh, ww = item.cout, sp.H_o, sp.W_o
                if item.needs_projection:
                    sp = conv_spec(f"{name}.proj", 1, item.cin, item.cout, item.s, h, w, item.n)
                    specs.append(sp)
                    hh, ww = sp.H_o, sp.W_o
                c, h, w = item.cout, hh, ww
                nblock += 1
            elif isinstance(item, LinearItem):
                name = "fc" if nlin == 0 else f"fc{nlin}"
                if validate and item.cin != c:
                    raise ShapeError(f"item {pos + 1} ({name}): expects {item.cin} features, got {c}")
                specs.append(LayerSpec(name, "linear", 1, item.cin, item.cout, 1, 1, 1, 1, 1, item.n))
                c, h, w = item.cout, 1, 1
                nlin += 1
        return specs

    def validate(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"bad input shape {self.input_shape}")
        self.layer_specs(validate=True)
        return self

    def with_default_n(self, n):
        """Copy with every missing crossbar size set to ``n``."""
        items = []
        for item in self.items:
            if isinstance(item, ConvItem):
                items.append(replace(item, n=item.n or n))
            elif isinstance(item, BlockItem):
                items.append(replace(item, n1=item.n1 or n, n2=item.n2 or n, n=item.n or n))
            else:
                items.append(replace(item, n=item.n or n))
        return NetworkSpec(tuple(self.input_shape), items)

    def crossbar_sizes(self):
        return [sp.n for sp in self.layer_specs()]


# text format --------------------------------------------------------------


def _kv(tokens, path, no):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"expected key=value, got {tok!r}", path, no)
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _int(kv, key, path, no, default=None):
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing {key}=", path, no)
        return default
    try:
        return int(kv.pop(key))
    except ValueError:
        raise ConfigError(f"{key} must be an integer", path, no) from None


def _opt_int(kv, key, path, no):
    if key not in kv:
        return None
    return _int(kv, key, path, no)


def _bool(kv, key, path, no):
    v = kv.pop(key, "false").lower()
    if v not in ("true", "false", "1", "0"):
        raise ConfigError(f"{key} must be true/false", path, no)
    return v in ("true", "1")


def parse_network(text, path=None):
    input_shape = None
    items = []
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "input":
            if input_shape is not None:
                raise ConfigError("duplicate input line", path, no)
            if items:
                raise ConfigError("input line must come first", path, no)
            try:
                input_shape = tuple(int(t) for t in rest)
            except ValueError:
                raise ConfigError("input expects three integers C H W", path, no) from None
            if len(input_shape) != 3:
                raise ConfigError("input expects three integers C H W", path, no)
            continue
        if input_shape is None:
            raise ConfigError("first line must be 'input C H W'", path, no)
        kv = _kv(rest, path, no)
        if head == "conv":
            item = ConvItem(
                k=_int(kv, "k", path, no),
                cin=_int(kv, "in", path, no),
                cout=_int(kv, "out", path, no),
                s=_int(kv, "s", path, no, 1),
                searchable=_bool(kv, "searchable", path, no),
                n=_opt_int(kv, "n", path, no),
            )
            if item.k % 2 == 0:
                raise ConfigError(f"kernel size must be odd, got {item.k}", path, no)
        elif head == "block":
            k = _int(kv, "k", path, no, 3)
            item = BlockItem(
                cin=_int(kv, "in", path, no),
                cout=_int(kv, "out", path, no),
                s=_int(kv, "s", path, no, 1),
                searchable=_bool(kv, "searchable", path, no),
                k1=_int(kv, "k1", path, no, k),
                k2=_int(kv, "k2", path, no, k),
                n1=_opt_int(kv, "n1", path, no),
                n2=_opt_int(kv, "n2", path, no),
                n=_opt_int(kv, "n", path, no),
            )
            for kk in (item.k1, item.k2):
                if kk and kk % 2 == 0:
                    raise ConfigError(f"kernel size must be odd, got {kk}", path, no)
        elif head == "linear":
            item = LinearItem(
                cin=_int(kv, "in", path, no),
                cout=_int(kv, "out", path, no),
                n=_opt_int(kv, "n", path, no),
            )
        else:
            raise ConfigError(f"unknown layer type {head!r}", path, no)
        if kv:
            raise ConfigError(f"unknown keys {sorted(kv)}", path, no)
        for v in vars(item).values():
            if isinstance(v, int) and not isinstance(v, bool) and v < 0:
                raise ConfigError("negative value", path, no)
        items.append(item)
    if input_shape is None:
        raise ConfigError("missing 'input C H W' line", path)
    net = NetworkSpec(input_shape, items)
    try:
        net.validate()
    except ShapeError as exc:
        raise ShapeError(str(exc), path) from None
    return net


def load_network(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError("network spec not found", path) from None
    return parse_network(text, path)


def format_network(net):
    c, h, w = net.input_shape
    lines = [f"input {c} {h} {w}"]

    def n_tag(key, value):
        return f" {key}={value}" if value is not None else ""

    for item in net.items:
        if isinstance(item, ConvItem):
            lines.append(
                f"conv k={item.k} in={item.cin} out={item.cout} s={item.s} "
                f"searchable={'true' if item.searchable else 'false'}{n_tag('n', item.n)}"
            )
        elif isinstance(item, BlockItem):
            lines.append(
                f"block in={item.cin} out={item.cout} s={item.s} "
                f"searchable={'true' if item.searchable else 'false'} "
                f"k1={item.k1}{n_tag('n1', item.n1)} k2={item.k2}{n_tag('n2', item.n2)}"
                f"{n_tag('n', item.n)}"
            )
        else:
            lines.append(f"linear in={item.cin} out={item.cout}{n_tag('n', item.n)}")
    return "\n".join(lines) + "\n"


def resnet_spec(input_shape=(3, 32, 32), widths=(16, 32, 64), blocks_per_stage=3, classes=10, searchable=True):
    """CIFAR-style ResNet backbone (ResNet-20 with the defaults)."""
    c = widths[0]
    items = [ConvItem(3, input_shape[0], c, 1, False)]
    for stage, width in enumerate(widths):
        for b in range(blocks_per_stage):
            s = 2 if (stage > 0 and b == 0) else 1
            items.append(BlockItem(c, width, s, searchable))
            c = width
    items.append(LinearItem(c, classes))
    return NetworkSpec(tuple(input_shape), items).validate()
