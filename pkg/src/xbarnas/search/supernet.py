"""The over-parameterised network: every searchable conv becomes a mixed edge
holding one candidate op per (kernel, crossbar size), plus a zero op where
the edge preserves shape."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np

from ..cost import Candidate, Edge, edge_candidates, layer_cost, searchable_edges
from ..errors import ConfigError, ShapeError
from ..mapper import map_layer
from ..nn import functional as F
from ..nn.model import Weights, add_conv_params, add_linear_params
from ..nn.netspec import BlockItem, ConvItem, LinearItem, NetworkSpec
from ..nn.tensor import Tensor
from ..xbar.config import HardwareConfig
from ..xbar.layer import ProgrammedLayer
from .gates import softmax


@dataclass
class MixedEdge:
    edge: Edge
    candidates: list
    alpha: np.ndarray
    in_block: bool = False

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if len(self.alpha) != len(self.candidates) or not self.candidates:
            raise ConfigError(f"{self.edge.name}: {len(self.alpha)} alphas for {len(self.candidates)} candidates")
        if self.zero_index is not None and not (self.edge.shape_preserving and self.in_block):
            raise ConfigError(f"{self.edge.name}: zero op on an edge that changes shape")

    @property
    def name(self):
        return self.edge.name

    @property
    def probs(self):
        return softmax(self.alpha)

    @property
    def zero_index(self):
        for i, c in enumerate(self.candidates):
            if c.is_zero:
                return i
        return None

    def argmax(self):
        """Lowest index among the maximal alphas."""
        return int(np.argmax(self.alpha))

    def chosen(self) -> Candidate:
        return self.candidates[self.argmax()]

    def param_prefix(self, i):
        return f"{self.edge.name}.{self.candidates[i].label}"

    def layer(self, i):
        c = self.candidates[i]
        return replace(self.edge.layer(c.K, c.N), name=self.param_prefix(i))


def mixed_forward(mixed, x, g, run, paths=None):
    """Binary-gated mixed op.

    ``g`` as an index (or a plain one-hot array) evaluates only the active
    path and returns ``None`` for the zero op.  ``g`` as a Tensor evaluates
    every candidate in ``paths`` (all by default) and returns the gated sum,
    so the loss is differentiable in every gate.
    """
    if not isinstance(g, Tensor):
        i = int(g) if np.ndim(g) == 0 else int(np.argmax(g))
        return None if mixed.candidates[i].is_zero else run(i, x)
    paths = range(len(mixed.candidates)) if paths is None else paths
    outputs = [None] * len(mixed.candidates)
    for i in paths:
        if not mixed.candidates[i].is_zero:
            outputs[i] = run(i, x)
    shapes = {o.shape for o in outputs if o is not None}
    if len(shapes) > 1:
        raise ShapeError(f"{mixed.name}: candidate outputs disagree in shape {sorted(shapes)}")
    if not shapes:
        return None
    return F.gated_sum(g, outputs)


@dataclass
class _Pass:
    bn: str  # "update" (batch stats, running stats updated), "batch", or "eval"
    nonideal: frozenset


class SuperNet:
    """Backbone with mixed edges; owns every candidate's weights and BN state."""

    def __init__(self, backbone: NetworkSpec, kernels, sizes, hw: HardwareConfig, rng, zero=True, default_n=None):
        backbone.validate()
        self.backbone = backbone
        self.hw = hw
        self.default_n = default_n or hw.n
        self.kernels = tuple(kernels)
        self.sizes = tuple(sizes)
        block_edges = {e.name for e in searchable_edges(backbone) if ".conv" in e.name}
        self.edges = []
        for e in searchable_edges(backbone):
            in_block = e.name in block_edges
            cands = edge_candidates(e, kernels, sizes, with_zero=zero and in_block and e.shape_preserving)
            self.edges.append(MixedEdge(e, cands, np.zeros(len(cands)), in_block))
        if not self.edges:
            raise ConfigError("backbone has no searchable layers")
        self.by_name = {m.name: m for m in self.edges}
        self.fixed = {
            sp.name: replace(sp, n=sp.n or self.default_n)
            for sp in backbone.layer_specs()
            if sp.name not in self.by_name
        }
        # first conv and final linear always see crossbar non-idealities
        self.always_nonideal = frozenset(n for n in ("conv0", "fc") if n in self.fixed)
        self.weights = Weights()
        for sp in self.fixed.values():
            if sp.kind == "linear":
                add_linear_params(self.weights, sp.name, sp.O, sp.I, rng)
            else:
                add_conv_params(self.weights, sp.name, sp.O, sp.I, sp.K, rng)
        for m in self.edges:
            for i, c in enumerate(m.candidates):
                if not c.is_zero:
                    add_conv_params(self.weights, m.param_prefix(i), m.edge.O, m.edge.I, c.K, rng)
        self._programmed = {}

    # parameters ---------------------------------------------------------------

    def fixed_params(self):
        return [t for k, t in sorted(self.weights.params.items()) if k.rsplit(".", 1)[0] in self.fixed]

    def active_params(self, active):
        """Fixed-layer tensors plus those of the active candidate on every edge.

        Both convs of a block whose branch a zero op removed are left out.
        """
        prefixes = set(self.fixed)
        removed = {
            m.name.rsplit(".", 1)[0]
            for m in self.edges
            if m.in_block and m.candidates[active[m.name]].is_zero
        }
        for m in self.edges:
            if not (m.in_block and m.name.rsplit(".", 1)[0] in removed):
                prefixes.add(m.param_prefix(active[m.name]))
        return [t for k, t in sorted(self.weights.params.items()) if k.rsplit(".", 1)[0] in prefixes]

    @contextmanager
    def frozen(self):
        params = list(self.weights.params.values())
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    def invalidate(self):
        """Drop programmed crossbars after the weights change."""
        self._programmed.clear()

    def set_alphas(self, alphas):
        for name, a in alphas.items():
            m = self.by_name[name]
            a = np.asarray(a, dtype=np.float64)
            if a.shape != m.alpha.shape:
                raise ShapeError(f"{name}: alpha shape {a.shape}, expected {m.alpha.shape}")
            m.alpha = a.copy()

    def alphas(self):
        return {m.name: m.alpha.copy() for m in self.edges}

    def fixed_cost(self, fmt, costs):
        return [layer_cost(sp, sp.n, fmt, costs) for sp in self.fixed.values()]

    # forward ----------------------------------------------------------------

    def _programmed_layer(self, sp):
        prog = self._programmed.get(sp.name)
        if prog is None:
            w = self.weights[f"{sp.name}.w"].data
            bias = self.weights[f"{sp.name}.b"].data if sp.kind == "linear" else None
            prog = ProgrammedLayer(sp, map_layer(sp, sp.n), w, bias, self.hw)
            self._programmed[sp.name] = prog
        return prog

    def _conv_bn(self, sp, x, ctx, nonideal):
        y = F.conv2d(x, self.weights[f"{sp.name}.w"], sp.S)
        if nonideal:
            y = F.straight_through(y, self._programmed_layer(sp)(x.data))
        gamma, beta = self.weights[f"{sp.name}.gamma"], self.weights[f"{sp.name}.beta"]
        if ctx.bn == "eval":
            return F.batch_norm(y, gamma, beta, self.weights.buffers[sp.name], train=False)
        state = self.weights.buffers[sp.name] if ctx.bn == "update" else None
        return F.batch_norm(y, gamma, beta, state, train=True)

    def _fixed(self, name, x, ctx):
        sp = self.fixed[name]
        nonideal = name in ctx.nonideal
        if sp.kind == "linear":
            y = F.linear(x, self.weights[f"{name}.w"], self.weights[f"{name}.b"])
            if nonideal:
                y = F.straight_through(y, self._programmed_layer(sp)(x.data))
            return y
        return self._conv_bn(sp, x, ctx, nonideal)

    def forward(self, x, bn="update", active=None, gates=None, paths=None, nonideal=frozenset()):
        """Logits of the super-network.

        Exactly one of ``active`` ({edge: index}, single path per edge) or
        ``gates`` ({edge: gate Tensor}, gated sum over ``paths``) is given.
        Layers named in ``nonideal`` run through the crossbar simulator with
        straight-through gradients.
        """
        if (active is None) == (gates is None):
            raise ValueError("give exactly one of active indices or gate tensors")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != tuple(self.backbone.input_shape):
            raise ShapeError(f"batch shape {x.shape[1:]} does not match {self.backbone.input_shape}")
        ctx = _Pass(bn, frozenset(nonideal))
        paths = paths or {}

        def edge(name, inp, act=False):
            # with ``act`` each candidate carries its own ReLU, so a gate's
            # gradient sees that candidate's activation rather than the mix
            m = self.by_name[name]
            ni = name in ctx.nonideal

            def run(i, t):
                y = self._conv_bn(m.layer(i), t, ctx, ni)
                return F.relu(y) if act else y

            g = active[name] if gates is None else gates[name]
            return mixed_forward(m, inp, g, run, paths.get(name))

        def layer(name, inp):
            return edge(name, inp) if name in self.by_name else self._fixed(name, inp, ctx)

        nconv = nblock = nlin = 0
        for item in self.backbone.items:
            if isinstance(item, ConvItem):
                name = f"conv{nconv}"
                x = edge(name, x, act=True) if name in self.by_name else F.relu(self._fixed(name, x, ctx))
                nconv += 1
            elif isinstance(item, BlockItem):
                name = f"block{nblock}"
                if item.searchable:
                    branch = self._searchable_branch(name, x, edge, gates)
                else:
                    branch = self._fixed_branch(name, item, x, layer)
                skip = layer(f"{name}.proj", x) if item.needs_projection else x
                x = F.relu(skip if branch is None else branch + skip)
                nblock += 1
            elif isinstance(item, LinearItem):
                if x.ndim == 4:
                    x = F.global_avg_pool(x)
                x = layer("fc" if nlin == 0 else f"fc{nlin}", x)
                nlin += 1
        return x

    def _searchable_branch(self, name, x, edge, gates):
        # a zero op on either conv removes the whole branch
        first = f"{name}.conv1"
        h = edge(first, x, act=True)
        if h is None:
            return None
        out = edge(f"{name}.conv2", h)
        if out is None or gates is None:
            return out
        zi = self.by_name[first].zero_index
        if zi is not None:
            mask = np.zeros(len(self.by_name[first].candidates))
            mask[zi] = 1.0
            out = out * (1.0 - (gates[first] * mask).sum())
        return out

    @staticmethod
    def _fixed_branch(name, item, x, layer):
        if item.k1 and item.k2:
            return layer(f"{name}.conv2", F.relu(layer(f"{name}.conv1", x)))
        if item.k1:
            return layer(f"{name}.conv1", x)
        if item.k2:
            return layer(f"{name}.conv2", x)
        return None
