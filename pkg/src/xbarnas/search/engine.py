"""Alternating weight / architecture optimisation and compact extraction."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConvergenceError, NumericalError, SearchDivergedError, ShapeError
from ..nn import functional as F
from ..nn.netspec import BlockItem, ConvItem, LinearItem, NetworkSpec
from ..nn.optim import Adam, sgd_step
from ..nn.tensor import Tape, Tensor, backward
from .config import SearchConfig
from .gates import gate_to_alpha, network_expected_hwe, sample_gates, sample_index, sample_pair

TRACE_HEADER = ("epoch", "phase", "loss", "ce_loss", "e_energy", "e_latency")


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    phase: str
    loss: float
    ce_loss: float
    e_energy: float  # mJ, summed over searchable edges
    e_latency: float  # s*mm2


def format_trace(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in rows:
        w.writerow([r.epoch, r.phase, repr(r.loss), repr(r.ce_loss), repr(r.e_energy), repr(r.e_latency)])
    return buf.getvalue()


@dataclass
class StepOutcome:
    loss: float
    ce_loss: float
    aborted: bool = False
    message: str = ""


@dataclass
class SearchResult:
    choices: dict  # edge name -> Candidate
    network: NetworkSpec
    trace: list
    alphas: dict
    mode: str = "ideal"
    failures: list = field(default_factory=list)

    @property
    def e_energy(self):
        return self.trace[-1].e_energy if self.trace else float("nan")

    @property
    def e_latency(self):
        return self.trace[-1].e_latency if self.trace else float("nan")


def _check_finite(value, what):
    if not math.isfinite(value):
        raise NumericalError(f"{what} is not finite", {"value": value})


def weight_decay_term(params, lam):
    with np.errstate(over="ignore"):
        return lam * sum(float(np.sum(p.data * p.data)) for p in params)


def hardware_terms(supernet, lut, cfg):
    energy, g_energy = network_expected_hwe(supernet.edges, lut, "energy")
    latency, g_latency = network_expected_hwe(supernet.edges, lut, "latency")
    grads = {n: cfg.lambda2 * g_latency[n] + cfg.lambda3 * g_energy[n] for n in g_energy}
    return energy, latency, grads


def weight_step(supernet, data, cfg: SearchConfig, rng, velocity=None):
    """One SGD step on a single sampled path; crossbars are ideal here."""
    active = {m.name: sample_index(m.probs, rng) for m in supernet.edges}
    idx = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
    params = supernet.active_params(active)
    with Tape() as tape:
        logits = supernet.forward(Tensor(data.images[idx]), bn="update", active=active)
        ce = F.cross_entropy(logits, data.labels[idx])
    ce_value = float(ce.data)
    _check_finite(ce_value, "training loss")
    backward(tape, ce)
    velocity = {} if velocity is None else velocity
    sgd_step(params, [p.grad for p in params], cfg.lr_w, cfg.lambda1, cfg.momentum, velocity)
    loss = ce_value + weight_decay_term(params, cfg.lambda1)
    _check_finite(loss, "training loss")
    return StepOutcome(loss, ce_value)


def pick_nonideal(supernet, count, rng):
    """The always-non-ideal layers plus ``count`` distinct edges drawn uniformly."""
    edges = supernet.edges
    picked = rng.choice(len(edges), size=min(count, len(edges)), replace=False)
    return supernet.always_nonideal | {edges[i].name for i in sorted(picked)}


def arch_step(supernet, data, lut, cfg: SearchConfig, rng, optimizer, mode="nonideal"):
    """One update of every edge's alpha with the weights frozen.

    rng order: gates, then the non-ideal layer draw, then the batch.
    A circuit-solver failure aborts the step without touching alpha.
    """
    edges = supernet.edges
    gates, paths = {}, {}
    for m in edges:
        if cfg.all_paths:
            g = sample_gates(m.alpha, rng)
            paths[m.name] = tuple(range(len(m.candidates)))
        else:
            pair, which = sample_pair(m.alpha, rng)
            g = np.zeros(len(m.candidates))
            g[pair[which]] = 1.0
            paths[m.name] = pair
        gates[m.name] = Tensor(g, requires_grad=True, name=f"gate:{m.name}")
    nonideal = pick_nonideal(supernet, cfg.nonideal_layers_per_step, rng) if mode == "nonideal" else frozenset()
    idx = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)

    with supernet.frozen():
        try:
            with Tape() as tape:
                logits = supernet.forward(
                    Tensor(data.images[idx]), bn="batch", gates=gates, paths=paths, nonideal=nonideal
                )
                ce = F.cross_entropy(logits, data.labels[idx])
        except ConvergenceError as exc:
            return StepOutcome(math.nan, math.nan, aborted=True, message=str(exc))
        ce_value = float(ce.data)
        _check_finite(ce_value, "validation loss")
        backward(tape, ce)

    energy, latency, hw_grads = hardware_terms(supernet, lut, cfg)
    for m in edges:
        dg = gates[m.name].grad
        if cfg.all_paths:
            grad = gate_to_alpha(m.alpha, dg)
        else:
            grad = np.zeros(len(m.alpha))
            pair = list(paths[m.name])
            grad[pair] = gate_to_alpha(m.alpha[pair], dg[pair])
        m.alpha = optimizer.step(m.name, m.alpha, grad + hw_grads[m.name])
    loss = ce_value + weight_decay_term(supernet.weights.params.values(), cfg.lambda1)
    loss += cfg.lambda2 * latency + cfg.lambda3 * energy
    _check_finite(loss, "validation loss")
    return StepOutcome(loss, ce_value)


def _mean(values):
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


def run_search(supernet, train, val, lut, cfg: SearchConfig, mode="ideal", log=None):
    """Warm-up weight epochs, then alternating weight and architecture epochs."""
    if mode not in ("ideal", "nonideal"):
        raise ValueError(f"mode must be ideal or nonideal, got {mode!r}")
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(cfg.lr_arch)
    trace, failures = [], []
    velocity = {}
    w_steps = math.ceil(len(train) / cfg.batch_size)
    a_steps = cfg.arch_steps or math.ceil(len(val) / cfg.batch_size)

    def record(epoch, phase, outs):
        energy, latency, _ = hardware_terms(supernet, lut, cfg)
        row = TraceRow(epoch, phase, _mean([o.loss for o in outs]), _mean([o.ce_loss for o in outs]), energy, latency)
        trace.append(row)
        if log:
            log(f"epoch {epoch} {phase}: loss {row.loss:.4f} ce {row.ce_loss:.4f} "
                f"E[energy] {energy:.5g} mJ E[latency] {latency:.5g} s*mm2")

    try:
        for epoch in range(cfg.warmup_epochs + cfg.epochs):
            outs = [weight_step(supernet, train, cfg, rng, velocity) for _ in range(w_steps)]
            supernet.invalidate()
            record(epoch, "weight", outs)
            if epoch < cfg.warmup_epochs:
                continue
            outs = []
            for _ in range(a_steps):
                o = arch_step(supernet, val, lut, cfg, rng, optimizer, mode)
                if o.aborted:
                    failures.append((epoch, o.message))
                    if log:
                        log(f"epoch {epoch} arch step aborted: {o.message}")
                outs.append(o)
            record(epoch, "arch", outs)
    except NumericalError as exc:
        raise SearchDivergedError(f"search diverged: {exc}", trace, exc.diagnostics) from exc
    return SearchResult(
        {m.name: m.chosen() for m in supernet.edges},
        extract_compact(supernet),
        trace,
        supernet.alphas(),
        mode,
        failures,
    )


def extract_compact(supernet) -> NetworkSpec:
    """Argmax candidate per edge (lowest index on ties).

    A zero op on either conv removes a block's branch: shape-preserving
    blocks vanish, projection blocks keep only their projection.
    """
    dn = supernet.default_n
    items = []
    nconv = nblock = 0
    for item in supernet.backbone.items:
        if isinstance(item, ConvItem):
            name = f"conv{nconv}"
            nconv += 1
            if item.searchable:
                c = supernet.by_name[name].chosen()
                items.append(replace(item, k=c.K, n=c.N, searchable=False))
            else:
                items.append(replace(item, n=item.n or dn))
        elif isinstance(item, BlockItem):
            name = f"block{nblock}"
            nblock += 1
            proj_n = (item.n or dn) if item.needs_projection else None
            if not item.searchable:
                items.append(replace(
                    item,
                    n1=(item.n1 or dn) if item.k1 else None,
                    n2=(item.n2 or dn) if item.k2 else None,
                    n=proj_n,
                ))
                continue
            c1 = supernet.by_name[f"{name}.conv1"].chosen()
            c2 = supernet.by_name[f"{name}.conv2"].chosen()
            if c1.is_zero or c2.is_zero:
                if item.needs_projection:
                    items.append(BlockItem(item.cin, item.cout, item.s, False, 0, 0, None, None, proj_n))
                continue
            items.append(BlockItem(item.cin, item.cout, item.s, False, c1.K, c2.K, c1.N, c2.N, proj_n))
        elif isinstance(item, LinearItem):
            items.append(replace(item, n=item.n or dn))
    net = NetworkSpec(tuple(supernet.backbone.input_shape), items)
    try:
        return net.validate()
    except ShapeError as exc:
        raise ShapeError(f"extraction produced an invalid network: {exc}") from None


def format_summary(result: SearchResult, supernet, header=()):
    """Per-edge listing of the chosen op and crossbar size with probabilities."""
    lines = list(header)
    lines.append(f"search mode: {'ni-search' if result.mode == 'nonideal' else 'i-search'}")
    lines.append(f"E[energy] {result.e_energy:.6g} mJ  E[latency] {result.e_latency:.6g} s*mm2")
    if result.failures:
        lines.append(f"aborted architecture steps: {len(result.failures)}")
    for m in supernet.edges:
        e = m.edge
        c = result.choices[m.name]
        choice = "zero" if c.is_zero else f"{c.K}x{c.K} conv on {c.N}x{c.N} crossbar"
        probs = " ".join(f"{cand.label}={p:.3f}" for cand, p in zip(m.candidates, m.probs))
        lines.append(f"{m.name:<16} I:{e.I} O:{e.O} S:{e.S} FM:{e.H_i}x{e.W_i}  -> {choice}  [{probs}]")
    return "\n".join(lines) + "\n"
