"""Architecture probabilities, binary gate sampling and expected hardware cost."""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError

METRICS = ("energy", "latency")


def softmax(alpha):
    a = np.asarray(alpha, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericalError("architecture parameters are not finite", {"alpha": a.tolist()})
    z = np.exp(a - a.max())
    return z / z.sum()


def sample_index(p, rng):
    """Inverse-CDF draw: index i with probability ``p[i]``."""
    u = rng.random()
    i = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(i, len(p) - 1)


def sample_gates(alpha, rng):
    """One-hot gate vector drawn from softmax(alpha)."""
    p = softmax(alpha)
    g = np.zeros(len(p))
    g[sample_index(p, rng)] = 1.0
    return g


def sample_pair(alpha, rng):
    """Two distinct candidates drawn without replacement by probability.

    Returns ``(pair, active)`` where ``active`` is 0 or 1 within the pair,
    drawn from the softmax over the pair's own parameters.
    """
    p = softmax(alpha)
    if len(p) < 2:
        return (0, 0), 0
    first = sample_index(p, rng)
    rest = p.copy()
    rest[first] = 0.0
    second = sample_index(rest / rest.sum(), rng)
    pair = tuple(sorted((first, second)))
    q = softmax(np.asarray(alpha)[list(pair)])
    return pair, sample_index(q, rng)


def metric_values(mixed, lut, metric):
    """LUT cost of every candidate on ``mixed``: energy in mJ, latency in s*mm2."""
    if metric not in METRICS:
        raise ValueError(f"unknown hardware metric {metric!r}")
    out = np.empty(len(mixed.candidates))
    for i, cand in enumerate(mixed.candidates):
        entry = lut[(mixed.edge.name, cand)]
        out[i] = entry.energy_mJ if metric == "energy" else entry.latency_area
    return out


def expected_value(alpha, costs):
    """``sum_j p_j F_j`` and its gradient ``p_i (F_i - E)`` with respect to alpha."""
    p = softmax(alpha)
    f = np.asarray(costs, dtype=np.float64)
    e = float(p @ f)
    return e, p * (f - e)


def expected_hwe(mixed, lut, metric):
    """Expected cost of one mixed edge and its alpha-gradient."""
    return expected_value(mixed.alpha, metric_values(mixed, lut, metric))


def network_expected_hwe(edges, lut, metric):
    """Sum over edges; gradients keyed by edge name."""
    total = 0.0
    grads = {}
    for m in edges:
        e, g = expected_hwe(m, lut, metric)
        total += e
        grads[m.edge.name] = g
    return total, grads


def gate_to_alpha(alpha, gate_grad):
    """Binarised-gate estimator: ``dL/da_i = sum_j dL/dg_j p_j (delta_ij - p_i)``."""
    p = softmax(alpha)
    gate_grad = np.asarray(gate_grad, dtype=np.float64)
    return p * (gate_grad - p @ gate_grad)
