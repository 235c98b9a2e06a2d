import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_difference
from scipy import stats

from xbarnas.cost import ZERO, Candidate, ComponentCosts, CostEntry, CostLut, Edge, build_lut, searchable_edges
from xbarnas.data import Dataset
from xbarnas.errors import ConfigError, NumericalError, SearchDivergedError, ShapeError
from xbarnas.nn import Adam, Tape, Tensor, backward, format_network, parse_network
from xbarnas.nn import functional as F
from xbarnas.search import (
    MixedEdge,
    SearchConfig,
    SuperNet,
    arch_step,
    dump_search,
    expected_hwe,
    expected_value,
    extract_compact,
    format_summary,
    format_trace,
    gate_to_alpha,
    load_search,
    mixed_forward,
    network_expected_hwe,
    pick_nonideal,
    run_search,
    sample_gates,
    sample_pair,
    softmax,
    weight_step,
)
from xbarnas.xbar import HardwareConfig

TINY = """input 2 6 6
conv k=3 in=2 out=4 s=1
block in=4 out=4 s=1 searchable=true
block in=4 out=8 s=2 searchable=true
linear in=8 out=3
"""
HW = HardwareConfig(n=16, weight_bits=8, activation_bits=8)
KERNELS, SIZES = (1, 3), (16, 32)


def tiny_supernet(seed=0, hw=HW):
    return SuperNet(parse_network(TINY), KERNELS, SIZES, hw, np.random.default_rng(seed))


def tiny_lut(net=None):
    net = net or parse_network(TINY)
    return build_lut(searchable_edges(net), KERNELS, SIZES, HW.fmt, ComponentCosts())


def tiny_data(count=48, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 3
    images = rng.random((count, 2, 6, 6)) * 0.3
    images[:, labels % 2] += 0.5 * labels[:, None, None, None] / 2
    return Dataset(np.clip(images, 0, 1).astype(np.float32), labels.astype(np.int64), 3)


alphas = st.lists(st.floats(-8, 8), min_size=2, max_size=9)


# softmax and gate sampling ----------------------------------------------------------


@given(alphas, st.floats(-50, 50))
def test_softmax_is_a_distribution_and_shift_invariant(a, c):
    p = softmax(a)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p > 0)
    np.testing.assert_allclose(softmax(np.asarray(a) + c), p, rtol=1e-9, atol=1e-15)


def test_softmax_rejects_non_finite_alpha():
    with pytest.raises(NumericalError):
        softmax([0.0, np.nan])


def test_gates_are_one_hot_and_follow_softmax():
    rng = np.random.default_rng(1)
    alpha = np.array([0.0, math.log(3.0), -1.0, 0.5])
    draws = np.array([sample_gates(alpha, rng) for _ in range(20000)])
    assert np.all(draws.sum(axis=1) == 1.0)
    assert set(np.unique(draws)) <= {0.0, 1.0}
    counts = draws.sum(axis=0)
    _, pvalue = stats.chisquare(counts, softmax(alpha) * len(draws))
    assert pvalue > 1e-3


def test_equal_alphas_sample_uniformly():
    rng = np.random.default_rng(2)
    n, k = 12000, 6
    counts = np.array([sample_gates(np.zeros(k), rng) for _ in range(n)]).sum(axis=0)
    sigma = math.sqrt(n * (1 / k) * (1 - 1 / k))
    assert np.all(np.abs(counts - n / k) < 4 * sigma)


def test_saturated_alpha_almost_always_wins():
    rng = np.random.default_rng(3)
    alpha = np.array([0.0, 0.0, 20.0, 0.0])
    wins = sum(sample_gates(alpha, rng)[2] for _ in range(5000))
    assert wins / 5000 > 0.999


def test_sample_pair_is_distinct_and_sorted():
    rng = np.random.default_rng(4)
    for _ in range(200):
        pair, which = sample_pair(np.array([0.3, -1.0, 2.0, 0.0, 0.1]), rng)
        assert pair[0] < pair[1]
        assert which in (0, 1)


# expected hardware cost -------------------------------------------------------------


def test_expected_value_worked_example():
    e, grad = expected_value([0.0, 0.0], [2.0, 4.0])
    assert e == 3.0
    assert grad[0] == -0.5 and grad[1] == 0.5


@settings(max_examples=60)
@given(st.integers(2, 7), st.integers(0, 2**31 - 1))
def test_expected_value_gradient_matches_finite_differences(k, seed):
    rng = np.random.default_rng(seed)
    alpha = rng.normal(0, 2, k)
    costs = rng.uniform(0, 10, k)
    _, grad = expected_value(alpha, costs)

    def f():
        p = np.exp(alpha - alpha.max())
        return float(p @ costs / p.sum())

    fd = central_difference(f, alpha, h=1e-6)
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)


@given(alphas, st.data())
def test_cheaper_than_expected_candidates_get_negative_gradient(a, data):
    costs = data.draw(st.lists(st.floats(0, 100), min_size=len(a), max_size=len(a)))
    e, grad = expected_value(a, costs)
    for f, g in zip(costs, grad):
        if f < e - 1e-9 * max(1.0, e):
            assert g < 0
        elif f > e + 1e-9 * max(1.0, e):
            assert g > 0


@given(alphas, st.data(), st.sampled_from([0.25, 0.5, 2.0, 8.0]))
def test_expected_value_is_linear_in_costs(a, data, c):
    costs = np.array(data.draw(st.lists(st.floats(0, 100), min_size=len(a), max_size=len(a))))
    e, grad = expected_value(a, costs)
    e2, grad2 = expected_value(a, c * costs)
    # powers of two scale exactly
    assert e2 == c * e
    np.testing.assert_array_equal(grad2, c * grad)


def test_network_cost_is_sum_of_edges():
    sn = tiny_supernet()
    rng = np.random.default_rng(5)
    for m in sn.edges:
        m.alpha = rng.normal(size=len(m.alpha))
    lut = tiny_lut()
    for metric in ("energy", "latency"):
        total, grads = network_expected_hwe(sn.edges, lut, metric)
        parts = [expected_hwe(m, lut, metric) for m in sn.edges]
        assert total == pytest.approx(sum(e for e, _ in parts), rel=1e-15)
        for m, (_, g) in zip(sn.edges, parts):
            np.testing.assert_array_equal(grads[m.name], g)


def test_zero_candidate_costs_nothing():
    sn = tiny_supernet()
    m = sn.by_name["block0.conv1"]
    assert m.zero_index == len(m.candidates) - 1
    alpha = np.full(len(m.candidates), -30.0)
    alpha[m.zero_index] = 30.0
    m.alpha = alpha
    e, _ = expected_hwe(m, tiny_lut(), "energy")
    assert e < 1e-20


# gate gradient estimator --------------------------------------------------------------


@settings(max_examples=40)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_gate_to_alpha_is_chain_rule_of_softmax(k, seed):
    # for L = c . g with g replaced by softmax(alpha), dL/dalpha is the estimator
    rng = np.random.default_rng(seed)
    alpha, c = rng.normal(size=k), rng.normal(size=k)

    def f():
        p = np.exp(alpha - alpha.max())
        return float(c @ (p / p.sum()))

    fd = central_difference(f, alpha, h=1e-6)
    np.testing.assert_allclose(gate_to_alpha(alpha, c), fd, rtol=1e-6, atol=1e-9)


def test_gate_gradients_of_supernet_match_finite_differences():
    sn = tiny_supernet(seed=6)
    data = tiny_data(8)
    rng = np.random.default_rng(7)
    values = {m.name: rng.uniform(0.2, 0.8, len(m.candidates)) for m in sn.edges}

    def loss(track=False):
        gates = {n: Tensor(v, requires_grad=track) for n, v in values.items()}
        with sn.frozen(), Tape() as tape:
            logits = sn.forward(Tensor(data.images), bn="batch", gates=gates)
            ce = F.cross_entropy(logits, data.labels)
        if track:
            backward(tape, ce)
            return {n: g.grad for n, g in gates.items()}
        return float(ce.data)

    grads = loss(track=True)
    for name, v in values.items():
        fd = central_difference(loss, v, h=1e-6)
        np.testing.assert_allclose(grads[name], fd, rtol=1e-5, atol=1e-8, err_msg=name)


def test_identical_candidates_get_no_alpha_gradient_without_penalties():
    net = parse_network("input 2 6 6\nconv k=3 in=2 out=4 s=1 searchable=true\nlinear in=4 out=3\n")
    data = tiny_data(16)
    worst = []
    for seed in range(20):
        sn = SuperNet(net, (3,), (16, 32, 64), HW, np.random.default_rng(seed))
        m = sn.by_name["conv0"]
        first = m.param_prefix(0)
        for i in (1, 2):
            for p in ("w", "gamma", "beta"):
                sn.weights.params[f"{m.param_prefix(i)}.{p}"] = sn.weights.params[f"{first}.{p}"]
            sn.weights.buffers[m.param_prefix(i)] = sn.weights.buffers[first]
        rng = np.random.default_rng(100 + seed)
        m.alpha = rng.normal(size=3)
        gate = Tensor(sample_gates(m.alpha, rng), requires_grad=True)
        with sn.frozen(), Tape() as tape:
            ce = F.cross_entropy(sn.forward(Tensor(data.images), bn="batch", gates={"conv0": gate}), data.labels)
        backward(tape, ce)
        assert np.all(gate.grad == gate.grad[0])
        worst.append(np.max(np.abs(gate_to_alpha(m.alpha, gate.grad))) / max(abs(gate.grad[0]), 1e-300))
    # identical paths: only rounding of sum(p) = 1 is left
    assert max(worst) < 1e-14


# mixed ops ------------------------------------------------------------------------------


def _edge_with(cands):
    return MixedEdge(Edge("block0.conv1", 4, 4, 1, 6, 6), cands, np.zeros(len(cands)), in_block=True)


def test_mixed_forward_runs_only_the_active_path():
    m = _edge_with([Candidate(1, 16), Candidate(3, 16), ZERO])
    calls = []

    def run(i, x):
        calls.append(i)
        return x * float(i + 1)

    x = Tensor(np.ones((1, 4, 6, 6)))
    out = mixed_forward(m, x, 1, run)
    assert calls == [1]
    np.testing.assert_array_equal(out.data, 2.0)
    assert mixed_forward(m, x, np.array([0.0, 0.0, 1.0]), run) is None
    assert calls == [1]


def test_one_hot_gated_sum_is_bit_identical_to_the_candidate():
    sn = tiny_supernet(seed=8)
    m = sn.by_name["block0.conv1"]
    x = Tensor(np.random.default_rng(9).random((2, 4, 6, 6)))
    run = lambda i, t: F.conv2d(t, sn.weights[f"{m.param_prefix(i)}.w"], 1)  # noqa: E731
    for i in range(len(m.candidates)):
        g = np.zeros(len(m.candidates))
        g[i] = 1.0
        out = mixed_forward(m, x, Tensor(g), run)
        if m.candidates[i].is_zero:
            np.testing.assert_array_equal(out.data, 0.0)
        else:
            np.testing.assert_array_equal(out.data, run(i, x).data)


def test_duplicate_candidates_give_identical_outputs():
    m = _edge_with([Candidate(3, 16), Candidate(3, 16)])
    w = Tensor(np.random.default_rng(10).normal(size=(4, 4, 3, 3)))
    x = Tensor(np.random.default_rng(11).random((1, 4, 6, 6)))
    a = mixed_forward(m, x, 0, lambda i, t: F.conv2d(t, w, 1))
    b = mixed_forward(m, x, 1, lambda i, t: F.conv2d(t, w, 1))
    np.testing.assert_array_equal(a.data, b.data)


def test_mixed_forward_rejects_disagreeing_shapes():
    m = _edge_with([Candidate(1, 16), Candidate(3, 16)])
    x = Tensor(np.ones((1, 4, 6, 6)))
    with pytest.raises(ShapeError):
        mixed_forward(m, x, Tensor(np.array([0.5, 0.5])), lambda i, t: t if i == 0 else Tensor(t.data[:, :2]))


def test_zero_op_only_on_shape_preserving_block_edges():
    sn = tiny_supernet()
    zero = {m.name: m.zero_index is not None for m in sn.edges}
    assert zero == {
        "block0.conv1": True,
        "block0.conv2": True,
        "block1.conv1": False,
        "block1.conv2": True,
    }
    with pytest.raises(ConfigError):
        MixedEdge(Edge("conv1", 4, 4, 1, 6, 6), [Candidate(3, 16), ZERO], np.zeros(2), in_block=False)


# non-ideal layer selection --------------------------------------------------------------


def test_non_ideal_edges_are_drawn_uniformly():
    net = parse_network("""input 3 16 16
conv k=3 in=3 out=8 s=1
block in=8 out=8 s=1 searchable=true
block in=8 out=16 s=2 searchable=true
block in=16 out=16 s=1 searchable=true
linear in=16 out=10
""")
    sn = SuperNet(net, (3,), (32,), HardwareConfig(n=32), np.random.default_rng(0))
    assert len(sn.edges) == 6
    rng = np.random.default_rng(12)
    n = 6000
    counts = dict.fromkeys(sn.by_name, 0)
    for _ in range(n):
        picked = pick_nonideal(sn, 2, rng)
        assert {"conv0", "fc"} <= picked
        assert len(picked) == 4
        for name in picked & set(counts):
            counts[name] += 1
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    for name, c in counts.items():
        assert abs(c - n / 3) < 4 * sigma, name


# extraction -------------------------------------------------------------------------------


def _prefer(sn, choices):
    for m in sn.edges:
        a = np.zeros(len(m.candidates))
        a[m.candidates.index(choices[m.name])] = 5.0
        m.alpha = a


def test_extraction_takes_the_argmax_candidate():
    sn = tiny_supernet()
    choices = {
        "block0.conv1": Candidate(3, 32),
        "block0.conv2": Candidate(1, 16),
        "block1.conv1": Candidate(1, 32),
        "block1.conv2": Candidate(3, 16),
    }
    _prefer(sn, choices)
    net = extract_compact(sn)
    b0, b1 = net.items[1], net.items[2]
    assert (b0.k1, b0.n1, b0.k2, b0.n2) == (3, 32, 1, 16)
    assert (b1.k1, b1.n1, b1.k2, b1.n2, b1.n) == (1, 32, 3, 16, 16)
    assert net.items[0].n == 16 and net.items[3].n == 16
    assert not any(getattr(it, "searchable", False) for it in net.items)
    # shifting every alpha by a constant changes nothing
    for m in sn.edges:
        m.alpha = m.alpha + 123.0
    assert format_network(extract_compact(sn)) == format_network(net)


def test_extraction_ties_pick_the_lowest_index():
    sn = tiny_supernet()
    net = extract_compact(sn)
    assert (net.items[1].k1, net.items[1].n1) == (1, 16)


def test_zero_on_a_shape_preserving_block_removes_it():
    sn = tiny_supernet()
    _prefer(sn, {
        "block0.conv1": Candidate(3, 16),
        "block0.conv2": ZERO,
        "block1.conv1": Candidate(3, 16),
        "block1.conv2": Candidate(3, 16),
    })
    net = extract_compact(sn)
    assert len(net.items) == 3
    assert net.items[1].cin == 4 and net.items[1].cout == 8


def test_zero_on_a_projection_block_keeps_the_projection():
    sn = tiny_supernet()
    _prefer(sn, {
        "block0.conv1": Candidate(3, 16),
        "block0.conv2": Candidate(3, 16),
        "block1.conv1": Candidate(1, 16),
        "block1.conv2": ZERO,
    })
    net = extract_compact(sn)
    b1 = net.items[2]
    assert (b1.k1, b1.k2, b1.n) == (0, 0, 16)
    names = [sp.name for sp in net.layer_specs()]
    assert "block1.proj" in names and "block1.conv1" not in names


def test_supernet_path_with_zero_block_matches_its_extraction():
    # the single-path forward of a zero-branch block equals the compact network
    from xbarnas.nn import apply_network
    from xbarnas.nn.model import Weights

    sn = tiny_supernet(seed=13)
    choice = {
        "block0.conv1": Candidate(1, 16),
        "block0.conv2": ZERO,
        "block1.conv1": Candidate(3, 32),
        "block1.conv2": Candidate(1, 32),
    }
    _prefer(sn, choice)
    net = extract_compact(sn)
    active = {m.name: m.argmax() for m in sn.edges}
    x = tiny_data(6).images
    ref = sn.forward(Tensor(x), bn="eval", active=active).data

    # block0 vanished, so the compact network renumbers block1 as block0
    rename = {m.param_prefix(active[m.name]): m.name for m in sn.edges}
    rename = {k: v.replace("block1", "block0") for k, v in rename.items()}
    rename["block1.proj"] = "block0.proj"
    w = Weights()
    for key, t in sn.weights.params.items():
        layer, leaf = key.rsplit(".", 1)
        layer = rename.get(layer, layer)
        w.params[f"{layer}.{leaf}"] = Tensor(t.data.copy(), requires_grad=True, name=f"{layer}.{leaf}")
    for key, state in sn.weights.buffers.items():
        w.buffers[rename.get(key, key)] = state
    out = apply_network(net, w, Tensor(x), train=False).data
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


# search steps -----------------------------------------------------------------------------


def test_weight_step_updates_only_the_sampled_path():
    sn = tiny_supernet(seed=14)
    before = {k: t.data.copy() for k, t in sn.weights.params.items()}
    cfg = SearchConfig(kernels=KERNELS, xbar_sizes=SIZES, batch_size=16)
    rng = np.random.default_rng(15)
    state = rng.bit_generator.state
    weight_step(sn, tiny_data(), cfg, rng)
    rng.bit_generator.state = state
    active = {m.name: int(np.searchsorted(np.cumsum(m.probs), rng.random(), side="right")) for m in sn.edges}
    live = set(sn.fixed) | {m.param_prefix(active[m.name]) for m in sn.edges}
    for block in ("block0", "block1"):
        pair = [sn.by_name[f"{block}.conv{j}"] for j in (1, 2)]
        if any(m.candidates[active[m.name]].is_zero for m in pair):
            live -= {m.param_prefix(active[m.name]) for m in pair}
    assert any(m.candidates[active[m.name]].is_zero for m in sn.edges)
    for k, t in sn.weights.params.items():
        changed = not np.array_equal(t.data, before[k])
        assert changed == (k.rsplit(".", 1)[0] in live), k


def test_arch_step_moves_alpha_but_not_weights():
    sn = tiny_supernet(seed=16)
    before = {k: t.data.copy() for k, t in sn.weights.params.items()}
    alpha0 = sn.alphas()
    cfg = SearchConfig(kernels=KERNELS, xbar_sizes=SIZES, batch_size=16)
    out = arch_step(sn, tiny_data(), tiny_lut(), cfg, np.random.default_rng(17), Adam(cfg.lr_arch), mode="ideal")
    assert not out.aborted and math.isfinite(out.loss)
    for k, t in sn.weights.params.items():
        np.testing.assert_array_equal(t.data, before[k])
    assert any(not np.array_equal(alpha0[n], a) for n, a in sn.alphas().items())


def test_energy_penalty_alone_pushes_alpha_toward_cheap_candidates():
    sn = tiny_supernet(seed=18)
    lut = tiny_lut()
    cfg = SearchConfig(kernels=KERNELS, xbar_sizes=SIZES, batch_size=16, lambda3=1e6, lr_arch=0.1)
    opt = Adam(cfg.lr_arch)
    rng = np.random.default_rng(19)
    e0, _ = network_expected_hwe(sn.edges, lut, "energy")
    for _ in range(20):
        arch_step(sn, tiny_data(), lut, cfg, rng, opt, mode="ideal")
    e1, _ = network_expected_hwe(sn.edges, lut, "energy")
    assert e1 < 0.5 * e0


def test_two_path_mode_only_touches_the_sampled_pair():
    sn = tiny_supernet(seed=20)
    cfg = SearchConfig(kernels=KERNELS, xbar_sizes=SIZES, batch_size=16, all_paths=False)
    alpha0 = sn.alphas()
    arch_step(sn, tiny_data(), tiny_lut(), cfg, np.random.default_rng(21), Adam(cfg.lr_arch), mode="ideal")
    for m in sn.edges:
        moved = np.flatnonzero(m.alpha != alpha0[m.name])
        assert len(moved) <= 2, m.name


def test_solver_failure_aborts_the_step_and_keeps_alpha():
    hw = dataclasses.replace(HW, solver_max_iters=1, solver_tol=1e-30)
    sn = tiny_supernet(seed=22, hw=hw)
    alpha0 = sn.alphas()
    cfg = SearchConfig(kernels=KERNELS, xbar_sizes=SIZES, batch_size=8)
    out = arch_step(sn, tiny_data(), tiny_lut(), cfg, np.random.default_rng(23), Adam(cfg.lr_arch), mode="nonideal")
    assert out.aborted and out.message
    for n, a in sn.alphas().items():
        np.testing.assert_array_equal(a, alpha0[n])


def _search(seed=0, **kw):
    cfg = SearchConfig(
        kernels=KERNELS, xbar_sizes=SIZES, batch_size=16, epochs=2, warmup_epochs=1, arch_steps=2, seed=seed, **kw
    )
    data = tiny_data(64)
    sn = tiny_supernet(seed=seed)
    return run_search(sn, data.subset(np.arange(48)), data.subset(np.arange(48, 64)), tiny_lut(), cfg), sn


def test_search_is_deterministic_for_a_seed():
    a, sn_a = _search()
    b, sn_b = _search()
    assert format_trace(a.trace) == format_trace(b.trace)
    assert format_network(a.network) == format_network(b.network)
    for n in a.alphas:
        np.testing.assert_array_equal(a.alphas[n], b.alphas[n])
    assert format_summary(a, sn_a) == format_summary(b, sn_b)
    assert [r.phase for r in a.trace] == ["weight", "weight", "arch", "weight", "arch"]


def test_search_summary_lists_every_edge():
    res, sn = _search()
    text = format_summary(res, sn, header=("backbone: tiny",))
    assert text.startswith("backbone: tiny\nsearch mode: i-search\n")
    for m in sn.edges:
        assert m.name in text


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_trace():
    with pytest.raises(SearchDivergedError) as info:
        _search(lr_w=1e200)
    assert isinstance(info.value.trace, list)


# config file --------------------------------------------------------------------------------


def test_search_config_round_trip(tmp_path):
    cfg = SearchConfig(lambda3=2.5, kernels=(1, 3), xbar_sizes=(16,), all_paths=False, seed=9)
    path = tmp_path / "s.search"
    path.write_text(dump_search(cfg))
    assert load_search(path) == cfg


@pytest.mark.parametrize("text", ["lambda1 = -1\n", "kernels = 2,3\n", "val_fraction = 1.5\n", "bogus = 1\n"])
def test_search_config_rejects_bad_values(tmp_path, text):
    path = tmp_path / "s.search"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_search(path)


def test_lut_lookup_of_a_missing_candidate_names_it():
    from xbarnas.errors import MissingArtifactError

    lut = CostLut({("e", 3, 16): CostEntry(1.0, 1.0, 1.0)})
    with pytest.raises(MissingArtifactError, match="k5n16"):
        lut[("e", Candidate(5, 16))]
