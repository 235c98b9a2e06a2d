import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, direct_conv2d, max_rel_error
from xbarnas.errors import NumericalError, ShapeError, UsageError
from xbarnas.nn import (
    FixedPointFormat,
    Tape,
    Tensor,
    backward,
    dequantize,
    forward,
    init_weights,
    parse_network,
    quantize,
    sgd_step,
)
from xbarnas.nn import functional as F


def _gradcheck(build, arrays, h=1e-5):
    """Compare tape gradients of scalar ``build(*tensors)`` against central differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*tensors)
    backward(tape, loss)
    worst = 0.0
    for t, a in zip(tensors, arrays):
        def f():
            with Tape():
                return build(*[Tensor(x) for x in arrays]).item()
        num = central_difference(f, a, h)
        worst = max(worst, max_rel_error(t.grad, num, floor=1e-4))
    return worst


def _weighted(y, rng):
    """Reduce to a scalar with fixed random weights so every output matters."""
    c = rng.normal(size=y.shape)
    return (y * c).sum()


PRIMITIVES = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)]),
    "sub": (lambda a, b: a - b, [(2, 5), (2, 5)]),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "relu": (lambda a: F.relu(a), [(4, 5)]),
    "sum_axis": (lambda a: a.sum(axis=1), [(3, 4)]),
    "mean": (lambda a: a.mean(axis=0), [(3, 4)]),
    "reshape_T": (lambda a: a.reshape(4, 3).T, [(3, 4)]),
    "conv_s1": (lambda x, w: F.conv2d(x, w, 1), [(2, 3, 5, 5), (4, 3, 3, 3)]),
    "conv_s2": (lambda x, w: F.conv2d(x, w, 2), [(2, 2, 6, 6), (3, 2, 5, 5)]),
    "conv_1x1_s2": (lambda x, w: F.conv2d(x, w, 2, 0), [(1, 3, 5, 5), (2, 3, 1, 1)]),
    "linear": (lambda x, w, b: F.linear(x, w, b), [(4, 5), (3, 5), (3,)]),
    "gap": (lambda x: F.global_avg_pool(x), [(2, 3, 4, 4)]),
    "bn_train": (lambda x, g, b: F.batch_norm(x, g, b, None, train=True), [(4, 3, 3, 3), (3,), (3,)]),
    "log_softmax": (lambda z: F.log_softmax(z), [(3, 5)]),
    "gated_sum": (lambda g, a, b: F.gated_sum(g, [a, None, b]), [(3,), (2, 3), (2, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    op, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [rng.normal(size=s) for s in shapes]
    if name == "relu":
        arrays[0][np.abs(arrays[0]) < 0.05] = 0.3  # keep away from the kink
    wrng = np.random.default_rng(7)
    weights = None

    def build(*ts):
        nonlocal weights
        y = op(*ts)
        if weights is None:
            weights = wrng.normal(size=y.shape)
        return (y * weights).sum()

    assert _gradcheck(build, arrays) < 1e-4


def test_bn_eval_gradient():
    rng = np.random.default_rng(3)
    state = {"mean": rng.normal(size=3), "var": rng.uniform(0.5, 2, size=3)}
    c = rng.normal(size=(2, 3, 4, 4))
    arrays = [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=3), rng.normal(size=3)]
    err = _gradcheck(lambda x, g, b: (F.batch_norm(x, g, b, state, train=False) * c).sum(), arrays)
    assert err < 1e-4


def test_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    labels = np.array([0, 2, 1, 2])
    err = _gradcheck(lambda z: F.cross_entropy(z, labels), [rng.normal(size=(4, 3))])
    assert err < 1e-4


@settings(max_examples=15, deadline=None)
@given(
    b=st.integers(1, 2),
    c=st.integers(1, 3),
    o=st.integers(1, 3),
    hw=st.integers(3, 7),
    k=st.sampled_from([1, 3, 5]),
    s=st.sampled_from([1, 2]),
    seed=st.integers(0, 2**31),
)
def test_im2col_matches_direct_convolution(b, c, o, hw, k, s, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, c, hw, hw))
    w = rng.normal(size=(o, c, k, k))
    pad = (k - 1) // 2
    got = F.conv2d(Tensor(x), Tensor(w), s, pad).data
    np.testing.assert_allclose(got, direct_conv2d(x, w, s, pad), rtol=0, atol=1e-10)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.sampled_from([3, 5]), s=st.sampled_from([1, 2]))
def test_conv_gradient_property(seed, k, s):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, k, k))]
    c = rng.normal(size=(1, 2, (5 - 1) // s + 1, (5 - 1) // s + 1))
    assert _gradcheck(lambda x, w: (F.conv2d(x, w, s) * c).sum(), arrays) < 1e-4


# network-level -----------------------------------------------------------

TWO_LAYER = """
input 2 8 8
conv k=3 in=2 out=3 s=1
linear in=3 out=4
"""

THREE_LAYER = """
input 2 6 6
conv k=3 in=2 out=3 s=1
block in=3 out=4 s=2 k=3
linear in=4 out=3
"""


def test_identity_1x1_conv_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 4, 5, 5))
    w = np.eye(4).reshape(4, 4, 1, 1)
    np.testing.assert_array_equal(F.conv2d(Tensor(x), Tensor(w), 1).data, x)


def test_zero_weights_give_uniform_softmax():
    net = parse_network(TWO_LAYER)
    w = init_weights(net, np.random.default_rng(0))
    for p in w.params.values():
        p.data = np.zeros_like(p.data)
    x = np.random.default_rng(1).uniform(size=(4, 2, 8, 8))
    logits, _ = forward(net, w, x, train=False)
    np.testing.assert_array_equal(logits.data, 0.0)
    with Tape():
        loss = F.cross_entropy(logits, np.array([0, 1, 2, 3]))
    assert loss.item() == pytest.approx(np.log(4), abs=1e-15)


def test_two_layer_net_matches_direct_reference():
    net = parse_network(TWO_LAYER)
    w = init_weights(net, np.random.default_rng(5))
    x = np.random.default_rng(6).uniform(size=(4, 2, 8, 8))
    logits, _ = forward(net, w, x, train=False)

    # reference: direct conv, eval-mode BN, relu, mean-pool, dense
    y = direct_conv2d(x, w["conv0.w"].data, 1, 1)
    st_ = w.buffers["conv0"]
    g, b = w["conv0.gamma"].data, w["conv0.beta"].data
    y = g[None, :, None, None] * (y - st_["mean"][None, :, None, None]) / np.sqrt(
        st_["var"][None, :, None, None] + 1e-5
    ) + b[None, :, None, None]
    y = np.maximum(y, 0).mean(axis=(2, 3))
    ref = y @ w["fc.w"].data.T + w["fc.b"].data
    np.testing.assert_allclose(logits.data, ref, rtol=0, atol=1e-10)


def test_three_layer_network_gradients_match_finite_differences():
    net = parse_network(THREE_LAYER)
    w = init_weights(net, np.random.default_rng(11))
    rng = np.random.default_rng(12)
    x = rng.uniform(size=(3, 2, 6, 6))
    labels = np.array([0, 1, 2])

    def loss_value():
        logits, _ = forward(net, w, x, train=True)
        with Tape():
            return F.cross_entropy(logits, labels).item()

    buffers = {k: dict(v) for k, v in w.buffers.items()}
    logits, tape = forward(net, w, x, train=True)
    with tape:
        loss = F.cross_entropy(logits, labels)
    backward(tape, loss)
    analytic = {k: p.grad.copy() for k, p in w.params.items()}
    worst = 0.0
    for k, p in w.params.items():
        num = central_difference(loss_value, p.data, 1e-5)
        worst = max(worst, max_rel_error(analytic[k], num, floor=1e-4))
    w.buffers = buffers
    assert worst < 1e-4


def test_shape_mismatch_names_layer():
    with pytest.raises(ShapeError, match="conv1"):
        parse_network("input 3 8 8\nconv k=3 in=3 out=4\nconv k=3 in=5 out=4\nlinear in=4 out=2\n")
    net = parse_network(TWO_LAYER)
    w = init_weights(net, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(net, w, np.zeros((1, 3, 8, 8)))


def test_backward_of_sum_is_ones_and_constant_loss_is_zero():
    t = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = t.sum()
        unrelated = w * 2.0
    backward(tape, loss)
    np.testing.assert_array_equal(t.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(w.grad, np.zeros(3))
    del unrelated


def test_backward_before_forward_is_usage_error():
    with pytest.raises(UsageError):
        backward(Tape(), Tensor(1.0))


def test_backward_is_deterministic():
    net = parse_network(THREE_LAYER)
    x = np.random.default_rng(1).uniform(size=(2, 2, 6, 6))
    grads = []
    for _ in range(2):
        w = init_weights(net, np.random.default_rng(2))
        logits, tape = forward(net, w, x, train=True)
        with tape:
            loss = F.cross_entropy(logits, np.array([0, 2]))
        backward(tape, loss)
        grads.append(np.concatenate([w.params[k].grad.ravel() for k in sorted(w.params)]))
    assert np.array_equal(grads[0], grads[1])


# optimiser ---------------------------------------------------------------


def test_sgd_zero_gradient_no_decay_is_noop():
    w = Tensor(np.array([1.5, -2.0]))
    sgd_step([w], [np.zeros(2)], lr=0.3, weight_decay=0.0)
    np.testing.assert_array_equal(w.data, [1.5, -2.0])


def test_sgd_decay_arithmetic():
    w = Tensor(np.array([1.0]))
    sgd_step([w], [np.zeros(1)], lr=1.0, weight_decay=0.5)
    assert w.data[0] == 0.0


def test_sgd_converges_on_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True)
    for _ in range(200):
        with Tape() as tape:
            d = w - 3.0
            loss = (d * d).sum()
        backward(tape, loss)
        sgd_step([w], [w.grad], lr=0.1)
    assert abs(w.data[0] - 3.0) < 1e-3


def test_sgd_rejects_non_finite():
    w = Tensor(np.array([1.0]))
    with pytest.raises(NumericalError):
        sgd_step([w], [np.array([np.nan])], lr=0.1)
    assert w.data[0] == 1.0


# quantisation --------------------------------------------------------------

FMT = FixedPointFormat()


def test_zero_weight_is_offset_and_exact():
    q, s = quantize(np.array([0.0, 1.0, -1.0]), FMT, "weight")
    assert q[0] == 2**15
    assert dequantize(q, s, FMT, "weight")[0] == 0.0


def test_max_weight_maps_to_all_ones():
    w = np.array([0.25, -0.1, 0.7, -0.7])
    q, _ = quantize(w, FMT, "weight")
    assert q[2] == 2**16 - 1
    assert q.min() >= 0 and q.max() <= 2**16 - 1


def test_all_zero_tensor_scale_is_one():
    _, s = quantize(np.zeros(5), FMT, "weight")
    assert s == 1.0
    _, s = quantize(np.zeros(5), FMT, "activation")
    assert s == 1.0


def test_activation_mode_rejects_negative():
    with pytest.raises(ValueError):
        quantize(np.array([-0.1, 0.2]), FMT, "activation")


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    bits=st.sampled_from([4, 8, 16]),
    mode=st.sampled_from(["weight", "activation"]),
)
def test_quantisation_round_trip_bound(seed, bits, mode):
    rng = np.random.default_rng(seed)
    fmt = FixedPointFormat(weight_bits=bits, activation_bits=bits)
    t = rng.normal(size=50) * rng.uniform(0.01, 100)
    if mode == "activation":
        t = np.abs(t)
    q, s = quantize(t, fmt, mode)
    assert np.max(np.abs(dequantize(q, s, fmt, mode) - t)) <= s / 2 * (1 + 1e-12)
