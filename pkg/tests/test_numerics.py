"""Tape autodiff: forward values against direct numpy/loop oracles, gradients against
central differences."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deltanet import _kernels as K
from deltanet import numerics as nx


def loop_matmul(a, b):
    n, m = a.shape
    m2, p = b.shape
    assert m == m2
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for k in range(m):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_grads(build, *arrays, tol=1e-6):
    """``build`` maps leaf tensors to a scalar tensor; compare every input gradient."""
    leaves = [nx.parameter(a) for a in arrays]
    nx.backward(build(*leaves))
    for leaf in leaves:
        def f():
            with nx.no_grad():
                return build(*leaves).item()
        num = numeric_grad(f, leaf.data)
        np.testing.assert_allclose(leaf.grad, num, rtol=tol, atol=tol)


def weighted_sum(t, w):
    return nx.sum(nx.mul(t, nx.tensor(w)))


small = hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                   elements=st.floats(-3, 3, allow_nan=False))


# ---------------------------------------------------------------- forward values

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_matmul_matches_triple_loop(n, m, p, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((n, m)), r.standard_normal((m, p))
    got = nx.matmul(nx.tensor(a), nx.tensor(b)).data
    np.testing.assert_allclose(got, loop_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_batched_matmul_matches_per_item_loop(rng):
    a, b = rng.standard_normal((3, 4, 5)), rng.standard_normal((3, 5, 2))
    got = nx.matmul(nx.tensor(a), nx.tensor(b)).data
    for i in range(3):
        np.testing.assert_allclose(got[i], loop_matmul(a[i], b[i]), atol=1e-12)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(nx.DimensionError):
        nx.matmul(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((4, 2))))


@settings(max_examples=40, deadline=None)
@given(small)
def test_softmax_rows_sum_to_one_and_match_definition(x):
    y = nx.softmax_rows(nx.tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    np.testing.assert_allclose(y, e / e.sum(axis=-1, keepdims=True), atol=1e-12)


def test_softmax_is_stable_for_large_inputs():
    y = nx.softmax_rows(nx.tensor([[1000.0, 1000.0, -1000.0]])).data
    np.testing.assert_allclose(y, [[0.5, 0.5, 0.0]], atol=1e-12)


def test_masked_softmax_gives_exact_zero_weight():
    x = nx.parameter([[0.3, 2.0, -1.0, 0.5]])
    mask = np.array([[1, 0, 1, 1]], dtype=bool)
    y = nx.softmax_rows(x, mask)
    assert y.data[0, 1] == 0.0
    nx.backward(nx.sum(nx.mul(y, nx.tensor([[1.0, 5.0, 2.0, 3.0]]))))
    assert x.grad[0, 1] == 0.0
    keep = np.array([0.3, -1.0, 0.5])
    e = np.exp(keep - keep.max())
    np.testing.assert_allclose(y.data[0, [0, 2, 3]], e / e.sum(), atol=1e-15)


def test_fully_masked_row_is_rejected():
    with pytest.raises(nx.UsageError):
        nx.softmax_rows(nx.tensor([[1.0, 2.0]]), np.array([[False, False]]))


def test_sub_self_is_exactly_zero(rng):
    a = nx.tensor(rng.standard_normal((4, 6)))
    assert np.all(nx.sub(a, a).data == 0.0)


def test_concat_rows_then_slicing_recovers_parts(rng):
    parts = [nx.tensor(rng.standard_normal((r, 5))) for r in (2, 3, 1)]
    whole = nx.concat_rows(parts)
    assert whole.shape == (6, 5)
    start = 0
    for p in parts:
        assert np.array_equal(whole.data[start:start + p.shape[0]], p.data)
        start += p.shape[0]


def test_concat_rows_width_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.concat_rows([nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((2, 4)))])


def test_mean_pool_rows_value_and_empty_error(rng):
    x = rng.standard_normal((5, 3))
    np.testing.assert_allclose(nx.mean_pool_rows(nx.tensor(x)).data, x.mean(axis=0, keepdims=True))
    with pytest.raises(nx.DimensionError):
        nx.mean_pool_rows(nx.tensor(np.zeros((0, 3))))


def test_cross_entropy_hand_value():
    probs = nx.tensor([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6]])
    loss = nx.cross_entropy(probs, np.array([0, 1, 2]), np.array([1, 1, 0]))
    assert loss.item() == pytest.approx(-(np.log(0.5) + np.log(0.8)) / 2, abs=1e-15)


def test_cross_entropy_ignores_masked_positions():
    base = np.array([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1]])
    other = base.copy()
    other[1] = [0.7, 0.2, 0.1]
    mask = np.array([1, 0])
    a = nx.cross_entropy(nx.tensor(base), np.array([0, 1]), mask).item()
    b = nx.cross_entropy(nx.tensor(other), np.array([0, 2]), mask).item()
    assert a == b


def test_cross_entropy_rejects_non_distribution():
    with pytest.raises(ValueError):
        nx.cross_entropy(nx.tensor([[0.5, 0.6]]), np.array([0]))


def test_non_finite_forward_raises():
    with pytest.raises(nx.NonFiniteError):
        nx.log(nx.tensor([0.0, 1.0]))


def test_broadcast_add_generalises_row_bias(rng):
    x, b = rng.standard_normal((2, 3, 4)), rng.standard_normal(4)
    np.testing.assert_allclose(nx.add(nx.tensor(x), nx.tensor(b)).data, x + b)
    with pytest.raises(nx.DimensionError):
        nx.add(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones(4)))


# ---------------------------------------------------------------- gradients

def test_elementwise_gradients(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 4))
    check_grads(lambda x, y: weighted_sum(nx.mul(nx.tanh(x), nx.sigmoid(y)), w), a, b)
    check_grads(lambda x, y: weighted_sum(nx.sub(nx.exp(x), nx.scale(y, 0.3)), w), a, b)
    check_grads(lambda x: weighted_sum(nx.log(nx.add(nx.mul(x, x), 1.0)), w), a)


def test_broadcast_gradients_reduce_to_operand_shape(rng):
    x, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((1, 4))
    w = rng.standard_normal((2, 3, 4))
    check_grads(lambda p, q: weighted_sum(nx.mul(nx.add(p, q), q), w), x, b)


def test_matmul_and_softmax_gradients(rng):
    a, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 4))
    w = rng.standard_normal((3, 4))
    mask = np.array([[1, 1, 0, 1]] * 3, dtype=bool)
    check_grads(lambda x, y: weighted_sum(nx.softmax_rows(nx.matmul(x, y), mask), w), a, b)


def test_shape_op_gradients(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 6))

    def f(x, y):
        rows = nx.concat_rows([x, y])  # (6, 3)
        t = nx.transpose(nx.reshape(rows, (2, 3, 3)), (0, 2, 1))
        picked = nx.index(nx.reshape(t, (6, 3)), [5, 0, 2])
        return weighted_sum(nx.transpose(picked, (1, 0)), w[:, :3]) + nx.sum(nx.mean_pool_rows(y))

    check_grads(f, a, b)


def test_take_accumulates_repeated_ids(rng):
    table = rng.standard_normal((5, 3))
    ids = np.array([[1, 1, 4], [0, 1, 3]])
    w = rng.standard_normal((2, 3, 3))
    check_grads(lambda t: weighted_sum(nx.take(t, ids), w), table)


def test_stack_gradients(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    w = rng.standard_normal((2, 2, 3))
    check_grads(lambda x, y: weighted_sum(nx.stack([x, y], axis=1), w), a, b)


def test_cross_entropy_gradient(rng):
    logits = rng.standard_normal((2, 3, 5))
    targets = np.array([[0, 4, 2], [1, 1, 3]])
    mask = np.array([[1, 1, 1], [1, 0, 0]])
    check_grads(lambda x: nx.cross_entropy(nx.softmax_rows(x), targets, mask), logits)


def test_conv_pool_gradients(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3)) * 0.3
    b = rng.standard_normal(3)
    g = rng.standard_normal((2, 3, 3, 3))
    check_grads(lambda p, q, r: weighted_sum(nx.avg_pool2d(nx.tanh(nx.conv2d(p, q, r)), 2), g),
                x, w, b, tol=1e-6)


def test_lstm_kernel_gradients(rng):
    gates = rng.standard_normal((3, 8))
    c = rng.standard_normal((3, 2))
    w = rng.standard_normal((3, 2))

    def f(gt, cp):
        c_new = nx.lstm_state(gt, cp)
        return weighted_sum(nx.lstm_hidden(gt, c_new), w)

    check_grads(f, gates, c)


def test_shared_leaf_gradient_accumulates():
    x = nx.parameter([2.0])
    nx.backward(nx.mul(x, x) + x)
    assert x.grad[0] == pytest.approx(5.0)


def test_backward_requires_scalar():
    with pytest.raises(nx.UsageError):
        nx.backward(nx.parameter([1.0, 2.0]))


def test_grad_check_passes_and_catches_a_wrong_rule(rng):
    w = nx.parameter(rng.standard_normal((3, 2)), name="w")
    x = nx.tensor(rng.standard_normal((4, 3)))
    good = nx.grad_check(lambda: nx.sum(nx.tanh(nx.matmul(x, w))), [w])
    assert good.passed and good.max_rel_error < 1e-6

    def broken(a):
        return nx._result(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")

    bad = nx.grad_check(lambda: nx.sum(broken(w)), [w])
    assert not bad.passed
    assert "w" in bad.failures()


# ---------------------------------------------------------------- kernels

@pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not importable")
@pytest.mark.parametrize("channels", [1, 3, 8])
def test_numba_and_numpy_conv_agree(rng, channels):
    x = rng.standard_normal((2, channels, 8, 8))
    w = rng.standard_normal((4, channels, 3, 3))
    b = rng.standard_normal(4)
    g = rng.standard_normal((2, 4, 8, 8))
    saved = K.USE_NUMBA
    try:
        K.USE_NUMBA = True
        f1, b1 = K.conv2d_forward(x, w, b, 1), K.conv2d_backward(x, w, g, 1)
        K.USE_NUMBA = False
        f2, b2 = K.conv2d_forward(x, w, b, 1), K.conv2d_backward(x, w, g, 1)
    finally:
        K.USE_NUMBA = saved
    np.testing.assert_allclose(f1, f2, atol=1e-12)
    for u, v in zip(b1, b2):
        np.testing.assert_allclose(u, v, atol=1e-12)


def test_conv_forward_matches_direct_definition(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = nx.conv2d(nx.tensor(x), nx.tensor(w), nx.tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref = b[o] + np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
                assert out[0, o, i, j] == pytest.approx(ref, abs=1e-12)


@pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not importable")
def test_numba_and_numpy_lstm_and_lcs_agree(rng):
    gates, c, gc = rng.standard_normal((5, 12)), rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    a, bb = rng.integers(0, 5, 30), rng.integers(0, 5, 25)
    saved = K.USE_NUMBA
    try:
        res = []
        for flag in (True, False):
            K.USE_NUMBA = flag
            res.append((K.lstm_state_forward(gates, c), K.lstm_state_backward(gates, c, gc),
                        K.lstm_hidden_forward(gates, c), K.lstm_hidden_backward(gates, c, gc),
                        K.lcs_length(a, bb)))
    finally:
        K.USE_NUMBA = saved
    for u, v in zip(*res):
        if isinstance(u, tuple):
            for p, q in zip(u, v):
                np.testing.assert_allclose(p, q, atol=1e-13)
        else:
            np.testing.assert_allclose(u, v, atol=1e-13)
