import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from egoaco import ops
from egoaco.ops import ConfigurationError
from egoaco.tensor import DimensionError, Tape, Tensor

floats = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def grads_of(fn, *arrays):
    ts = [Tensor(a) for a in arrays]
    with Tape() as tape:
        tape.watch(*ts)
        out = fn(*ts)
    return out, [g.numpy() for g in tape.gradient(out, ts)]


# ---------------------------------------------------------------- Tensor / Tape semantics

def test_tensor_is_read_only_copy():
    a = np.ones(3)
    t = Tensor(a)
    a[0] = 5.0
    assert t.numpy()[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 2.0


def test_tape_single_use():
    x = Tensor(np.ones(2))
    with Tape() as tape:
        tape.watch(x)
        y = ops.sum(ops.mul(x, x))
    tape.gradient(y, [x])
    with pytest.raises(RuntimeError):
        tape.gradient(y, [x])


def test_unrelated_source_gets_zero_gradient():
    x, z = Tensor(np.ones(2)), Tensor(np.ones(3))
    with Tape() as tape:
        tape.watch(x, z)
        y = ops.sum(x)
    gx, gz = tape.gradient(y, [x, z])
    np.testing.assert_array_equal(gx.numpy(), [1.0, 1.0])
    np.testing.assert_array_equal(gz.numpy(), np.zeros(3))


def test_fan_out_accumulates():
    # y = x*x + 3x uses x three times
    _, (g,) = grads_of(lambda x: ops.sum(ops.add(ops.mul(x, x), ops.scale(x, 3.0))), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, 2 * np.array([1.0, -2.0]) + 3.0)


def test_unwatched_inputs_record_nothing():
    x = Tensor(np.ones(2))
    with Tape() as tape:
        y = ops.mul(x, x)
    assert tape.handle(y) is None
    assert len(tape.nodes) == 0


def test_non_scalar_target_needs_seed():
    x = Tensor(np.ones(2))
    with Tape() as tape:
        tape.watch(x)
        y = ops.scale(x, 2.0)
    with pytest.raises(DimensionError):
        tape.gradient(y, [x])


def test_explicit_seed_vector_jacobian():
    x = Tensor(np.array([1.0, 2.0]))
    with Tape() as tape:
        tape.watch(x)
        y = ops.mul(x, x)
    (g,) = tape.gradient(y, [x], seed=np.array([1.0, 10.0]))
    np.testing.assert_allclose(g.numpy(), [2.0, 40.0])


# ---------------------------------------------------------------- forward oracles

def loop_matmul(A, B):
    n, k = A.shape
    m = B.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += A[i, p] * B[p, j]
    return out


def loop_conv(x, w, b):
    Bn, C, H, W = x.shape
    O, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((Bn, O, H, W))
    for n in range(Bn):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    acc = b[o]
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                ii, jj = i + di - ph, j + dj - pw
                                if 0 <= ii < H and 0 <= jj < W:
                                    acc += w[o, c, di, dj] * x[n, c, ii, jj]
                    out[n, o, i, j] = acc
    return out


def test_matmul_matches_triple_loop(rng):
    A, B = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
    np.testing.assert_allclose(ops.matmul(A, B).numpy(), loop_matmul(A, B), atol=1e-12)


def test_batched_matmul_matches_per_item_loop(rng):
    A, B = rng.standard_normal((2, 4, 3)), rng.standard_normal((3, 5))
    out = ops.matmul(A, B).numpy()
    for i in range(2):
        np.testing.assert_allclose(out[i], loop_matmul(A[i], B), atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        ops.matmul(np.ones((2, 3)), np.ones((4, 2)))


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_matches_nested_loops(rng, k):
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((2, 3, k, k))
    b = rng.standard_normal(2)
    np.testing.assert_allclose(ops.conv2d(x, w, b).numpy(), loop_conv(x, w, b), atol=1e-12)


def test_conv2d_unbatched_and_even_kernel(rng):
    x = rng.standard_normal((3, 4, 4))
    w = rng.standard_normal((2, 3, 3, 3))
    b = np.zeros(2)
    np.testing.assert_allclose(ops.conv2d(x, w, b).numpy(), loop_conv(x[None], w, b)[0], atol=1e-12)
    with pytest.raises(ConfigurationError):
        ops.conv2d(x, rng.standard_normal((2, 3, 2, 2)), b)
    with pytest.raises(DimensionError):
        ops.conv2d(x, rng.standard_normal((2, 4, 3, 3)), b)


def naive_softmax(x):
    e = [np.exp(v) for v in x]
    s = sum(e)
    return np.array([v / s for v in e])


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=floats))
def test_softmax_matches_naive_and_sums_to_one(x):
    out = ops.softmax(x).numpy()
    np.testing.assert_allclose(out, naive_softmax(x), rtol=1e-12)
    assert abs(out.sum() - 1.0) < 1e-12


def test_softmax_is_stable_for_large_inputs():
    out = ops.softmax(np.array([1000.0, 1000.0, -1000.0])).numpy()
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0])


def test_log_softmax_matches_log_sum_exp(rng):
    x = rng.standard_normal((3, 5)) * 4
    ref = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(ops.log_softmax(x, axis=1).numpy(), ref, atol=1e-12)


def test_reductions_match_loops(rng):
    x = rng.standard_normal((2, 3, 4))
    s = np.zeros(3)
    for i in range(2):
        for j in range(3):
            for k in range(4):
                s[j] += x[i, j, k]
    np.testing.assert_allclose(ops.sum(x, axis=(0, 2)).numpy(), s, atol=1e-12)
    np.testing.assert_allclose(ops.mean(x, axis=(0, 2)).numpy(), s / 8, atol=1e-12)
    np.testing.assert_allclose(ops.max(x, axis=1).numpy(), x.max(axis=1))
    np.testing.assert_allclose(ops.reduce("sum", x).numpy(), x.sum(), atol=1e-12)


def test_max_gradient_goes_to_first_maximum():
    _, (g,) = grads_of(lambda x: ops.max(x), np.array([1.0, 3.0, 3.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0, 0.0])


def test_avg_pool2_matches_loop(rng):
    x = rng.standard_normal((1, 2, 4, 6))
    ref = np.zeros((1, 2, 2, 3))
    for c in range(2):
        for i in range(2):
            for j in range(3):
                ref[0, c, i, j] = x[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean()
    np.testing.assert_allclose(ops.avg_pool2(x).numpy(), ref, atol=1e-12)


# ---------------------------------------------------------------- gradients

@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=floats),
       hnp.arrays(np.float64, st.integers(1, 4), elements=floats))
def test_broadcast_add_gradient_unbroadcasts(a, b):
    if a.shape[1] != b.shape[0]:
        b = np.resize(b, a.shape[1])
    _, (ga, gb) = grads_of(lambda x, y: ops.sum(ops.add(x, y)), a, b)
    np.testing.assert_array_equal(ga, np.ones_like(a))
    np.testing.assert_array_equal(gb, np.full(b.shape, a.shape[0]))


@given(hnp.arrays(np.float64, st.integers(1, 6), elements=floats))
def test_elementwise_gradients_closed_form(x):
    _, (g,) = grads_of(lambda t: ops.sum(ops.sigmoid(t)), x)
    s = 1 / (1 + np.exp(-x))
    np.testing.assert_allclose(g, s * (1 - s), atol=1e-12)
    _, (g,) = grads_of(lambda t: ops.sum(ops.tanh(t)), x)
    np.testing.assert_allclose(g, 1 - np.tanh(x) ** 2, atol=1e-12)
    _, (g,) = grads_of(lambda t: ops.sum(ops.exp(t)), x)
    np.testing.assert_allclose(g, np.exp(x), rtol=1e-12)


def test_matmul_gradient_closed_form(rng):
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    G = rng.standard_normal((3, 2))
    ta, tb = Tensor(A), Tensor(B)
    with Tape() as tape:
        tape.watch(ta, tb)
        y = ops.matmul(ta, tb)
    ga, gb = tape.gradient(y, [ta, tb], seed=G)
    np.testing.assert_allclose(ga.numpy(), G @ B.T, atol=1e-12)
    np.testing.assert_allclose(gb.numpy(), A.T @ G, atol=1e-12)


def test_take_gradient_scatters_repeated_indices():
    _, (g,) = grads_of(lambda t: ops.sum(ops.take(t, np.array([0, 2, 0]), axis=0)), np.arange(3.0))
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


def test_shape_ops_round_trip_gradients(rng):
    x = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 6))

    def f(t):
        y = ops.reshape(ops.transpose(t, (2, 0, 1)), (4, 6))
        z = ops.concat([y, ops.stack([y[0], y[1]], axis=0)], axis=0)
        return ops.sum(ops.mul(ops.index(z, slice(0, 4)), w))

    _, (g,) = grads_of(f, x)
    np.testing.assert_allclose(g, w.reshape(4, 2, 3).transpose(1, 2, 0), atol=1e-12)
