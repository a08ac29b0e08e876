import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egoaco import ops, pooling, selection
from egoaco.tensor import DimensionError, Tape, Tensor

dims = st.integers(1, 5)
seeds = st.integers(0, 2**31 - 1)


def loop_cap(X, A, B):
    """Reference CAP written with explicit loops and no framework ops."""
    N, K = X.shape
    C = A.shape[1]
    scores = [sum(X[n, k] * A[k, c] for n in range(N) for k in range(K)) for c in range(C)]
    best = max(range(C), key=lambda c: (scores[c], -c))
    s = [sum(X[n, k] * A[k, best] for k in range(K)) for n in range(N)]
    m = max(s)
    e = [np.exp(v - m) for v in s]
    att = [v / sum(e) for v in e]
    pooled = [sum(att[n] * X[n, k] for n in range(N)) for k in range(K)]
    desc = [sum(pooled[k] * B[k, j] for k in range(K)) for j in range(B.shape[1])]
    return best, np.array(att), np.array(desc)


def test_cap_matches_loop_reference(rng):
    X, A, B = rng.standard_normal((6, 4)), rng.standard_normal((4, 3)), rng.standard_normal((4, 5))
    out = pooling.cap_pool(X, A, B)
    c, att, desc = loop_cap(X, A, B)
    assert out.selected_index == c
    np.testing.assert_allclose(out.attention.numpy(), att, atol=1e-12)
    np.testing.assert_allclose(out.descriptor.numpy(), desc, atol=1e-12)


def test_first_order_and_rank1_closed_forms(rng):
    X, W, a = rng.standard_normal((5, 3)), rng.standard_normal((3, 2)), rng.standard_normal(3)
    np.testing.assert_allclose(pooling.pool_first_order(X, W).numpy(), X.sum(0) @ W, atol=1e-12)
    np.testing.assert_allclose(pooling.pool_rank1(X, a, W).numpy(), (X @ a) @ X @ W, atol=1e-12)


@given(seeds, dims, dims, dims)
def test_single_entry_dictionary_is_softmax_rank1(seed, N, K, D):
    rng = np.random.default_rng(seed)
    X, a, B = rng.standard_normal((N, K)), rng.standard_normal((K, 1)), rng.standard_normal((K, D))
    out = pooling.cap_pool(X, a, B)
    s = X @ a[:, 0]
    w = np.exp(s - s.max())
    w /= w.sum()
    assert out.selected_index == 0
    assert np.max(np.abs(out.descriptor.numpy() - (w @ X) @ B)) <= 1e-12


@given(seeds, dims, dims, dims)
def test_cam_mode_attention_is_softmax_of_selected_column(seed, N, K, C):
    rng = np.random.default_rng(seed)
    X, A = rng.standard_normal((N, K)), rng.standard_normal((K, C))
    out = pooling.cap_pool(X, A, A)
    c = int(np.argmax(X.sum(0) @ A))
    s = X @ A[:, c]
    ref = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    assert out.selected_index == c
    assert np.max(np.abs(out.attention.numpy() - ref)) <= 1e-12


@given(seeds, dims, dims, dims, st.floats(1e-3, 1e3))
def test_selector_invariant_under_positive_scaling(seed, N, K, C, alpha):
    rng = np.random.default_rng(seed)
    X, A = rng.standard_normal((N, K)), rng.standard_normal((K, C))
    assert pooling.select_entry(X, A) == pooling.select_entry(alpha * X, A)


def test_selector_ties_go_to_lowest_index():
    X = np.ones((2, 2))
    A = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    assert pooling.select_entry(X, A) == 0


@given(seeds, st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4))
def test_context_descriptor_is_permutation_invariant(seed, T, H, W, K):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((T, H, W, K))
    A, B = rng.standard_normal((K, 3)), rng.standard_normal((K, 2))
    perm = rng.permutation(T)
    a = pooling.context_descriptor(x, A, B)
    b = pooling.context_descriptor(x[perm], A, B)
    np.testing.assert_allclose(a.descriptor.numpy(), b.descriptor.numpy(), atol=1e-12)
    np.testing.assert_array_equal(a.selected_index[perm], b.selected_index)


@given(seeds, st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4))
def test_attention_maps_sum_to_one(seed, T, H, W, K):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((T, H, W, K)) * 5
    A, B = rng.standard_normal((K, 3)), rng.standard_normal((K, 2))
    obj = pooling.object_descriptor(x, A, B)
    assert abs(obj.attention.numpy().sum() - 1) <= 1e-9
    ctx = pooling.context_descriptor(x, A, B)
    np.testing.assert_allclose(ctx.attention.numpy().sum(-1), np.ones(T), atol=1e-9)
    _, att = pooling.ca_attn(x, A, batch_dims=1)
    np.testing.assert_allclose(att.numpy().sum((-2, -1)), np.ones(T), atol=1e-9)


def test_batched_cap_matches_per_sample(rng):
    X, A, B = rng.standard_normal((3, 5, 4)), rng.standard_normal((4, 6)), rng.standard_normal((4, 2))
    out = pooling.cap_pool(X, A, B)
    for i in range(3):
        one = pooling.cap_pool(X[i], A, B)
        assert out.selected_index[i] == one.selected_index
        np.testing.assert_allclose(out.descriptor.numpy()[i], one.descriptor.numpy(), atol=1e-12)


def test_gradient_reaches_only_selected_column(rng):
    X, A, B = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((4, 3))), Tensor(rng.standard_normal((4, 2)))
    with Tape() as tape:
        tape.watch(X, A, B)
        out = pooling.cap_pool(X, A, B)
        loss = ops.sum(out.descriptor)
    _, gA, _ = tape.gradient(loss, [X, A, B])
    others = [c for c in range(3) if c != out.selected_index]
    assert np.all(gA.numpy()[:, others] == 0)
    assert np.any(gA.numpy()[:, out.selected_index] != 0)


def test_replayed_selection_is_frozen(rng):
    X, A = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    with selection.recording() as trace:
        c = pooling.select_entry(X, A)
    flipped = A.copy()
    flipped[:, c] = -100.0
    with selection.replaying(trace):
        assert pooling.select_entry(X, flipped) == c
    assert trace.flips == (1 if pooling.select_entry(X, flipped) != c else 0)


def test_shape_errors(rng):
    with pytest.raises(DimensionError):
        pooling.cap_pool(rng.standard_normal((5, 4)), rng.standard_normal((3, 2)), rng.standard_normal((4, 2)))
    with pytest.raises(DimensionError):
        pooling.object_descriptor(rng.standard_normal((5, 4)), np.ones((4, 1)), np.ones((4, 1)))
