import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpg.core import Permutation, apply_permutation
from gpg.gnn import (FilterTensor, MissingMessageError, ShapeError, gnn_backward, gnn_forward,
                     gnn_forward_local)


def random_graph(n, rng, density=0.4):
    S = (rng.random((n, n)) < density).astype(float)
    np.fill_diagonal(S, 1.0)
    return S


def random_filter(widths, K, rng, bias=True):
    H = FilterTensor.init(widths, K, rng)
    if bias:
        H.biases = [rng.normal(scale=0.3, size=b.shape) for b in H.biases]
    return H


def dense_forward(X, S, H):
    """Independent oracle: explicit matrix powers, no shared kernels."""
    Y = X
    for l in range(H.L):
        Z = np.zeros((X.shape[0], H.widths[l + 1]))
        Sk = np.eye(X.shape[0])
        for k in range(H.K):
            Z += Sk @ Y @ H.weights[l][k]
            Sk = Sk @ S
        Z += H.biases[l]
        Y = np.tanh(Z) if l < H.L - 1 else Z
    return Y


def test_zero_hop_is_linear_map():
    rng = np.random.default_rng(0)
    H = FilterTensor([rng.normal(size=(1, 3, 2))], [np.zeros(2)])
    X = rng.normal(size=(4, 3))
    A, _ = gnn_forward(X, random_graph(4, rng), H)
    assert np.allclose(A, X @ H.weights[0][0], atol=1e-15)


def test_two_node_hand_example():
    H = FilterTensor([np.array([[[1.0]], [[1.0]]])], [np.zeros(1)])
    S = np.array([[1.0, 1.0], [1.0, 1.0]])
    A, _ = gnn_forward(np.array([[1.0], [0.0]]), S, H)
    assert np.array_equal(A, [[2.0], [1.0]])


def test_zero_filter_gives_zero():
    rng = np.random.default_rng(1)
    H = FilterTensor.zeros_like(FilterTensor.init((3, 5, 2), 3, rng))
    A, _ = gnn_forward(rng.normal(size=(6, 3)), random_graph(6, rng), H)
    assert np.array_equal(A, np.zeros((6, 2)))


def test_forward_matches_dense_oracle_and_batches():
    rng = np.random.default_rng(2)
    H = random_filter((4, 6, 5, 2), 3, rng)
    Xs = rng.normal(size=(3, 7, 4))
    Ss = np.stack([random_graph(7, rng) for _ in range(3)])
    A, trace = gnn_forward(Xs, Ss, H)
    for b in range(3):
        assert np.allclose(A[b], dense_forward(Xs[b], Ss[b], H), atol=1e-12)
        assert np.array_equal(A[b], gnn_forward(Xs[b], Ss[b], H)[0])
    assert np.allclose(trace.post[1], np.tanh(trace.pre[1]), atol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_permutation_equivariance(n, K, L, seed):
    rng = np.random.default_rng(seed)
    widths = (3,) + tuple(rng.integers(1, 6, size=L - 1)) + (2,)
    H = random_filter(widths, K, rng)
    X, S = rng.normal(size=(n, 3)), random_graph(n, rng)
    P = Permutation.random(n, rng)
    Xp, Sp = apply_permutation(P, X, S)
    A, _ = gnn_forward(X, S, H)
    Ap, _ = gnn_forward(Xp, Sp, H)
    assert np.max(np.abs(Ap - A[P.perm]), initial=0.0) <= 1e-9


def test_local_matches_centralized_exactly():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 12))
        H = random_filter((4, 8, 2), 3, rng)
        X, S = rng.normal(size=(n, 4)), random_graph(n, rng)
        A, _ = gnn_forward(X, S, H)
        local, _ = gnn_forward_local(X, S, H)
        assert np.array_equal(local, A)


def test_local_single_node():
    rng = np.random.default_rng(4)
    H = random_filter((2, 3, 2), 2, rng)
    X = rng.normal(size=(1, 2))
    assert np.array_equal(gnn_forward_local(X, np.ones((1, 1)), H)[0], gnn_forward(X, np.ones((1, 1)), H)[0])


def test_local_message_counts():
    rng = np.random.default_rng(5)
    n, M, K, L = 6, 2, 3, 2
    S = np.eye(n)
    for i in range(n):
        S[i, rng.choice([j for j in range(n) if j != i], M, replace=False)] = 1
    H = random_filter((2, 4, 2), K, rng)
    _, received = gnn_forward_local(rng.normal(size=(n, 2)), S, H)
    assert np.all(received == L * (K - 1) * (1 + M))


def test_local_missing_message_raises():
    rng = np.random.default_rng(6)
    S = np.ones((3, 3))
    H = random_filter((2, 2), 2, rng)
    with pytest.raises(MissingMessageError):
        gnn_forward_local(rng.normal(size=(3, 2)), S, H, drop={(0, 1, 0, 2)})


def test_receptive_field_on_path_graph():
    rng = np.random.default_rng(7)
    n, K, L = 9, 2, 2
    S = np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)
    H = random_filter((2, 4, 2), K, rng)
    X = rng.normal(size=(n, 2))
    base, _ = gnn_forward(X, S, H)
    reach = (K - 1) * L
    for m in range(n):
        Xm = X.copy()
        Xm[m] += 1.0
        changed = np.any(gnn_forward(Xm, S, H)[0] != base, axis=1)
        for i in range(n):
            if abs(i - m) > reach:
                assert not changed[i]


def finite_difference(f, vec, h=1e-5):
    g = np.zeros_like(vec)
    for i in range(vec.size):
        up, dn = vec.copy(), vec.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(8)
    H = random_filter((3, 5, 2), 3, rng)
    X, S = rng.normal(size=(5, 3)), random_graph(5, rng)
    U = rng.normal(size=(5, 2))
    _, trace = gnn_forward(X, S, H)
    grad, grad_X = gnn_backward(trace, S, H, U)
    loss = lambda v: float(np.sum(gnn_forward(X, S, H.from_vector(v))[0] * U))
    fd = finite_difference(loss, H.to_vector())
    assert np.max(np.abs(grad.to_vector() - fd)) / np.max(np.abs(fd)) <= 1e-5
    loss_x = lambda v: float(np.sum(gnn_forward(v.reshape(X.shape), S, H)[0] * U))
    fdx = finite_difference(loss_x, X.ravel())
    assert np.max(np.abs(grad_X.ravel() - fdx)) / np.max(np.abs(fdx)) <= 1e-5


def test_backward_trivial_cases():
    H = FilterTensor([np.array([[[3.0]]])], [np.zeros(1)])
    X, S = np.array([[2.0]]), np.ones((1, 1))
    _, trace = gnn_forward(X, S, H)
    grad, _ = gnn_backward(trace, S, H, np.ones((1, 1)))
    assert grad.weights[0][0, 0, 0] == 2.0
    grad, grad_X = gnn_backward(trace, S, H, np.zeros((1, 1)))
    assert not np.any(grad.to_vector()) and not np.any(grad_X)


def test_filter_validation():
    with pytest.raises(ShapeError):
        FilterTensor([np.zeros((2, 3, 4)), np.zeros((2, 5, 2))], [np.zeros(4), np.zeros(2)])
    with pytest.raises(ShapeError):
        FilterTensor([np.full((1, 2, 2), np.inf)], [np.zeros(2)])
    H = FilterTensor.init((3, 2), 2, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        gnn_forward(np.zeros((4, 5)), np.eye(4), H)
    with pytest.raises((ShapeError, ValueError)):
        gnn_forward(np.full((4, 3), np.nan), np.eye(4), H)


def test_init_range():
    rng = np.random.default_rng(9)
    H = FilterTensor.init((8, 32, 2), 3, rng)
    assert np.max(np.abs(H.weights[0])) <= np.sqrt(1 / 24)
    assert np.max(np.abs(H.weights[1])) <= np.sqrt(1 / 96)
    assert not any(np.any(b) for b in H.biases)


def test_serialization_round_trip_and_header():
    rng = np.random.default_rng(10)
    H = random_filter((4, 6, 2), 3, rng)
    data = H.to_bytes()
    assert data[:4] == b"GPGF"
    H2 = FilterTensor.from_bytes(data)
    assert np.array_equal(H2.to_vector(), H.to_vector()) and H2.widths == H.widths
    with pytest.raises(ShapeError):
        FilterTensor.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ShapeError):
        FilterTensor.from_bytes(data[:-3])
    buf = io.BytesIO()
    H.write(buf)
    assert buf.getvalue() == data
