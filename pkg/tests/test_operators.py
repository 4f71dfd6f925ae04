import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmvb.operators import (
    ComposedOperator,
    DimensionError,
    IdentityOperator,
    ScaledOperator,
    SelectionOperator,
    StackOperator,
    conv2_operator,
    finite_difference_operator,
    kernel_impulse,
    materialize_dense,
)


def brute_conv(kernel, x):
    """y[p] = sum_a k[a] x[p - a] with periodic indices, by explicit loops."""
    h, w = x.shape
    kh, kw = kernel.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(kh):
                for b in range(kw):
                    acc += kernel[a, b] * x[(i - (a - kh // 2)) % h, (j - (b - kw // 2)) % w]
            out[i, j] = acc
    return out


def adjoint_gap(op, rng):
    x = rng.standard_normal(op.in_dim)
    y = rng.standard_normal(op.out_dim)
    lhs, rhs = op.forward(x) @ y, x @ op.adjoint(y)
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def test_identity_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(35)
    H = conv2_operator(np.ones((1, 1)), (5, 7))
    np.testing.assert_allclose(H.forward(x), x, rtol=0, atol=1e-14)


def test_shift_kernel_preserves_constants():
    H = conv2_operator(np.array([[0.0, 0.0, 1.0]]), (4, 6))
    np.testing.assert_allclose(H.forward(np.full(24, 0.7)), 0.7, rtol=0, atol=1e-15)


def test_box_kernel_matches_dense_circulant():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 8))
    k = np.full((3, 3), 1 / 9)
    H = conv2_operator(k, (8, 8))
    C = materialize_dense(H)
    np.testing.assert_allclose(C @ x.ravel(), H.forward(x.ravel()), atol=1e-13)
    np.testing.assert_allclose(H.forward(x.ravel()), brute_conv(k, x).ravel(), atol=1e-13)


def test_asymmetric_kernel_orientation_matches_loops():
    rng = np.random.default_rng(2)
    k = rng.random((3, 5))
    x = rng.standard_normal((7, 9))
    H = conv2_operator(k, x.shape)
    np.testing.assert_allclose(H.forward(x.ravel()), brute_conv(k, x).ravel(), atol=1e-12)


def test_adjoint_is_flipped_correlation():
    rng = np.random.default_rng(3)
    k = rng.random((3, 3))
    y = rng.standard_normal((6, 6))
    H = conv2_operator(k, y.shape)
    np.testing.assert_allclose(H.adjoint(y.ravel()), brute_conv(k[::-1, ::-1], y).ravel(), atol=1e-12)


def test_kernel_larger_than_domain_rejected():
    with pytest.raises(DimensionError):
        conv2_operator(np.ones((5, 5)) / 25, (4, 8))
    with pytest.raises(DimensionError):
        conv2_operator(np.ones((2, 3)), (8, 8))


def test_batched_application():
    rng = np.random.default_rng(4)
    H = conv2_operator(rng.random((3, 3)), (5, 6))
    X = rng.standard_normal((4, 30))
    np.testing.assert_allclose(H.forward(X), np.stack([H.forward(x) for x in X]), atol=1e-13)
    with pytest.raises(DimensionError):
        H.forward(np.zeros(29))


def test_fd_constant_image_zero():
    G = finite_difference_operator((5, 4))
    np.testing.assert_allclose(G.forward(np.full(20, 3.3)), 0.0, atol=1e-15)
    assert G.out_dim == 40


def test_fd_two_by_two_hand_values():
    G = finite_difference_operator((2, 2))
    s = G.forward(np.array([[0.0, 1.0], [0.0, 1.0]]).ravel())
    horiz, vert = s[:4], s[4:]
    np.testing.assert_array_equal(np.abs(horiz), 1.0)
    np.testing.assert_array_equal(vert, 0.0)


def test_fd_adjoint_random_pairs():
    rng = np.random.default_rng(5)
    G = finite_difference_operator((6, 6))
    x = rng.standard_normal(36)
    for _ in range(100):
        u = rng.standard_normal(72)
        assert abs(G.forward(x) @ u - x @ G.adjoint(u)) <= 1e-10 * max(1.0, abs(x @ G.adjoint(u)))


def test_fd_rejects_tiny_sides():
    with pytest.raises(DimensionError):
        finite_difference_operator((1, 5))


def test_materialize_examples():
    np.testing.assert_array_equal(materialize_dense(IdentityOperator(3)), np.eye(3))
    np.testing.assert_allclose(materialize_dense(conv2_operator(np.ones((1, 1)), (3, 4))), np.eye(12), atol=1e-15)
    D = materialize_dense(finite_difference_operator((3, 3)))
    assert D.shape == (18, 9)
    np.testing.assert_allclose(D.sum(axis=1), 0.0, atol=1e-14)


def test_materialize_guard():
    with pytest.raises(DimensionError):
        materialize_dense(IdentityOperator(3000))


def test_conv_is_normal():
    rng = np.random.default_rng(6)
    C = materialize_dense(conv2_operator(rng.random((5, 5)), (12, 12)))
    assert np.linalg.norm(C @ C.T - C.T @ C) <= 1e-9


def test_fd_nullspace_is_constants():
    D = materialize_dense(finite_difference_operator((6, 7)))
    assert np.linalg.matrix_rank(D) == 6 * 7 - 1


def test_gram_symbols_match_dense():
    rng = np.random.default_rng(7)
    dims = (6, 8)
    H = conv2_operator(rng.random((3, 3)), dims)
    Hd = materialize_dense(H)
    # eigenvalues of a circulant Gram matrix: DFT of its first column
    col = (Hd.T @ Hd)[:, 0].reshape(dims)
    np.testing.assert_allclose(H.gram_symbol(), np.real(np.fft.fft2(col)), atol=1e-12)
    G = finite_difference_operator(dims)
    w = np.concatenate([np.full(48, 2.0), np.full(48, 0.5)])
    Gd = materialize_dense(G)
    col = (Gd.T @ (w[:, None] * Gd))[:, 0].reshape(dims)
    np.testing.assert_allclose(G.gram_symbol(w), np.real(np.fft.fft2(col)), atol=1e-12)


def test_composed_selection_gram_is_mask_average():
    rng = np.random.default_rng(8)
    dims = (8, 8)
    C = conv2_operator(rng.random((3, 3)), dims)
    S = SelectionOperator(dims, (slice(1, 7), slice(1, 7)))
    H = ComposedOperator(S, C)
    np.testing.assert_allclose(H.gram_symbol(), (36 / 64) * C.gram_symbol(), atol=1e-12)


def test_kernel_impulse_centre_at_origin():
    k = np.arange(9, dtype=float).reshape(3, 3)
    imp = kernel_impulse(k, (5, 5))
    assert imp[0, 0] == k[1, 1]
    assert imp[4, 4] == k[0, 0]


operators = st.sampled_from(["conv", "fd", "stack", "scaled", "select", "composed", "conv1d"])


@settings(max_examples=60, deadline=None)
@given(kind=operators, h=st.integers(3, 9), w=st.integers(3, 9), seed=st.integers(0, 10_000))
def test_adjoint_identity_property(kind, h, w, seed):
    rng = np.random.default_rng(seed)
    k = rng.standard_normal((3, 3))
    if kind == "conv":
        op = conv2_operator(k, (h, w))
    elif kind == "conv1d":
        op = conv2_operator(rng.standard_normal(3), (h * w,))
    elif kind == "fd":
        op = finite_difference_operator((h, w))
    elif kind == "stack":
        op = StackOperator([conv2_operator(k, (h, w)), finite_difference_operator((h, w))])
    elif kind == "scaled":
        op = ScaledOperator(finite_difference_operator((h, w)), -2.5)
    elif kind == "select":
        op = SelectionOperator((h, w), (slice(1, h), slice(0, w - 1)))
    else:
        op = ComposedOperator(SelectionOperator((h, w), (slice(1, h - 1), slice(1, w - 1))),
                              conv2_operator(k, (h, w)))
    assert op.forward(rng.standard_normal(op.in_dim)).shape == (op.out_dim,)
    assert adjoint_gap(op, rng) <= 1e-10
