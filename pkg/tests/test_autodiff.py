import math

import numpy as np
import pytest

from speechkg.autodiff import (
    Segments,
    SparseAdjacency,
    Tensor,
    add,
    add_const,
    binary_cross_entropy_with_logits,
    check_finite_loss,
    concat_cols,
    concat_rows,
    div,
    dropout,
    elu,
    exp,
    expand_segments,
    finite_difference_check,
    gather_rows,
    leaky_relu,
    matmul,
    mean_all,
    mse,
    mul,
    relu,
    row_softmax,
    row_sum,
    scale,
    scale_rows,
    segment_max_const,
    segment_sum,
    sigmoid,
    softmax_cross_entropy,
    spmm,
    sum_all,
)
from speechkg.errors import ConfigError, ShapeError, TrainingError

SMOOTH_TOL = 1e-6
KINKED_TOL = 1e-4


def rand_tensor(shape, seed, away_from_zero=False):
    data = np.random.default_rng(seed).standard_normal(shape)
    if away_from_zero:
        # kinked activations are checked off their kinks only
        data = data + np.sign(data) * 1e-2
        data[data == 0.0] = 0.5
    return Tensor(data, requires_grad=True)


def test_tensor_shape_promotion():
    assert Tensor(3.0).shape == (1, 1)
    assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2))).item()


def test_backward_needs_scalar():
    t = Tensor(np.ones((2, 3)), requires_grad=True)
    with pytest.raises(ShapeError):
        t.backward()


def test_no_graph_without_requires_grad():
    out = add(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
    assert out._backward is None
    assert out._prev == ()
    assert not out.requires_grad


def test_gradient_accumulates_on_reuse():
    t = Tensor([[1.0, 2.0]], requires_grad=True)
    sum_all(add(t, t)).backward()
    assert t.grad.tolist() == [[2.0, 2.0]]


def test_detach_blocks_gradient():
    t = Tensor([[1.0, 2.0]], requires_grad=True)
    sum_all(mul(t.detach(), t)).backward()
    assert t.grad.tolist() == [[1.0, 2.0]]


def test_matmul_hand_values():
    m = rand_tensor((3, 4), 0)
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), m).data, m.data)
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_rows_computed_independently():
    # bitwise: row i of a product equals the product of row i alone
    a, b = rand_tensor((6, 5), 1), rand_tensor((5, 4), 2)
    whole = matmul(a, b).data
    for i in range(6):
        row = matmul(Tensor(a.data[i : i + 1]), b).data
        assert whole[i].tobytes() == row[0].tobytes()


def test_fd_harness_sanity():
    # quadratic: central differences are exact up to roundoff, so a wider
    # step only shrinks the roundoff term
    err = finite_difference_check(
        lambda t: sum_all(mul(t, t)), rand_tensor((3, 3), 4, away_from_zero=True), eps=1e-4
    )
    assert err < 1e-8
    const = Tensor(np.zeros((1, 1)))
    assert finite_difference_check(lambda t: const, rand_tensor((2, 2), 5)) == 0.0


def test_matmul_gradients():
    b_fixed = rand_tensor((4, 3), 7).detach()
    a_fixed = rand_tensor((2, 4), 8).detach()
    err_a = finite_difference_check(lambda t: sum_all(matmul(t, b_fixed)), rand_tensor((2, 4), 9))
    err_b = finite_difference_check(lambda t: sum_all(matmul(a_fixed, t)), rand_tensor((4, 3), 10))
    assert err_a < SMOOTH_TOL and err_b < SMOOTH_TOL


def identity_adjacency(n):
    return SparseAdjacency.from_entries(n, [(i, i, 1.0) for i in range(n)])


def test_spmm_identity():
    h = rand_tensor((4, 3), 11)
    np.testing.assert_array_equal(spmm(identity_adjacency(4), h).data, h.data)


def test_spmm_hand_values():
    # out[i] = sum_j w_ij h[j]
    h = Tensor([[2.0], [4.0]])
    adj = SparseAdjacency.from_entries(2, [(0, 1, 0.5), (1, 0, 0.25)])
    assert spmm(adj, h).data.tolist() == [[2.0], [0.5]]
    symmetric = SparseAdjacency.from_entries(2, [(0, 1, 0.5), (1, 0, 0.5)])
    assert spmm(symmetric, h).data.tolist() == [[2.0], [1.0]]


def test_spmm_matches_dense_oracle():
    rng = np.random.default_rng(12)
    for trial in range(10):
        n = 5
        mask = rng.random((n, n)) < 0.4
        dense = np.where(mask, rng.standard_normal((n, n)), 0.0)
        entries = [(i, j, dense[i, j]) for i in range(n) for j in range(n) if mask[i, j]]
        if not entries:
            continue
        adj = SparseAdjacency.from_entries(n, entries)
        h = rng.standard_normal((n, 3))
        np.testing.assert_allclose(spmm(adj, Tensor(h)).data, dense @ h, atol=1e-12)

        t = Tensor(h, requires_grad=True)
        w = rng.standard_normal((n, 3))
        sum_all(mul(spmm(adj, t), Tensor(w))).backward()
        np.testing.assert_allclose(t.grad, dense.T @ w, atol=1e-12)


def test_spmm_gradient_fd():
    adj = SparseAdjacency.from_entries(3, [(0, 1, 0.5), (1, 0, 2.0), (2, 2, -1.0)])
    err = finite_difference_check(lambda t: sum_all(spmm(adj, t)), rand_tensor((3, 2), 13))
    assert err < SMOOTH_TOL


def test_sparse_adjacency_validation():
    with pytest.raises(ShapeError):
        SparseAdjacency.from_entries(2, [(0, 1, 1.0), (0, 1, 2.0)])
    with pytest.raises(ShapeError):
        SparseAdjacency.from_entries(2, [(0, 5, 1.0)])
    with pytest.raises(ShapeError):
        SparseAdjacency.from_entries(2, [(0, 1, math.nan)])
    adj = SparseAdjacency.from_entries(3, [(2, 0, 1.0), (0, 1, 2.0), (2, 1, 3.0)])
    assert adj.entries == [(0, 1, 2.0), (2, 0, 1.0), (2, 1, 3.0)]
    expected = np.zeros((3, 3))
    expected[2, 0], expected[0, 1], expected[2, 1] = 1.0, 2.0, 3.0
    np.testing.assert_array_equal(adj.to_dense(), expected)


def test_elementwise_values():
    x = Tensor([[-1.0, 0.0, 2.0]])
    assert leaky_relu(x, 0.2).data.tolist() == [[-0.2, 0.0, 2.0]]
    assert relu(x).data.tolist() == [[0.0, 0.0, 2.0]]
    assert sigmoid(Tensor([[0.0]])).item() == 0.5
    np.testing.assert_allclose(sigmoid(Tensor([[800.0, -800.0]])).data, [[1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(
        elu(x).data, [[math.expm1(-1.0), 0.0, 2.0]], atol=1e-15
    )
    assert add_const(x, 1.5).data.tolist() == [[0.5, 1.5, 3.5]]
    assert scale(x, -2.0).data.tolist() == [[2.0, 0.0, -4.0]]


def test_row_softmax_values():
    assert row_softmax(Tensor([[3.7]])).item() == 1.0
    out = row_softmax(rand_tensor((5, 7), 14))
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), atol=1e-12)
    x = rand_tensor((4, 6), 15).data
    shifted = row_softmax(Tensor(x + 123.0))
    np.testing.assert_allclose(shifted.data, row_softmax(Tensor(x)).data, atol=1e-12)


def test_activation_gradients():
    for op, tol in [
        (relu, KINKED_TOL),
        (lambda t: leaky_relu(t, 0.2), KINKED_TOL),
        (elu, KINKED_TOL),
        (sigmoid, SMOOTH_TOL),
        (exp, SMOOTH_TOL),
    ]:
        err = finite_difference_check(
            lambda t: sum_all(op(t)), rand_tensor((4, 3), 16, away_from_zero=True)
        )
        assert err < tol, op


def test_row_softmax_gradient():
    w = rand_tensor((3, 4), 17).detach()
    err = finite_difference_check(
        lambda t: sum_all(mul(row_softmax(t), w)), rand_tensor((3, 4), 18)
    )
    assert err < SMOOTH_TOL


def test_broadcast_add_mul_div():
    col = Tensor(np.arange(3.0).reshape(3, 1))
    row = Tensor(np.arange(2.0).reshape(1, 2))
    assert add(col, row).data.tolist() == [[0.0, 1.0], [1.0, 2.0], [2.0, 3.0]]
    assert mul(col, row).data.tolist() == [[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]]
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    full = rand_tensor((3, 2), 19).detach()
    for make in [
        lambda t: add(t, full),
        lambda t: mul(t, full),
        lambda t: div(full, add_const(mul(t, t), 1.0)),
    ]:
        err = finite_difference_check(lambda t: sum_all(make(t)), rand_tensor((3, 1), 20))
        assert err < SMOOTH_TOL


def test_scale_rows():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    out = scale_rows(t, np.array([2.0, -1.0]))
    assert out.data.tolist() == [[2.0, 4.0], [-3.0, -4.0]]
    err = finite_difference_check(
        lambda t: sum_all(scale_rows(t, np.array([2.0, -1.0, 0.5]))), rand_tensor((3, 2), 21)
    )
    assert err < SMOOTH_TOL


def test_gather_rows():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    out = gather_rows(t, np.array([1, 0, 0]))
    assert out.data.tolist() == [[3.0, 4.0], [1.0, 2.0], [1.0, 2.0]]
    sum_all(out).backward()
    assert t.grad.tolist() == [[2.0, 2.0], [1.0, 1.0]]
    with pytest.raises(ShapeError):
        gather_rows(t, np.array([2]))
    err = finite_difference_check(
        lambda t: sum_all(gather_rows(t, np.array([0, 2, 2, 1]))), rand_tensor((3, 2), 22)
    )
    assert err < SMOOTH_TOL


def test_segments_and_segment_ops():
    ids = np.array([0, 0, 1, 2, 2, 2])
    seg = Segments.from_sorted_ids(ids, 3)
    t = Tensor(np.arange(12.0).reshape(6, 2), requires_grad=True)
    summed = segment_sum(t, seg)
    # oracle: plain per-segment slicing
    expected = np.stack([t.data[0:2].sum(0), t.data[2:3].sum(0), t.data[3:6].sum(0)])
    np.testing.assert_array_equal(summed.data, expected)

    maxed = segment_max_const(t, seg)
    np.testing.assert_array_equal(
        maxed, np.stack([t.data[0:2].max(0), t.data[2:3].max(0), t.data[3:6].max(0)])
    )

    s = Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], requires_grad=True)
    np.testing.assert_array_equal(expand_segments(s, seg).data, s.data[ids])

    with pytest.raises(ShapeError):
        Segments.from_sorted_ids(np.array([0, 2]), 3)  # segment 1 empty
    with pytest.raises(ShapeError):
        Segments.from_sorted_ids(np.array([1, 0]), 2)

    for fn, shape in [
        (lambda t: sum_all(mul(segment_sum(t, seg), Tensor([[1.0, -2.0]] * 3))), (6, 2)),
        (lambda t: sum_all(mul(expand_segments(t, seg), Tensor(np.ones((6, 2))))), (3, 2)),
    ]:
        assert finite_difference_check(fn, rand_tensor(shape, 23)) < SMOOTH_TOL


def test_concat():
    a = Tensor([[1.0], [2.0]], requires_grad=True)
    b = Tensor([[3.0, 4.0], [5.0, 6.0]], requires_grad=True)
    assert concat_cols(a, b).data.tolist() == [[1.0, 3.0, 4.0], [2.0, 5.0, 6.0]]
    assert concat_rows(a, Tensor([[9.0]])).data.tolist() == [[1.0], [2.0], [9.0]]
    other = rand_tensor((3, 2), 24).detach()
    for fn in [
        lambda t: sum_all(mul(concat_cols(t, other), concat_cols(other, t))),
        lambda t: sum_all(concat_rows(t, other)),
    ]:
        assert finite_difference_check(fn, rand_tensor((3, 2), 25)) < SMOOTH_TOL


def test_reductions():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    assert row_sum(t).data.tolist() == [[3.0], [7.0]]
    assert sum_all(t).item() == 10.0
    assert mean_all(t).item() == 2.5
    for fn in [lambda x: sum_all(mul(row_sum(x), row_sum(x))), mean_all]:
        assert finite_difference_check(fn, rand_tensor((3, 4), 26)) < SMOOTH_TOL


def test_dropout_semantics():
    t = rand_tensor((20, 10), 27)
    np.testing.assert_array_equal(dropout(t, 0.0, 1, True).data, t.data)
    np.testing.assert_array_equal(dropout(t, 0.9, 1, False).data, t.data)
    with pytest.raises(ConfigError):
        dropout(t, 1.0, 1, True)

    ones = Tensor(np.ones((100_000, 1)))
    kept = dropout(ones, 0.5, 2, True)
    assert 0.98 < kept.data.mean() < 1.02
    # survivors are scaled by 1/(1-p)
    assert set(np.unique(kept.data)) == {0.0, 2.0}

    a = dropout(t, 0.3, 5, True).data
    b = dropout(t, 0.3, 5, True).data
    np.testing.assert_array_equal(a, b)

    err = finite_difference_check(
        lambda x: sum_all(dropout(x, 0.4, 11, True)), rand_tensor((5, 4), 28)
    )
    assert err < SMOOTH_TOL


def test_bce_hand_value_and_validation():
    assert abs(binary_cross_entropy_with_logits(Tensor([[0.0]]), [1.0]).item() - math.log(2)) < 1e-12
    big = binary_cross_entropy_with_logits(Tensor([[40.0], [-40.0]]), [1.0, 0.0])
    assert big.item() < 1e-12
    with pytest.raises(ShapeError):
        binary_cross_entropy_with_logits(Tensor([[0.0]]), [0.5])


def test_cross_entropy_limits_and_validation():
    logits = Tensor([[30.0, 0.0], [0.0, 30.0]])
    one_hot = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert softmax_cross_entropy(logits, one_hot).item() < 1e-12
    wrong = softmax_cross_entropy(Tensor([[30.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert wrong.item() > 29.0
    with pytest.raises(ShapeError):
        softmax_cross_entropy(logits, np.array([[0.5, 0.5], [0.0, 1.0]]))


def test_mse_value():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[0.0, 4.0]])
    assert mse(a, b).item() == pytest.approx((1.0 + 4.0) / 2.0)


def test_loss_gradients():
    labels = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    err = finite_difference_check(
        lambda t: binary_cross_entropy_with_logits(t, labels), rand_tensor((5, 1), 29)
    )
    assert err < SMOOTH_TOL

    one_hot = np.eye(3)[[0, 2, 1, 1]]
    err = finite_difference_check(
        lambda t: softmax_cross_entropy(t, one_hot), rand_tensor((4, 3), 30)
    )
    assert err < SMOOTH_TOL

    other = rand_tensor((3, 2), 31).detach()
    for fn in [lambda t: mse(t, other), lambda t: mse(other, t)]:
        assert finite_difference_check(fn, rand_tensor((3, 2), 32)) < SMOOTH_TOL


def test_check_finite_loss():
    assert check_finite_loss(Tensor([[1.5]]), "epoch 3") == 1.5
    with pytest.raises(TrainingError, match="epoch 3"):
        check_finite_loss(Tensor([[math.nan]]), "epoch 3")
