"""Autodiff engine tests.

Expected gradients here come from two independent sources: hand-derived
closed forms frozen as literals, and central finite differences via
grad_check. Segment ops are additionally checked against plain-loop
reference implementations.
"""

import numpy as np
import pytest
import scipy.sparse as sp

from oodgat import engine
from oodgat.engine import (
    GradTape,
    SegmentIndex,
    Tensor,
    absolute,
    add,
    backward,
    build_segment_index,
    cosine_similarity,
    div,
    dropout,
    elu,
    exp,
    gather_rows,
    grad_check,
    hstack,
    leaky_relu,
    log,
    matmul,
    mul,
    pick,
    pointwise,
    reduce_mean,
    reduce_op,
    reduce_sum,
    relu,
    row_softmax,
    row_sum,
    scale,
    sigmoid,
    slice_rows,
    sqrt,
    sub,
)
from oodgat.errors import EngineError


def leaf(values):
    return Tensor(values, requires_grad=True)


# ---------------------------------------------------------------------------
# tensor and tape basics


def test_tensor_rejects_non_2d():
    with pytest.raises(EngineError):
        Tensor([1.0, 2.0])
    with pytest.raises(EngineError):
        Tensor(np.zeros((2, 2, 2)))


def test_tensor_casts_to_float64():
    t = Tensor(np.array([[1, 2]], dtype=np.int32))
    assert t.values.dtype == np.float64


def test_backward_requires_scalar_loss():
    w = leaf(np.ones((2, 2)))
    with GradTape():
        y = mul(w, w)
        with pytest.raises(EngineError, match="1x1"):
            backward(y)


def test_backward_twice_on_same_tape_raises():
    w = leaf(np.ones((2, 2)))
    with GradTape():
        loss = reduce_sum(w)
        backward(loss)
        with pytest.raises(EngineError, match="consumed"):
            backward(loss)


def test_nested_tapes_raise():
    with GradTape():
        with pytest.raises(EngineError, match="already active"):
            with GradTape():
                pass


def test_backward_without_tape_raises():
    w = leaf(np.ones((2, 2)))
    loss = reduce_sum(w)  # no tape active: nothing recorded
    with pytest.raises(EngineError, match="not attached"):
        backward(loss)


def test_ops_outside_tape_do_not_track():
    w = leaf(np.ones((2, 2)))
    y = mul(w, w)
    assert y.requires_grad is False
    assert y.tape_id is None


# ---------------------------------------------------------------------------
# frozen closed-form gradients


def test_sum_of_leaf_gives_ones():
    w = leaf(np.arange(6, dtype=float).reshape(2, 3))
    with GradTape():
        grads = backward(reduce_sum(w))
    np.testing.assert_array_equal(grads[w], np.ones((2, 3)))


def test_quadratic_gives_two_w():
    rng = np.random.default_rng(0)
    w = leaf(rng.uniform(-1, 1, size=(3, 4)))
    with GradTape():
        grads = backward(reduce_sum(mul(w, w)))
    np.testing.assert_allclose(grads[w], 2.0 * w.values, rtol=0, atol=1e-12)


def test_independent_leaf_is_absent_from_grad_map():
    w = leaf(np.ones((2, 2)))
    v = leaf(np.ones((2, 2)))
    with GradTape():
        grads = backward(reduce_sum(v))
    assert w not in grads
    assert v in grads


def test_fanout_accumulates():
    x = leaf([[3.0]])
    with GradTape():
        grads = backward(reduce_sum(add(x, x)))
    np.testing.assert_array_equal(grads[x], [[2.0]])


def test_matmul_hand_derived():
    a = leaf([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = leaf([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    with GradTape():
        y = matmul(a, b)
        grads = backward(reduce_sum(y))
    np.testing.assert_array_equal(y.values, [[4.0, 5.0], [10.0, 11.0]])
    # d(sum)/dA_ij = sum_k B_jk, d(sum)/dB_jk = sum_i A_ij
    np.testing.assert_array_equal(grads[a], [[1.0, 1.0, 2.0], [1.0, 1.0, 2.0]])
    np.testing.assert_array_equal(grads[b], [[5.0, 5.0], [7.0, 7.0], [9.0, 9.0]])


def test_abs_subgradient_at_zero_is_zero():
    x = leaf([[0.0, -2.0, 3.0]])
    with GradTape():
        grads = backward(reduce_sum(absolute(x)))
    np.testing.assert_array_equal(grads[x], [[0.0, -1.0, 1.0]])


def test_log_clamps_small_arguments():
    x = leaf([[1e-20, 1.0]])
    y = log(x)
    np.testing.assert_allclose(y.values, [[np.log(1e-12), 0.0]])
    with GradTape():
        grads = backward(reduce_sum(log(x)))
    # below the clamp the forward is constant, so the derivative is zero
    np.testing.assert_array_equal(grads[x][0, 0], 0.0)
    np.testing.assert_allclose(grads[x][0, 1], 1.0)


def test_scalar_broadcast_add_and_mul():
    x = leaf(np.ones((2, 3)))
    c = leaf([[2.0]])
    with GradTape():
        grads = backward(reduce_sum(mul(add(x, c), c)))
    # loss = sum((x + c) * c) = c*sum(x) + 6c^2
    np.testing.assert_allclose(grads[x], np.full((2, 3), 2.0))
    np.testing.assert_allclose(grads[c], [[6.0 + 24.0]])


def test_shape_mismatch_raises():
    with pytest.raises(EngineError, match="mismatch"):
        add(leaf(np.ones((2, 3))), leaf(np.ones((3, 2))))
    with pytest.raises(EngineError, match="mismatch"):
        matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_constant_inputs_get_no_gradient():
    w = leaf(np.ones((3, 2)))
    x = np.arange(6, dtype=float).reshape(2, 3)  # plain ndarray constant
    with GradTape():
        grads = backward(reduce_sum(matmul(x, w)))
    assert list(grads) == [w]
    np.testing.assert_array_equal(grads[w], x.sum(axis=0)[:, None] * np.ones((3, 2)))


# ---------------------------------------------------------------------------
# sparse constants


def test_sparse_left_matmul_matches_dense():
    rng = np.random.default_rng(1)
    dense = rng.random((6, 5)) * (rng.random((6, 5)) < 0.4)
    w = leaf(rng.standard_normal((5, 3)))
    with GradTape():
        g_dense = backward(reduce_sum(matmul(dense, w)))[w]
    w2 = leaf(w.values.copy())
    with GradTape():
        y = matmul(sp.csr_matrix(dense), w2)
        g_sparse = backward(reduce_sum(y))[w2]
    assert isinstance(y.values, np.ndarray)
    np.testing.assert_allclose(g_sparse, g_dense, rtol=0, atol=1e-14)


def test_sparse_rejected_outside_matmul():
    xs = sp.csr_matrix(np.eye(3))
    with pytest.raises(EngineError, match="matmul"):
        add(xs, leaf(np.eye(3)))


# ---------------------------------------------------------------------------
# segment ops


def loop_segment_softmax(logits, index):
    out = np.empty_like(logits)
    for i in range(index.num_nodes):
        lo, hi = index.offsets[i], index.offsets[i + 1]
        seg = logits[lo:hi]
        z = np.exp(seg - seg.max())
        out[lo:hi] = z / z.sum()
    return out


def loop_segment_weighted_sum(values, weights, index):
    out = np.zeros((index.num_nodes, values.shape[1]))
    for k in range(index.num_entries):
        out[index.targets[k]] += weights[k, 0] * values[k]
    return out


def small_index():
    # edges 1->0, 2->0, 0->2 plus self entries for nodes 0..2
    return build_segment_index(np.array([1, 2, 0]), np.array([0, 0, 2]), 3)


def test_build_segment_index_layout():
    idx = small_index()
    assert idx.num_nodes == 3
    assert idx.num_entries == 6
    np.testing.assert_array_equal(idx.targets, [0, 0, 0, 1, 2, 2])
    np.testing.assert_array_equal(idx.sources, [0, 1, 2, 1, 0, 2])
    np.testing.assert_array_equal(idx.offsets, [0, 3, 4, 6])
    # one self entry per node, found where source == target
    np.testing.assert_array_equal(idx.sources[idx.self_pos], [0, 1, 2])


def test_build_segment_index_drops_duplicate_self_loops():
    idx = build_segment_index(np.array([0, 0, 1]), np.array([0, 0, 0]), 2)
    assert idx.num_entries == 3  # self 0, edge 1->0, self 1
    np.testing.assert_array_equal(idx.targets, [0, 0, 1])


def test_segment_index_validation():
    with pytest.raises(EngineError, match="sorted"):
        SegmentIndex(targets=np.array([1, 0]), sources=np.array([0, 0]),
                     offsets=np.array([0, 1, 2]), num_nodes=2)
    with pytest.raises(EngineError, match="self entry"):
        SegmentIndex(targets=np.array([0, 0]), sources=np.array([0, 1]),
                     offsets=np.array([0, 2, 2]), num_nodes=2)
    with pytest.raises(EngineError, match="offsets"):
        SegmentIndex(targets=np.array([0, 1]), sources=np.array([0, 1]),
                     offsets=np.array([0, 1]), num_nodes=2)


def test_segment_softmax_hand_example():
    idx = build_segment_index(np.array([1]), np.array([0]), 2)
    # group for node 0 has logits [0, 0] -> [0.5, 0.5]; node 1 alone -> [1]
    y = engine.segment_softmax(Tensor(np.zeros((3, 1))), idx)
    np.testing.assert_allclose(y.values[:, 0], [0.5, 0.5, 1.0])


def test_segment_softmax_matches_loop_reference():
    rng = np.random.default_rng(7)
    for trial in range(20):
        n = rng.integers(2, 30)
        m = rng.integers(0, 4 * n)
        src = rng.integers(0, n, size=m)
        dst = rng.integers(0, n, size=m)
        idx = build_segment_index(src, dst, n)
        logits = rng.standard_normal((idx.num_entries, 1)) * 5
        got = engine.segment_softmax(Tensor(logits), idx).values
        want = loop_segment_softmax(logits[:, 0], idx)
        np.testing.assert_allclose(got[:, 0], want, atol=1e-12)
        sums = np.add.reduceat(got[:, 0], idx.offsets[:-1])
        np.testing.assert_allclose(sums, np.ones(n), atol=1e-12)


def test_segment_softmax_shift_invariance():
    idx = small_index()
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((idx.num_entries, 1))
    base = engine.segment_softmax(Tensor(logits), idx).values
    shifted = engine.segment_softmax(Tensor(logits + 500.0), idx).values
    np.testing.assert_allclose(base, shifted, atol=1e-12)
    extreme = engine.segment_softmax(Tensor(logits * 1e4), idx).values
    assert np.all(np.isfinite(extreme))


def test_segment_weighted_sum_matches_loop_reference():
    rng = np.random.default_rng(11)
    idx = build_segment_index(rng.integers(0, 8, 20), rng.integers(0, 8, 20), 8)
    vals = rng.standard_normal((idx.num_entries, 4))
    wts = rng.standard_normal((idx.num_entries, 1))
    got = engine.segment_weighted_sum(Tensor(vals), Tensor(wts), idx).values
    np.testing.assert_allclose(got, loop_segment_weighted_sum(vals, wts, idx), atol=1e-12)


def test_gather_rows_scatter_add_backward():
    x = leaf(np.arange(8, dtype=float).reshape(4, 2))
    idx = np.array([0, 2, 0])
    with GradTape():
        grads = backward(reduce_sum(gather_rows(x, idx)))
    # row 0 picked twice, row 2 once, others never
    np.testing.assert_array_equal(grads[x], [[2, 2], [0, 0], [1, 1], [0, 0]])


def test_pick_entries_backward():
    x = leaf(np.zeros((3, 3)))
    with GradTape():
        y = pick(x, np.array([0, 0, 2]), np.array([1, 1, 2]))
        grads = backward(reduce_sum(y))
    want = np.zeros((3, 3))
    want[0, 1] = 2.0
    want[2, 2] = 1.0
    np.testing.assert_array_equal(grads[x], want)


# ---------------------------------------------------------------------------
# dropout


def test_dropout_zero_rate_is_identity():
    x = leaf(np.ones((4, 4)))
    y = dropout(x, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(y.values, x.values)


def test_dropout_masks_and_rescales():
    rng = np.random.default_rng(5)
    x = leaf(np.ones((200, 50)))
    y = dropout(x, 0.4, rng)
    vals = np.unique(y.values)
    np.testing.assert_allclose(sorted(vals), [0.0, 1.0 / 0.6])
    # survival rate concentrates near 1 - p
    assert abs((y.values != 0).mean() - 0.6) < 0.02


def test_dropout_backward_uses_same_mask():
    rng = np.random.default_rng(9)
    x = leaf(np.ones((10, 10)))
    with GradTape():
        y = dropout(x, 0.5, rng)
        grads = backward(reduce_sum(y))
    np.testing.assert_array_equal(grads[x], y.values)


def test_dropout_rejects_bad_rate():
    x = leaf(np.ones((2, 2)))
    with pytest.raises(EngineError):
        dropout(x, 1.0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# cosine similarity


def test_cosine_of_parallel_and_orthogonal():
    u = Tensor([[1.0], [0.0]])
    assert cosine_similarity(u, Tensor([[2.0], [0.0]])).values[0, 0] == pytest.approx(1.0)
    assert cosine_similarity(u, Tensor([[0.0], [3.0]])).values[0, 0] == pytest.approx(0.0)
    assert cosine_similarity(u, Tensor([[-1.0], [0.0]])).values[0, 0] == pytest.approx(-1.0)


def test_cosine_zero_vector_guard():
    u = leaf([[0.0], [0.0]])
    v = leaf([[1.0], [2.0]])
    with GradTape():
        c = cosine_similarity(u, v)
        grads = backward(reduce_sum(c))
    assert c.values[0, 0] == 0.0
    np.testing.assert_array_equal(grads[u], np.zeros((2, 1)))
    np.testing.assert_array_equal(grads[v], np.zeros((2, 1)))


# ---------------------------------------------------------------------------
# dispatch surfaces


def test_pointwise_dispatch_matches_direct_call():
    x = Tensor([[0.3, -0.7]])
    np.testing.assert_array_equal(pointwise("sigmoid", x).values, sigmoid(x).values)
    y = Tensor([[1.0, 2.0]])
    np.testing.assert_array_equal(pointwise("add", x, y).values, add(x, y).values)
    with pytest.raises(EngineError, match="unknown"):
        pointwise("nope", x)


def test_reduce_dispatch():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert reduce_op("sum", x).values[0, 0] == 10.0
    assert reduce_op("mean", x).values[0, 0] == 2.5
    np.testing.assert_array_equal(reduce_op("row_sum", x).values, [[3.0], [7.0]])
    with pytest.raises(EngineError, match="unknown"):
        reduce_op("max", x)


# ---------------------------------------------------------------------------
# finite-difference certification of every op


def check(build_fn, params, tol=1e-6):
    report = grad_check(build_fn, params, step=1e-5, tol=tol)
    assert report.passed, "\n".join(report.lines())
    return report


def test_gradcheck_smooth_pointwise_ops():
    rng = np.random.default_rng(42)
    x = leaf(rng.uniform(-2, 2, (3, 4)))
    y = leaf(rng.uniform(0.5, 2.0, (3, 4)))  # positive: safe for div/log/sqrt
    params = {"x": x, "y": y}

    check(lambda: reduce_sum(add(x, y)), params)
    check(lambda: reduce_sum(sub(x, y)), params)
    check(lambda: reduce_sum(mul(x, y)), params)
    check(lambda: reduce_sum(div(x, y)), params)
    check(lambda: reduce_sum(scale(x, -1.7)), params)
    check(lambda: reduce_sum(sigmoid(x)), params)
    check(lambda: reduce_sum(exp(x)), params)
    check(lambda: reduce_sum(log(y)), params)
    check(lambda: reduce_sum(sqrt(y)), params)
    check(lambda: reduce_mean(mul(x, x)), params)
    check(lambda: reduce_sum(row_sum(mul(x, y))), params)
    check(lambda: reduce_sum(row_softmax(x)), params)
    check(lambda: reduce_sum(mul(row_softmax(x), y)), params)


def test_gradcheck_piecewise_ops_away_from_kinks():
    rng = np.random.default_rng(43)
    base = rng.uniform(0.2, 2.0, (3, 4)) * np.where(rng.random((3, 4)) < 0.5, -1, 1)
    x = leaf(base)
    params = {"x": x}
    check(lambda: reduce_sum(mul(absolute(x), x)), params, tol=1e-4)
    check(lambda: reduce_sum(relu(x)), params, tol=1e-4)
    check(lambda: reduce_sum(leaky_relu(x, 0.2)), params, tol=1e-4)
    check(lambda: reduce_sum(elu(x)), params, tol=1e-4)


def test_gradcheck_matmul_chain():
    rng = np.random.default_rng(44)
    w1 = leaf(rng.standard_normal((5, 4)))
    w2 = leaf(rng.standard_normal((4, 2)))
    x = rng.standard_normal((6, 5))
    check(lambda: reduce_sum(matmul(matmul(x, w1), w2)), {"w1": w1, "w2": w2})


def test_gradcheck_structural_ops():
    rng = np.random.default_rng(45)
    x = leaf(rng.standard_normal((5, 3)))
    z = leaf(rng.standard_normal((5, 2)))
    params = {"x": x, "z": z}
    idx = np.array([0, 3, 3, 1])
    rows = np.array([0, 2, 2])
    cols = np.array([1, 0, 2])
    check(lambda: reduce_sum(gather_rows(x, idx)), params)
    check(lambda: reduce_sum(mul(gather_rows(x, idx), gather_rows(x, idx))), params)
    check(lambda: reduce_sum(pick(x, rows, cols)), params)
    check(lambda: reduce_sum(mul(hstack([x, z]), hstack([x, z]))), params)
    check(lambda: reduce_sum(slice_rows(x, 1, 4)), params)
    check(lambda: cosine_similarity(pick(x, np.arange(5), np.zeros(5, int)),
                                    pick(z, np.arange(5), np.ones(5, int))), params)


def test_gradcheck_segment_ops():
    rng = np.random.default_rng(46)
    idx = build_segment_index(rng.integers(0, 6, 12), rng.integers(0, 6, 12), 6)
    logits = leaf(rng.standard_normal((idx.num_entries, 1)))
    vals = leaf(rng.standard_normal((idx.num_entries, 3)))
    wts = leaf(rng.uniform(0.1, 1.0, (idx.num_entries, 1)))
    params = {"logits": logits, "vals": vals, "wts": wts}

    mixer = rng.standard_normal((6, 3))  # weighs output rows unevenly
    check(lambda: reduce_sum(mul(engine.segment_softmax(logits, idx),
                                 Tensor(np.arange(idx.num_entries, dtype=float)[:, None]))),
          params)
    check(lambda: reduce_sum(mul(engine.segment_weighted_sum(vals, wts, idx), mixer)), params)
    check(lambda: reduce_sum(mul(
        engine.segment_weighted_sum(vals, engine.segment_softmax(logits, idx), idx),
        mixer)), params)


def test_gradcheck_dropout_with_fixed_mask():
    x = leaf(np.random.default_rng(47).standard_normal((4, 4)))

    def build():
        # a fresh identically-seeded generator per call keeps the mask fixed
        return reduce_sum(mul(dropout(x, 0.5, np.random.default_rng(123)), x))

    check(build, {"x": x})


def test_gradcheck_detects_nondeterministic_forward():
    x = leaf(np.ones((3, 3)))
    state = np.random.default_rng(50)

    def build():
        return reduce_sum(dropout(x, 0.5, state))  # advances shared rng

    with pytest.raises(EngineError, match="nondeterministic"):
        grad_check(build, {"x": x})


def test_gradcheck_flags_corrupted_backward(monkeypatch):
    def bad_sigmoid(x):
        v = engine._values(x)
        y = 1.0 / (1.0 + np.exp(-v))
        out = Tensor(y)
        engine._record(out, (x,), lambda g: (g * y * (1.0 - y) * 1.05,))
        return out

    monkeypatch.setattr(engine, "sigmoid", bad_sigmoid)
    x = leaf(np.random.default_rng(48).standard_normal((3, 3)))
    report = grad_check(lambda: reduce_sum(engine.sigmoid(x)), {"x": x}, tol=1e-4)
    assert not report.passed


def test_gradcheck_reports_zero_grad_for_unused_param():
    x = leaf(np.ones((2, 2)))
    unused = leaf(np.full((2, 2), 3.0))
    report = grad_check(lambda: reduce_sum(mul(x, x)), {"x": x, "unused": unused})
    assert report.passed
    assert report.per_param["unused"] == 0.0


def test_repeated_forward_is_bit_identical():
    rng = np.random.default_rng(49)
    w = leaf(rng.standard_normal((8, 8)))
    x = rng.standard_normal((8, 8))

    def run():
        return reduce_sum(sigmoid(matmul(x, w))).values.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)
