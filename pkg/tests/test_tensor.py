import threading

import numpy as np
import pytest

from hbert import tensor as T
from gradcheck import check

rng = np.random.default_rng(7)


def r(*shape):
    return rng.normal(size=shape)


# -- gradient checks, one per op ---------------------------------------------------

@pytest.mark.parametrize("sa,sb", [((3, 4), (3, 4)), ((3, 4), (4,)), ((2, 3, 4), (1, 3, 1)), ((3, 1), (1, 5))])
def test_grad_add_sub_mul_broadcast(sa, sb):
    a, b = r(*sa), r(*sb)
    check(T.add, a, b)
    check(T.sub, a, b)
    check(T.mul, a, b)


def test_grad_neg_scale():
    check(T.neg, r(3, 2))
    check(lambda x: T.scale(x, -2.5), r(3, 2))


@pytest.mark.parametrize("sa,sb", [((3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5)), ((2, 3, 4), (4, 2))])
def test_grad_matmul(sa, sb):
    check(T.matmul, r(*sa), r(*sb))


def test_grad_linear():
    check(T.linear, r(3, 4), r(4, 5), r(5))
    check(lambda x, w: T.linear(x, w), r(3, 4), r(4, 2))


def test_grad_select_reshape_transpose():
    check(lambda x: T.select(x, 1), r(3, 2, 4))
    check(lambda x: T.reshape(x, (4, 3)), r(2, 6))
    check(lambda x: T.transpose(x, (2, 0, 1)), r(2, 3, 4))


@pytest.mark.parametrize("axis", [None, 0, 1, -1])
def test_grad_sum_mean(axis):
    check(lambda x: T.tsum(x, axis), r(3, 4))
    check(lambda x: T.tmean(x, axis), r(3, 4))


def test_grad_softmax_rows():
    check(T.softmax_rows, r(3, 5))
    mask = np.array([[1, 1, 0, 1, 0], [0, 0, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    check(lambda x: T.softmax_rows(x, mask), r(3, 5))


def test_grad_layer_norm():
    check(T.layer_norm, r(2, 3, 6), r(6), r(6), tol=1e-5)


def test_grad_gelu_leaky():
    check(T.gelu, r(4, 5) * 2)
    x = r(4, 5)
    x[np.abs(x) < 1e-3] = 0.5
    check(lambda t: T.leaky_relu(t, 0.2), x)


def test_grad_take_rows_with_repeats():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    check(lambda t: T.take_rows(t, ids), r(4, 3))


def test_grad_scatter_add_rows():
    check(lambda x: T.scatter_add_rows(x, [0, 2, 0, 1], 4), r(4, 3))


def test_grad_additive_scores():
    zi, zj = r(6, 2, 3), r(6, 2, 3)
    check(lambda a, b, c: T.additive_scores(a, b, c, 0.2), zi, zj, r(2, 3))


def test_grad_segment_softmax():
    check(lambda s: T.segment_softmax(s, [0, 0, 1, 2, 2, 2], 3), r(6, 2))


def test_grad_dropout_fixed_mask():
    x = r(5, 4)

    def op(t):
        return T.dropout(t, 0.3, np.random.default_rng(3), training=True)

    check(op, x)


def test_grad_mean_pool():
    keep = np.array([[1, 1, 0], [1, 0, 0]], dtype=bool)
    check(lambda x: T.mean_pool(x, keep), r(2, 3, 4))
    check(T.mean_pool, r(2, 3, 4))


def test_grad_bce():
    y = (r(4, 3) > 0).astype(float)
    check(lambda z: T.bce_with_logits(z, y), r(4, 3) * 3)


def test_grad_masked_cross_entropy():
    tgt = np.array([[1, 4, 0], [2, 2, 3]])
    m = np.array([[1, 0, 1], [0, 1, 1]], dtype=bool)
    check(lambda z: T.masked_cross_entropy(z, tgt, m), r(2, 3, 5))


def test_grad_composite_chain():
    def op(x, w1, g, b, w2):
        h = T.gelu(T.linear(x, w1))
        h = T.layer_norm(h, g, b)
        return T.softmax_rows(T.matmul(h, w2))

    check(op, r(3, 4), r(4, 6), r(6), r(6), r(6, 2), tol=1e-5)


def test_grad_reused_tensor_accumulates():
    check(lambda x: T.mul(x, x) + T.gelu(x), r(3, 3))


# -- value oracles ----------------------------------------------------------------

def test_matmul_triple_loop():
    a, b = r(3, 4), r(4, 2)
    out = T.matmul(T.Tensor(a), T.Tensor(b)).data
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeMismatch):
        T.matmul(T.Tensor(r(2, 3)), T.Tensor(r(4, 2)))
    with pytest.raises(T.ShapeMismatch):
        T.matmul(T.Tensor(r(3)), T.Tensor(r(3, 2)))


def test_softmax_values_and_mask():
    x = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]])
    y = T.softmax_rows(T.Tensor(x)).data
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(y[0], e / e.sum(), atol=1e-15)
    np.testing.assert_allclose(y[1], [0.5, 0.5, 0.0], atol=1e-15)
    y = T.softmax_rows(T.Tensor(x), np.array([True, False, True])).data
    assert y[0, 1] == 0.0 and y[1, 1] == 0.0


def test_softmax_all_masked():
    with pytest.raises(T.AllMaskedRow):
        T.softmax_rows(T.Tensor(r(2, 3)), np.array([[1, 0, 0], [0, 0, 0]], dtype=bool))


def test_bce_reference():
    z = np.array([-30.0, -1.0, 0.0, 2.0, 40.0])
    y = np.array([0.0, 1.0, 1.0, 0.0, 1.0])
    # log sigmoid(z) = -log1p(exp(-z)); log(1 - sigmoid(z)) = -z - log1p(exp(-z))
    ls = -np.logaddexp(0.0, -z)
    ref = -np.mean(y * ls + (1 - y) * (ls - z))
    got = T.bce_with_logits(T.Tensor(z), y).item()
    assert abs(got - ref) < 1e-12
    assert np.isfinite(T.bce_with_logits(T.Tensor([1e4, -1e4]), [0.0, 1.0]).item())


def test_cross_entropy_reference_and_empty_mask():
    z = r(2, 4)
    tgt = np.array([3, 1])
    got = T.masked_cross_entropy(T.Tensor(z), tgt, [True, True]).item()
    ref = np.mean([np.log(np.exp(z[i]).sum()) - z[i, tgt[i]] for i in range(2)])
    assert abs(got - ref) < 1e-12
    zt = T.Tensor(z, requires_grad=True)
    loss = T.masked_cross_entropy(zt, tgt, [False, False])
    assert loss.item() == 0.0
    T.backward(loss)
    assert not zt.grad.any()


def test_layer_norm_moments():
    y = T.layer_norm(T.Tensor(r(4, 16) * 5 + 3), T.Tensor(np.ones(16)), T.Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-4)


def test_gelu_known_values():
    y = T.gelu(T.Tensor([0.0, 1.0, -1.0])).data
    np.testing.assert_allclose(y, [0.0, 0.8411919906082768, -0.15880800939172324], atol=1e-12)


def test_take_rows_out_of_range():
    with pytest.raises(T.IdOutOfRange):
        T.embedding_lookup(T.Tensor(r(3, 2)), [0, 3])
    with pytest.raises(T.IdOutOfRange):
        T.embedding_lookup(T.Tensor(r(3, 2)), [-1])


def test_segment_softmax_matches_per_group_softmax():
    s = r(7, 3)
    seg = np.array([2, 0, 2, 1, 0, 2, 1])
    y = T.segment_softmax(T.Tensor(s), seg, 3).data
    for k in range(3):
        rows = seg == k
        e = np.exp(s[rows] - s[rows].max(axis=0))
        np.testing.assert_allclose(y[rows], e / e.sum(axis=0), atol=1e-14)


def test_dropout_eval_identity_and_train_scale():
    x = T.Tensor(np.ones((200, 200)))
    assert T.dropout(x, 0.4, None, training=False) is x
    y = T.dropout(x, 0.4, np.random.default_rng(0), training=True).data
    kept = y != 0
    assert abs(kept.mean() - 0.6) < 0.01
    np.testing.assert_allclose(y[kept], 1 / 0.6)


# -- tape mechanics ---------------------------------------------------------------

def test_non_scalar_loss():
    x = T.Tensor(r(3), requires_grad=True)
    with pytest.raises(T.NonScalarLoss):
        T.backward(T.scale(x, 2.0))
    T.current_tape().clear()


def test_no_grad_records_nothing():
    x = T.Tensor(r(3), requires_grad=True)
    T.current_tape().clear()
    with T.no_grad():
        y = T.gelu(x)
    assert len(T.current_tape()) == 0 and not y.requires_grad


def test_backward_clears_tape():
    x = T.Tensor(r(3), requires_grad=True)
    T.backward(T.tsum(T.gelu(x)))
    assert len(T.current_tape()) == 0


def test_constants_not_recorded():
    T.current_tape().clear()
    T.add(T.Tensor(r(2)), T.Tensor(r(2)))
    assert len(T.current_tape()) == 0


def test_tape_is_thread_local():
    x = T.Tensor(r(3), requires_grad=True)
    T.current_tape().clear()
    T.gelu(x)
    seen = []
    th = threading.Thread(target=lambda: seen.append(len(T.current_tape())))
    th.start()
    th.join()
    assert seen == [0] and len(T.current_tape()) == 1
    T.current_tape().clear()


def test_leaf_grads_accumulate_across_backward_calls():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward(T.tsum(x))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


# -- serialization ---------------------------------------------------------------

@pytest.mark.parametrize("shape", [(), (3,), (2, 3, 4), (0, 5)])
def test_serialization_roundtrip(shape):
    a = rng.normal(size=shape)
    blob = T.tensor_to_bytes(T.Tensor(a))
    assert blob[:4] == b"HBT1"
    assert len(blob) == 8 + 8 * len(shape) + 8 * a.size
    b = T.tensor_from_bytes(blob).data
    assert b.shape == a.shape and np.array_equal(a, b)


def test_serialization_rejects_garbage():
    blob = T.tensor_to_bytes(T.Tensor(r(2, 2)))
    with pytest.raises(ValueError):
        T.tensor_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        T.tensor_from_bytes(blob[:-8])
