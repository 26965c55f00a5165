import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prm import autodiff as ad
from conftest import check_op_grads


def test_node_promotes_scalars_and_vectors():
    assert ad.constant(3.0).shape == (1, 1)
    assert ad.constant([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ad.DimensionError):
        ad.constant(np.zeros((2, 2, 2)))


def test_grad_is_lazy_and_zero_by_default():
    p = ad.parameter(np.ones((2, 3)))
    assert p._grad is None
    np.testing.assert_array_equal(p.grad, np.zeros((2, 3)))


@pytest.mark.parametrize("build,shapes", [
    (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    (lambda a, b: a + b, [(3, 4), (3, 4)]),
    (lambda a, b: a + b, [(3, 4), (1, 4)]),
    (lambda a, b: a - b, [(3, 4), (1, 4)]),
    (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    (lambda a, b: ad.mul(a, b), [(3, 4), (1, 4)]),
    (lambda a: ad.scale(a, -2.5), [(2, 3)]),
    (lambda a: ad.sigmoid(a), [(3, 3)]),
    (lambda a: a.T, [(2, 5)]),
    (lambda a, b: ad.concat_cols([a, b]), [(3, 2), (3, 4)]),
    (lambda a: ad.reshape(a, 2, 6), [(3, 4)]),
    (lambda a: ad.softmax_rows(a), [(3, 5)]),
])
def test_elementary_gradients(build, shapes, rng):
    arrays = [rng.normal(size=s) for s in shapes]
    check_op_grads(build, arrays)


def test_relu_gradient_away_from_kink(rng):
    x = rng.normal(size=(4, 4))
    x[np.abs(x) < 0.1] = 0.5
    check_op_grads(ad.relu, [x])


def test_log_gradient_and_floor(rng):
    x = rng.uniform(0.5, 2.0, size=(2, 3))
    check_op_grads(lambda a: ad.log(a), [x])
    p = ad.parameter(np.array([[0.0, 1.0]]))
    out = ad.log(p, floor=1e-300)
    assert np.isfinite(out.value).all()
    ad.backward(ad.sum_all(out))
    assert p.grad[0, 0] == 0.0 and p.grad[0, 1] == 1.0


def test_layer_norm_gradients(rng):
    check_op_grads(lambda a, g, b: ad.layer_norm(a, g, b),
                   [rng.normal(size=(4, 5)), rng.normal(size=(1, 5)), rng.normal(size=(1, 5))])


def test_gather_rows_scatter_adds(rng):
    table = rng.normal(size=(4, 3))
    check_op_grads(lambda t: ad.gather_rows(t, [0, 2, 2, 3, 0]), [table])


def test_masked_softmax_exact_zero_and_grad(rng):
    x = rng.normal(size=(3, 4))
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
    s = ad.softmax_rows(ad.constant(x), mask).value
    assert (s[~mask] == 0.0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0)
    check_op_grads(lambda a: ad.softmax_rows(a, mask), [x])


def test_fully_masked_row_raises():
    with pytest.raises(ad.InvalidMaskError):
        ad.softmax_rows(ad.constant(np.zeros((2, 2))), np.array([[1, 0], [0, 0]], dtype=bool))


def test_list_attention_matches_block_diagonal_softmax(rng):
    B, L, d = 3, 4, 5
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], dtype=bool)
    Q, K, V = (rng.normal(size=(B * L, d)) for _ in range(3))
    out, w = ad.list_attention(ad.constant(Q), ad.constant(K), ad.constant(V), mask)
    block = np.kron(np.eye(B, dtype=bool), np.ones((L, L), dtype=bool)) & mask.reshape(1, -1)
    logits = ad.scale(ad.matmul(ad.constant(Q), ad.constant(K.T)), 1 / np.sqrt(d))
    ref = ad.softmax_rows(logits, block)
    np.testing.assert_allclose(out.value, ref.value @ V, atol=1e-12)
    assert w.shape == (B, L, L)
    check_op_grads(lambda q, k, v: ad.list_attention(q, k, v, mask)[0], [Q, K, V])


def test_list_attention_rejects_empty_list():
    with pytest.raises(ad.InvalidMaskError):
        z = ad.constant(np.zeros((4, 2)))
        ad.list_attention(z, z, z, np.array([[1, 1], [0, 0]], dtype=bool))


def test_dropout_keyed_and_inverted():
    x = ad.constant(np.ones((50, 40)))
    a = ad.dropout(x, 0.3, True, key=(1, 2, 3)).value
    b = ad.dropout(x, 0.3, True, key=(1, 2, 3)).value
    c = ad.dropout(x, 0.3, True, key=(1, 2, 4)).value
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.7}
    assert abs(a.mean() - 1.0) < 0.1
    assert ad.dropout(x, 0.3, False) is x
    with pytest.raises(ad.ParameterError):
        ad.dropout(x, 1.0, True)


def test_shape_errors():
    with pytest.raises(ad.DimensionError):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    with pytest.raises(ad.DimensionError):
        ad.add(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 2))))
    with pytest.raises(ad.DimensionError):
        ad.reshape(ad.constant(np.ones((2, 3))), 4, 2)


def test_backward_requires_scalar():
    with pytest.raises(ad.ContractError):
        ad.backward(ad.parameter(np.ones((2, 2))))


def test_backward_accumulates_and_zero_grad():
    p = ad.parameter(np.array([[2.0]]))
    loss = ad.mul(p, p)
    ad.backward(loss)
    ad.backward(loss)
    assert p.grad[0, 0] == pytest.approx(8.0)
    p.zero_grad()
    ad.backward(loss)
    assert p.grad[0, 0] == pytest.approx(4.0)


def test_shared_subexpression_gradients_sum():
    # duplicate-path oracle: x used twice must get both contributions
    x = ad.parameter(np.array([[3.0]]))
    y = ad.add(ad.mul(x, x), x)
    ad.backward(y)
    assert x.grad[0, 0] == pytest.approx(7.0)


def test_constants_get_no_grad():
    c = ad.constant(np.ones((1, 2)))
    p = ad.parameter(np.ones((2, 1)))
    ad.backward(ad.matmul(c, p))
    assert c._grad is None


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_random_composite_graph_gradients(seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=(4, 3)), rng.normal(size=(3, 3)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3))]

    def build(x, w, g, b):
        h = ad.layer_norm(ad.sigmoid(x @ w) + b, g, b)
        return ad.softmax_rows(ad.mul(h, h) + x)

    check_op_grads(build, arrays, tol=1e-5)
