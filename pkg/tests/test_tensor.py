import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glamseg.errors import ContractError, DimensionError, NumericError
from glamseg.gradcheck import check_gradients
from glamseg.tensor import (Tensor, concat, count_flops, cross_entropy, gelu, layer_norm, matmul,
                            no_grad, precision, softmax_rows)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity(f64):
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), b).data, [[1, 2], [3, 4]])


def test_matmul_hand_case(f64):
    out = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[0.0, 1.0], [1.0, 0.0]]))
    assert np.array_equal(out.data, [[0, 1], [0, 0]])


def test_matmul_random_vs_triple_loop(f64, rs):
    a, b = rs.standard_normal((5, 4)), rs.standard_normal((4, 3))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), rtol=1e-13, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_matmul_integer_inputs_exact(m, k, n, seed):
    rs = np.random.default_rng(seed)
    a, b = rs.integers(-9, 10, (m, k)).astype(float), rs.integers(-9, 10, (k, n)).astype(float)
    with precision("checking"):
        assert np.array_equal(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b))


def test_matmul_shape_error_names_shapes(f64):
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_rule(f64, rs):
    a = Tensor(rs.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rs.standard_normal((4, 2)), requires_grad=True)
    g = rs.standard_normal((3, 2))
    (matmul(a, b) * Tensor(g)).sum().backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


@pytest.mark.parametrize("row,expected", [
    ([0.0, 0.0, 0.0, 0.0], [0.25] * 4),
    ([math.log(1.0), math.log(3.0)], [0.25, 0.75]),
    ([1000.0, 1000.0], [0.5, 0.5]),
])
def test_softmax_cases(f64, row, expected):
    np.testing.assert_allclose(softmax_rows(Tensor([row])).data[0], expected, atol=1e-15)


def test_softmax_rows_sum_to_one(f64, rs):
    y = softmax_rows(Tensor(rs.standard_normal((20, 7)) * 10)).data
    assert np.all(y >= 0)
    assert np.abs(y.sum(-1) - 1).max() < 1e-12


def test_softmax_nan_rejected(f64):
    with pytest.raises(NumericError):
        softmax_rows(Tensor([[0.0, np.nan]]))


def test_layer_norm_constant_token(f64):
    out = layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_two_values(f64):
    out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[1 / math.sqrt(1 + 1e-5), -1 / math.sqrt(1 + 1e-5)]], rtol=1e-15)


def test_layer_norm_two_pass_oracle(f64, rs):
    x = rs.standard_normal((3, 6))
    gamma, beta = rs.standard_normal(6), rs.standard_normal(6)
    expected = np.empty_like(x)
    for t in range(3):
        mean = sum(x[t]) / 6
        var = sum((v - mean) ** 2 for v in x[t]) / 6
        expected[t] = [(v - mean) / math.sqrt(var + 1e-5) for v in x[t]] * gamma + beta
    out = layer_norm(Tensor(x), Tensor(gamma), Tensor(beta))
    np.testing.assert_allclose(out.data, expected, rtol=1e-12, atol=1e-12)


def test_layer_norm_param_mismatch(f64):
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_backward_linear_sum(f64, rs):
    x = rs.standard_normal(4)
    w = Tensor(rs.standard_normal((3, 4)), requires_grad=True)
    matmul(w, Tensor(x.reshape(4, 1))).sum().backward()
    np.testing.assert_allclose(w.grad, np.tile(x, (3, 1)))


def test_cross_entropy_uniform_logits(f64):
    logits = Tensor(np.zeros((1, 4)), requires_grad=True)
    loss = cross_entropy(logits, np.array([2]))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)
    loss.backward()
    np.testing.assert_allclose(logits.grad, [[0.25, 0.25, -0.75, 0.25]], atol=1e-15)


def test_cross_entropy_all_ignored(f64):
    logits = Tensor(np.ones((3, 2)), requires_grad=True)
    loss = cross_entropy(logits, np.array([-1, -1, -1]))
    assert loss.item() == 0.0
    loss.backward()
    assert np.array_equal(logits.grad, np.zeros((3, 2)))


def test_backward_requires_scalar(f64):
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_visits_shared_node_once(f64):
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    z = y + y + y  # y reused three times
    z.sum().backward()
    assert x.grad[0] == pytest.approx(12.0)


def test_graph_released_after_backward(f64):
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 3.0
    loss = y.sum()
    loss.backward()
    assert y._parents == () and y._backward is None


def test_mixed_precision_rejected():
    with precision("checking"):
        a = Tensor(np.ones((2, 2)))
    with precision("training"):
        b = Tensor(np.ones((2, 2)))
    with pytest.raises(ContractError):
        a + b


def test_no_grad_does_not_record(f64):
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_flop_counter_conventions(f64):
    with count_flops() as c:
        matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
        softmax_rows(Tensor(np.ones((2, 6))))
        layer_norm(Tensor(np.ones((2, 6))), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    assert c == {"matmul": 2 * 3 * 4 * 5, "softmax": 5 * 12, "layernorm": 8 * 12}


def test_composed_graph_finite_differences(f64, rs):
    a = Tensor(rs.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rs.standard_normal((4, 5)), requires_grad=True)
    gamma = Tensor(rs.standard_normal(5), requires_grad=True)
    beta = Tensor(rs.standard_normal(5), requires_grad=True)
    r = Tensor(rs.standard_normal((3, 10)))

    def loss():
        h = layer_norm(gelu(a @ b), gamma, beta)
        s = softmax_rows(concat([h, h[:, ::-1] * 0.5], axis=1))
        return (s * r).sum() + cross_entropy(h.transpose(1, 0).reshape(5, 3), np.array([0, 1, 2, -1, 1]))

    res = check_gradients(loss, [("a", a), ("b", b), ("gamma", gamma), ("beta", beta)], rs, 6)
    assert res.max_rel_error < 1e-4, res
