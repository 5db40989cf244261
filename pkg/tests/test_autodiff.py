import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridca.core import autodiff as ad
from hybridca.core.autodiff import Graph, Tensor, backward, grad_check
from hybridca.core.errors import ContractError, DimensionError, NumericalError, ParameterError
from hybridca.verification.checks import PRIMITIVE_CASES


def test_matmul_examples():
    a = Tensor([[1, 2], [3, 4]])
    assert np.array_equal((Tensor(np.eye(2)) @ a).data, a.data)
    assert np.array_equal((a @ Tensor([[0], [0]])).data, [[0], [0]])
    assert np.array_equal((a @ Tensor([[5], [6]])).data, [[17], [39]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 1))))


def test_matmul_shares_plain_matrix_over_batch(rng):
    x, w = rng.standard_normal((4, 3, 5)), rng.standard_normal((5, 2))
    assert np.allclose(ad.matmul(Tensor(x), Tensor(w)).data, x @ w)


def test_softmax_examples(rng):
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0, 0.0]), 1.0).data, [1 / 3] * 3, atol=1e-15)
    x = rng.standard_normal((3, 7))
    assert np.allclose(ad.softmax(Tensor(x + 12.5), 0.8).data, ad.softmax(Tensor(x), 0.8).data, atol=1e-12)
    assert ad.softmax(Tensor([10.0, 0.0, 0.0]), 0.1).data[0] > 1 - 1e-10


def test_softmax_rejects_non_positive_temperature():
    for temperature in (0.0, -1.0):
        with pytest.raises(ParameterError):
            ad.softmax(Tensor([1.0, 2.0]), temperature)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.floats(0.05, 20),
)
def test_softmax_rows_are_distributions(values, temperature):
    s = ad.softmax(Tensor(values), temperature).data
    assert abs(s.sum() - 1.0) <= 1e-12
    assert ((s >= 0) & (s <= 1)).all()


def test_lse_examples():
    n, beta, c = 5, 0.7, 1.3
    assert math.isclose(ad.lse(beta, Tensor([c] * n)).item(), c + math.log(n) / beta, abs_tol=1e-12)
    assert ad.lse(3.0, Tensor([2.5])).item() == 2.5
    assert abs(ad.lse(100.0, Tensor([0.0, 1.0])).item() - 1.0) < 1e-3


def test_lse_bounds(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        v = rng.standard_normal(n) * 5
        beta = float(rng.uniform(0.05, 20))
        value = ad.lse(beta, Tensor(v)).item()
        assert v.max() - 1e-12 <= value <= v.max() + math.log(n) / beta + 1e-12


def test_lse_errors():
    with pytest.raises(ParameterError):
        ad.lse(1.0, Tensor(np.empty(0)))
    with pytest.raises(ParameterError):
        ad.lse(0.0, Tensor([1.0]))


def test_layer_norm_examples(rng):
    gain, bias = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = ad.layer_norm(Tensor([[2.0, 4.0, 6.0]]), gain, bias).data
    assert abs(out.mean()) < 1e-12
    assert abs(out.var() - 1.0) < 1e-5  # eps in the denominator
    assert np.allclose(ad.layer_norm(Tensor([[5.0, 5.0, 5.0]]), gain, bias).data, 0.0)

    x = rng.standard_normal((4, 6))
    g, b = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
    assert np.allclose(ad.layer_norm(Tensor(3.7 * x), g, b, eps=0.0).data, ad.layer_norm(Tensor(x), g, b, eps=0.0).data, atol=1e-9)


def test_layer_norm_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_elementwise_examples():
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert np.array_equal(ad.concat([Tensor([1.0]), Tensor([2.0])], axis=0).data, [1, 2])
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert np.array_equal(ad.add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0])).data, [[1, 2, 3]] * 2)


def test_elementwise_rejects_general_broadcasting():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_non_finite_values_are_rejected():
    with pytest.raises(NumericalError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericalError):
        ad.scale(Tensor([1e308]), 10.0)


def test_backward_product_rule():
    graph = Graph()
    x, y = graph.leaf(3.0), graph.leaf(2.0)
    grads = backward(x * y)
    assert grads.wrt(x) == 2.0
    assert grads.wrt(y) == 3.0


def test_backward_of_constant_function_is_zero():
    graph = Graph()
    x = graph.leaf([1.0, 2.0])
    unused = graph.leaf([[3.0]])
    grads = backward(ad.total(ad.scale(x, 0.0)))
    assert np.array_equal(grads.wrt(x), [0.0, 0.0])
    assert np.array_equal(grads.wrt(unused), [[0.0]])


def test_backward_accumulates_over_reuse():
    graph = Graph()
    x = graph.leaf([1.5, -2.0])
    grads = backward(ad.total(ad.mul(x, x)))
    assert np.allclose(grads.wrt(x), [3.0, -4.0])


def test_backward_contract_errors():
    graph = Graph()
    x = graph.leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        backward(x)
    with pytest.raises(ContractError):
        backward(Tensor(1.0))
    with pytest.raises(ContractError):
        ad.add(x, Graph().leaf([1.0, 1.0]))


def test_graph_parents_precede_children(rng):
    graph = Graph()
    x = graph.leaf(rng.standard_normal((2, 3)))
    ad.total(ad.relu(ad.matmul(x, ad.transpose(x))))
    for node_id, node in enumerate(graph.nodes):
        assert all(parent < node_id for parent in node.parents)


def test_softmax_gradient_matches_finite_difference(rng):
    w = Tensor(rng.standard_normal(5))
    error = grad_check(lambda t: ad.total(ad.mul(ad.softmax(t, 1.0), w)), rng.standard_normal(5))
    assert error < 1e-6


def test_grad_check_linear_is_exact(rng):
    # dyadic inputs and step: every central difference is computed without rounding
    a = Tensor(rng.integers(1, 5, size=(3, 4)).astype(float))
    x = rng.integers(-8, 8, size=(3, 4)) / 4.0
    assert grad_check(lambda t: ad.total(ad.mul(t, a)), x, step=2.0**-10) == 0.0


def test_grad_check_rejects_non_deterministic_functions(rng):
    stream = np.random.default_rng(0)
    with pytest.raises(ContractError):
        grad_check(lambda t: ad.total(ad.dropout(t, 0.5, stream)), np.ones(20))


@pytest.mark.parametrize("seed", range(50))
def test_grad_check_rejects_dropout_for_every_stream(seed):
    stream = np.random.default_rng(seed)
    with pytest.raises(ContractError):
        grad_check(lambda t: ad.total(ad.dropout(t, 0.5, stream)), np.ones(64))


@pytest.mark.parametrize("op", sorted(PRIMITIVE_CASES))
def test_every_primitive_gradient(op):
    f, x = PRIMITIVE_CASES[op](np.random.default_rng(11))
    assert grad_check(f, x, step=1e-5) < 1e-6


def test_replay_is_bitwise_identical(rng):
    x = rng.standard_normal((3, 4))

    def run():
        graph = Graph()
        leaf = graph.leaf(x)
        out = ad.total(ad.softmax(ad.dropout(leaf, 0.2, np.random.default_rng(5)), 0.5))
        return out.data, backward(out).wrt(leaf)

    (v1, g1), (v2, g2) = run(), run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)


def test_dropout_identity_without_stream():
    x = Tensor([1.0, 2.0])
    assert ad.dropout(x, 0.5, None) is x
    with pytest.raises(ParameterError):
        ad.dropout(x, 1.0, np.random.default_rng(0))
