"""Backward-pass behavior: accumulation, graph handling, finite-difference checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import voxscan.tensor as T
from voxscan.errors import GraphError


def t(arr, grad=False):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def test_backward_simple_chain():
    x = t([1.0, 2.0, 3.0], grad=True)
    y = T.sum_(T.mul(x, x))  # d/dx sum(x^2) = 2x
    T.backward(y)
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_accumulates_across_paths():
    x = t([2.0], grad=True)
    y = T.add(T.mul(x, x), x)  # x^2 + x -> 2x + 1 = 5
    T.backward(T.sum_(y))
    assert np.allclose(x.grad, [5.0])


def test_backward_rejects_non_scalar_loss():
    x = t([1.0, 2.0], grad=True)
    with pytest.raises(GraphError, match="scalar"):
        T.backward(T.mul(x, x))


def test_backward_unbroadcasts_to_input_shape():
    a = t(np.ones((4, 5)), grad=True)
    row = t(np.ones((1, 5)), grad=True)
    T.backward(T.sum_(T.add(a, row)))
    assert a.grad.shape == (4, 5) and np.allclose(a.grad, 1)
    assert row.grad.shape == (1, 5) and np.allclose(row.grad, 4)


def test_take_backward_accumulates_repeated_indices():
    x = t([1.0, 2.0, 3.0], grad=True)
    y = T.take(x, np.array([0, 0, 2]), axis=0)
    T.backward(T.sum_(y))
    assert np.allclose(x.grad, [2.0, 0.0, 1.0])


def test_parameter_grad_buffer_and_zero_grad():
    p = T.Parameter("w", np.array([1.0, -1.0]))
    assert np.allclose(p.grad, 0)
    T.backward(T.sum_(T.mul(p.value, p.value)))
    assert np.allclose(p.grad, [2.0, -2.0])
    T.backward(T.sum_(T.mul(p.value, p.value)))
    assert np.allclose(p.grad, [4.0, -4.0])  # accumulates until cleared
    p.zero_grad()
    assert np.allclose(p.grad, 0)


def test_grad_check_every_registered_op():
    results = T.grad_check_all(trials=5, seed=0)
    assert sorted(r.op for r in results) == sorted(T.OPS)
    bad = [(r.op, r.max_rel_err) for r in results if not r.passed]
    assert not bad, f"gradient mismatches: {bad}"


def test_grad_check_detects_corrupted_backward():
    with T.perturb_backward("silu", 1.5):
        r = T.grad_check_op("silu", trials=3, seed=0)
    assert not r.passed
    # context restored afterwards
    assert T.grad_check_op("silu", trials=3, seed=0).passed


def test_finite_diff_matches_analytic_gradient():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))

    def f(a):
        return T.Tensor(np.asarray(((a.data @ w) ** 2).sum()))

    fd = T.finite_diff(f, T.Tensor(x)).data
    assert np.allclose(fd, 2 * (x @ w) @ w.T, atol=1e-6)


def test_toposort_handles_diamond_graphs():
    x = t([1.5], grad=True)
    a = T.exp(x)
    b = T.mul(a, a)
    c = T.add(b, a)
    T.backward(T.sum_(c))
    e = np.exp(1.5)
    assert np.allclose(x.grad, 2 * e * e + e)


def test_cycle_detection():
    x = t([1.0], grad=True)
    y = T.exp(x)
    y.inputs = (y,)  # forge a self-loop
    with pytest.raises(GraphError, match="cycle"):
        T.backward(T.sum_(y))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2 ** 32 - 1))
def test_sum_gradient_is_ones(n, seed):
    x = t(np.random.default_rng(seed).standard_normal(n), grad=True)
    T.backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones(n))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_mul_product_rule(seed):
    rng = np.random.default_rng(seed)
    a_val, b_val = rng.standard_normal(6), rng.standard_normal(6)
    a, b = t(a_val, grad=True), t(b_val, grad=True)
    T.backward(T.sum_(T.mul(a, b)))
    assert np.allclose(a.grad, b_val)
    assert np.allclose(b.grad, a_val)
