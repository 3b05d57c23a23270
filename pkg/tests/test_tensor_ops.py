"""Forward-rule checks for the differentiable ops, against plain numpy."""

import numpy as np
import pytest

import voxscan.tensor as T
from voxscan.errors import GraphError, NumericsError, ShapeError, ValidationError

RNG = np.random.default_rng(42)


def t(arr, grad=False):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def test_add_sub_mul_neg_match_numpy():
    a = RNG.standard_normal((4, 5))
    b = RNG.standard_normal((4, 5))
    assert np.allclose(T.add(t(a), t(b)).data, a + b)
    assert np.allclose(T.sub(t(a), t(b)).data, a - b)
    assert np.allclose(T.mul(t(a), t(b)).data, a * b)
    assert np.allclose(T.apply("neg", t(a)).data, -a)


def test_elementwise_broadcasting():
    a = RNG.standard_normal((4, 5))
    row = RNG.standard_normal((1, 5))
    assert np.allclose(T.add(t(a), t(row)).data, a + row)
    assert np.allclose(T.mul(t(a), t(row)).data, a * row)


def test_operator_sugar_with_scalars():
    a = t([1.0, 2.0], grad=True)
    out = (a + 1.0) * 2.0 - 0.5
    assert np.allclose(out.data, [3.5, 5.5])
    assert np.allclose((-a).data, [-1.0, -2.0])


def test_linear_matches_matmul():
    x = RNG.standard_normal((7, 3))
    w = RNG.standard_normal((3, 4))
    b = RNG.standard_normal(4)
    assert np.allclose(T.linear(t(x), t(w), t(b)).data, x @ w + b)
    assert np.allclose(T.linear(t(x), t(w)).data, x @ w)


def test_linear_three_dim_input():
    x = RNG.standard_normal((2, 7, 3))
    w = RNG.standard_normal((3, 4))
    assert np.allclose(T.linear(t(x), t(w)).data, x @ w)


def test_exp_softplus_sigmoid_silu():
    x = RNG.standard_normal(50) * 3
    assert np.allclose(T.exp(t(x)).data, np.exp(x))
    assert np.allclose(T.softplus(t(x)).data, np.log1p(np.exp(x)))
    assert np.allclose(T.sigmoid(t(x)).data, 1 / (1 + np.exp(-x)))
    assert np.allclose(T.silu(t(x)).data, x / (1 + np.exp(-x)))


def test_softplus_large_inputs_stay_finite():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    out = T.softplus(t(x)).data
    assert np.all(np.isfinite(out))
    assert out[-1] == pytest.approx(800.0)
    assert out[0] == pytest.approx(0.0, abs=1e-12)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = RNG.standard_normal((6, 4)) * 5
    p = T.softmax(t(x), axis=-1).data
    assert np.allclose(p.sum(axis=-1), 1.0)
    p2 = T.softmax(t(x + 1000.0), axis=-1).data
    assert np.allclose(p, p2)


def test_relu_and_reductions():
    x = RNG.standard_normal((3, 4))
    assert np.allclose(T.relu(t(x)).data, np.maximum(x, 0))
    assert np.allclose(T.sum_(t(x)).data, x.sum())
    assert np.allclose(T.sum_(t(x), axis=0).data, x.sum(axis=0))
    assert np.allclose(T.mean(t(x), axis=(0, 1)).data, x.mean())
    assert T.sum_(t(x), axis=1, keepdims=True).shape == (3, 1)


def test_reshape_transpose_take_concat():
    x = RNG.standard_normal((2, 3, 4))
    assert T.reshape(t(x), (6, 4)).shape == (6, 4)
    assert np.allclose(T.transpose(t(x), (2, 0, 1)).data, x.transpose(2, 0, 1))
    idx = np.array([2, 0, 0])
    assert np.allclose(T.take(t(x), idx, axis=1).data, x[:, idx, :])
    y = RNG.standard_normal((2, 3, 4))
    assert np.allclose(T.concat([t(x), t(y)], axis=2).data,
                       np.concatenate([x, y], axis=2))


def test_conv3d_identity_kernel():
    # A kernel that only passes the center voxel through reproduces the input.
    x = RNG.standard_normal((4, 5, 6, 2))
    k = np.zeros((3, 3, 3, 2, 2))
    k[1, 1, 1] = np.eye(2)
    b = np.zeros(2)
    assert np.allclose(T.conv3d(t(x), t(k), t(b)).data, x)


def test_conv3d_matches_direct_convolution():
    x = RNG.standard_normal((3, 4, 5, 2))
    k = RNG.standard_normal((3, 3, 3, 2, 3))
    b = RNG.standard_normal(3)
    out = T.conv3d(t(x), t(k), t(b)).data
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    want = np.empty((3, 4, 5, 3))
    for i in range(3):
        for j in range(4):
            for l in range(5):
                patch = xp[i:i + 3, j:j + 3, l:l + 3, :]
                want[i, j, l] = np.einsum("dhwc,dhwco->o", patch, k) + b
    assert np.allclose(out, want)


def test_conv3d_batched_matches_per_sample():
    x = RNG.standard_normal((3, 4, 4, 5, 2))
    k = RNG.standard_normal((3, 3, 3, 2, 3))
    b = RNG.standard_normal(3)
    batched = T.conv3d(t(x), t(k), t(b)).data
    singles = np.stack([T.conv3d(t(x[i]), t(k), t(b)).data for i in range(3)])
    assert np.allclose(batched, singles)


def test_conv3d_shape_errors():
    k = np.zeros((3, 3, 3, 2, 2))
    with pytest.raises(ShapeError):
        T.conv3d(t(np.zeros((4, 5, 2))), t(k), t(np.zeros(2)))
    with pytest.raises(ShapeError):
        T.conv3d(t(np.zeros((4, 4, 5, 3))), t(k), t(np.zeros(2)))
    with pytest.raises(ShapeError):
        T.conv3d(t(np.zeros((4, 4, 5, 2))), t(k), t(np.zeros(3)))


def test_batch_norm_train_standardizes():
    x = RNG.standard_normal((40, 3)) * 4 + 7
    out = T.batch_norm(t(x), t(np.ones(3)), t(np.zeros(3)), mode="train").data
    assert np.allclose(out.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(out.var(axis=0), 1, atol=1e-4)


def test_batch_norm_eval_uses_running_stats():
    x = RNG.standard_normal((10, 2))
    rm, rv = np.array([1.0, -2.0]), np.array([4.0, 0.25])
    out = T.batch_norm(t(x), t(np.ones(2)), t(np.zeros(2)), mode="eval",
                       running_mean=rm, running_var=rv).data
    assert np.allclose(out, (x - rm) / np.sqrt(rv + 1e-5))


def test_batch_norm_error_paths():
    x = t(np.zeros((4, 2)))
    g, b = t(np.ones(2)), t(np.zeros(2))
    with pytest.raises(ValidationError):
        T.batch_norm(x, g, b, mode="predict")
    with pytest.raises(ValidationError):
        T.batch_norm(x, g, b, mode="eval")  # no running stats yet
    with pytest.raises(ValidationError):
        T.batch_norm(t(np.zeros((1, 2))), g, b, mode="train")


def test_layer_norm_per_token():
    x = RNG.standard_normal((5, 6)) * 3 + 2
    out = T.layer_norm(t(x), t(np.ones(6)), t(np.zeros(6))).data
    assert np.allclose(out.mean(axis=-1), 0, atol=1e-12)
    gamma, beta = RNG.standard_normal(6), RNG.standard_normal(6)
    out2 = T.layer_norm(t(x), t(gamma), t(beta)).data
    assert np.allclose(out2, out * gamma + beta)


def test_finite_check_catches_nan():
    with np.errstate(over="ignore"):  # the overflow itself is the test input
        with pytest.raises(NumericsError, match="exp"):
            T.exp(t(np.array([1e6])))


def test_finite_check_can_be_disabled():
    with np.errstate(over="ignore"):
        with T.finite_checks(False):
            out = T.exp(t(np.array([1e6])))
    assert np.isinf(out.data[0])


def test_no_grad_blocks_recording():
    x = t(RNG.standard_normal(4), grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert y.op is None and not y.requires_grad
    # a later recorded op sees y as a constant: nothing reaches x
    T.backward(T.sum_(y))
    assert x.grad is None


def test_unknown_op_rejected():
    with pytest.raises(ValidationError):
        T.apply("fma", t(np.zeros(2)))


def test_replay_is_bit_identical():
    x = t(RNG.standard_normal((3, 4)), grad=True)
    y = T.sum_(T.mul(T.exp(x), x))
    record = T.ComputationRecord.trace(y)
    assert record.replay() is None  # no mismatch
    # tamper with a stored output: replay must notice
    record.entries[0].output.data[0] += 1e-9
    with pytest.raises(GraphError, match="replay mismatch"):
        record.replay()
