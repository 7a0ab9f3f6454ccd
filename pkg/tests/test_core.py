import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tcrdrp.core import BatchNormState, ShapeError, Tape, TapeError, Tensor, backward, grad_check, ops


def T(x, grad=False):
    return Tensor(x, requires_grad=grad)


class TestElementwise:
    def test_relu(self):
        assert ops.relu(T([-1.0, 0.0, 2.0])).values.tolist() == [0, 0, 2]

    def test_concat(self):
        assert ops.concat([T([1.0, 2.0]), T([3.0])], axis=0).values.tolist() == [1, 2, 3]

    def test_reduce_mean(self):
        assert ops.reduce_mean(T([2.0, 4.0])).item() == 3.0

    def test_scalar_broadcast_only(self):
        assert ops.add(T([1.0, 2.0]), 1.0).values.tolist() == [2, 3]
        with pytest.raises(ShapeError, match=r"add: incompatible shapes \(2,\) and \(3,\)"):
            ops.add(T([1.0, 2.0]), T([1.0, 2.0, 3.0]))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflow_is_an_error(self):
        with pytest.raises(FloatingPointError):
            ops.mul(T([1e200]), T([1e200]))


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ops.matmul(T(np.eye(2)), T(a)).values, a)
        assert np.array_equal(ops.matmul(T(a), T(np.eye(2))).values, a)

    def test_projector(self):
        out = ops.matmul(T([[1.0, 0.0], [0.0, 0.0]]), T([[5.0, 6.0], [7.0, 8.0]]))
        assert out.values.tolist() == [[5, 6], [0, 0]]

    def test_hand_product(self):
        out = ops.matmul(T([[1.0, 2.0], [3.0, 4.0]]), T([[2.0], [1.0]]))
        assert out.values.tolist() == [[4], [10]]

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError, match="inner"):
            ops.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(ops.softmax_masked(T([0.0, 0.0])).values, [0.5, 0.5])

    def test_closed_form(self):
        assert np.allclose(ops.softmax_masked(T([math.log(2), 0.0])).values, [2 / 3, 1 / 3], atol=1e-15)

    def test_mask(self):
        out = ops.softmax_masked(T([5.0, 5.0, 5.0]), mask=[True, True, False]).values
        assert out[2] == 0.0
        assert np.allclose(out, [0.5, 0.5, 0.0])

    def test_fully_masked_row(self):
        with pytest.raises(ValueError, match="masked"):
            ops.softmax_masked(T([[1.0, 2.0]]), mask=[[False, False]])

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-30, 30)),
           hnp.arrays(bool, (4, 6)))
    def test_rows_sum_to_one(self, x, mask):
        mask[:, 0] = True
        out = ops.softmax_masked(T(x), mask=mask).values
        assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)
        assert np.all(out[~mask] == 0.0)


class TestConv1d:
    def test_identity_kernel(self):
        out = ops.conv1d(T([[1.0, 2.0, 3.0]]), T([[[1.0]]]), stride=1)
        assert out.values.tolist() == [[1, 2, 3]]

    def test_pair_sum(self):
        out = ops.conv1d(T([[1.0, 2.0, 3.0, 4.0]]), T([[[1.0, 1.0]]]), stride=1)
        assert out.values.tolist() == [[3, 5, 7]]

    def test_stride(self):
        out = ops.conv1d(T([[1.0, 2.0, 3.0, 4.0]]), T([[[1.0, 1.0]]]), stride=2)
        assert out.values.tolist() == [[3, 7]]

    def test_kernel_too_long(self):
        with pytest.raises(ShapeError, match="exceeds"):
            ops.conv1d(T([[1.0, 2.0]]), T([[[1.0, 1.0, 1.0]]]))

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 11))
        w = rng.normal(size=(4, 3, 3))
        out = ops.conv1d(T(x), T(w), stride=2).values
        lout = (11 - 3) // 2 + 1
        ref = np.zeros((2, 4, lout))
        for b in range(2):
            for o in range(4):
                for t in range(lout):
                    ref[b, o, t] = np.sum(x[b, :, 2 * t:2 * t + 3] * w[o])
        assert np.allclose(out, ref, atol=1e-12)


class TestBatchNormDropout:
    def test_already_normalized(self):
        st_ = BatchNormState.fresh(1)
        out = ops.batch_norm(T([[-1.0], [1.0]]), T([1.0]), T([0.0]), st_, training=True)
        assert np.allclose(out.values, [[-1], [1]], atol=1e-5)

    def test_affine_collapse(self):
        st_ = BatchNormState.fresh(2)
        x = np.random.default_rng(1).normal(size=(5, 2))
        out = ops.batch_norm(T(x), T([0.0, 0.0]), T([3.0, 3.0]), st_, training=True)
        assert np.all(out.values == 3.0)

    def test_hand_normalization(self):
        st_ = BatchNormState.fresh(1)
        out = ops.batch_norm(T([[0.0], [2.0]]), T([1.0]), T([0.0]), st_, training=True)
        assert np.allclose(out.values, [[-1], [1]], atol=1e-5)
        # momentum 0.9 running update towards batch mean 1, var 1
        assert np.allclose(st_.running_mean, [0.1])
        assert np.allclose(st_.running_var, [1.0])

    def test_eval_uses_running_stats(self):
        st_ = BatchNormState(np.array([1.0]), np.array([4.0]))
        out = ops.batch_norm(T([[3.0]]), T([1.0]), T([0.0]), st_, training=False)
        assert np.allclose(out.values, [[2.0 / math.sqrt(4.0 + 1e-5)]])

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            ops.batch_norm(T([[1.0]]), T([1.0]), T([0.0]), BatchNormState.fresh(1), training=True)

    def test_dropout_identity_cases(self):
        x = T(np.arange(6.0))
        rng = np.random.default_rng(0)
        assert np.array_equal(ops.dropout(x, 0.0, rng, training=True).values, x.values)
        assert np.array_equal(ops.dropout(x, 0.7, rng, training=False).values, x.values)

    def test_dropout_mean(self):
        out = ops.dropout(T(np.ones(10_000)), 0.5, np.random.default_rng(7), training=True)
        assert 0.9 <= out.values.mean() <= 1.1
        assert set(np.unique(out.values)) <= {0.0, 2.0}

    def test_dropout_seeded(self):
        x = T(np.ones(100))
        a = ops.dropout(x, 0.3, np.random.default_rng(3), training=True).values
        b = ops.dropout(x, 0.3, np.random.default_rng(3), training=True).values
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_dropout_rate_range(self, rate):
        with pytest.raises(ValueError):
            ops.dropout(T([1.0]), rate, np.random.default_rng(0), training=True)


class TestBackward:
    def test_sum_linear(self):
        x = T([1.0, 2.0, 3.0], grad=True)
        with Tape() as tape:
            loss = ops.reduce_sum(x)
        assert backward(loss)[x].tolist() == [1, 1, 1]

    def test_square(self):
        x = T([3.0], grad=True)
        with Tape() as tape:
            loss = ops.reduce_sum(ops.mul(x, x))
        assert tape.backward(loss)[x].tolist() == [6.0]

    def test_mse_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x = T(rng.normal(size=(3, 1)))
        y = T(rng.normal(size=(3, 1)))

        def mse(w):
            return ops.reduce_mean(ops.square(ops.sub(ops.matmul(w, x), y)))

        assert grad_check(mse, rng.normal(size=(3, 3))) <= 1e-6

    def test_unreachable_leaf_gets_zero(self):
        x = T([1.0, 2.0], grad=True)
        unused = T([[5.0]], grad=True)
        with Tape() as tape:
            tape.watch(unused)
            loss = ops.reduce_sum(x)
        g = tape.backward(loss)
        assert g[unused].shape == (1, 1) and g[unused].sum() == 0.0

    def test_non_scalar_loss(self):
        x = T([1.0, 2.0], grad=True)
        with Tape() as tape:
            y = ops.relu(x)
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(y)

    def test_foreign_node(self):
        x = T([1.0], grad=True)
        with Tape():
            loss = ops.reduce_sum(x)
        with pytest.raises(TapeError):
            Tape().backward(loss)

    def test_replay_is_bitwise(self):
        rng = np.random.default_rng(2)
        w = T(rng.normal(size=(4, 4)), grad=True)
        x = T(rng.normal(size=(5, 4)))
        with Tape() as tape:
            loss = ops.reduce_sum(ops.sigmoid(ops.matmul(x, w)))
        g1 = tape.backward(loss)[w].copy()
        g2 = tape.backward(loss)[w]
        assert np.array_equal(g1, g2)

    def test_no_tape_means_constant(self):
        x = T([1.0], grad=True)
        y = ops.relu(x)
        assert y.node_id is None


def _rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


FIXED = _rand(3, 4, seed=99)
MASK = np.random.default_rng(5).random((3, 4)) > 0.3
MASK[:, 0] = True

OP_CASES = {
    "add": (lambda x: ops.reduce_sum(ops.mul(ops.add(x, T(FIXED)), T(FIXED))), (3, 4)),
    "sub": (lambda x: ops.reduce_sum(ops.square(ops.sub(T(FIXED), x))), (3, 4)),
    "mul_scalar": (lambda x: ops.reduce_sum(ops.mul(ops.mul_scalar(x, 2.5), T(FIXED))), (3, 4)),
    "relu": (lambda x: ops.reduce_sum(ops.mul(ops.relu(x), T(FIXED))), (3, 4)),
    "sigmoid": (lambda x: ops.reduce_sum(ops.mul(ops.sigmoid(x), T(FIXED))), (3, 4)),
    "concat": (lambda x: ops.reduce_sum(ops.square(ops.concat([x, T(FIXED)], axis=1))), (3, 2)),
    "reshape": (lambda x: ops.reduce_sum(ops.mul(ops.reshape(x, (3, 4)), T(FIXED))), (12,)),
    "transpose": (lambda x: ops.reduce_sum(ops.mul(ops.transpose(x), T(FIXED))), (4, 3)),
    "reduce_mean": (lambda x: ops.reduce_sum(ops.square(ops.reduce_mean(x, axis=0))), (3, 4)),
    "matmul": (lambda x: ops.reduce_sum(ops.sigmoid(ops.matmul(x, T(FIXED)))), (2, 3)),
    "matmul_batched": (
        lambda x: ops.reduce_sum(ops.square(ops.matmul(x, T(_rand(2, 4, 3, seed=4))))), (2, 3, 4)),
    "take": (lambda x: ops.reduce_sum(ops.mul(ops.take(x, [0, 2, 2, 1]), T(_rand(4, 4, seed=3)))), (3, 4)),
    "take_2d_index": (
        lambda x: ops.reduce_sum(ops.mul(ops.take(x, [[0, 1], [2, 2]]), T(_rand(2, 2, 4, seed=5)))), (3, 4)),
    "take_axis1": (lambda x: ops.reduce_sum(ops.square(ops.take(x, [3, 0, 3], axis=1))), (3, 4)),
    "einsum_a": (
        lambda x: ops.reduce_sum(ops.square(ops.einsum("rk,rjk->rj", x, T(_rand(3, 2, 4, seed=12))))), (3, 4)),
    "einsum_b": (
        lambda v: ops.reduce_sum(ops.square(ops.einsum("rj,rjk->rk", T(_rand(3, 2, seed=13)), v))), (3, 2, 4)),
    "bias_add": (lambda b: ops.reduce_sum(ops.square(ops.bias_add(T(FIXED), b))), (4,)),
    "apply_mask": (lambda x: ops.reduce_sum(ops.square(ops.apply_mask(x, MASK))), (3, 4)),
    "propagate": (lambda x: ops.reduce_sum(ops.square(ops.propagate(_rand(3, 3, seed=8), x))), (3, 4)),
    "softmax_masked": (
        lambda x: ops.reduce_sum(ops.mul(ops.softmax_masked(x, MASK), T(FIXED))), (3, 4)),
    "masked_max": (
        lambda x: ops.reduce_sum(ops.mul(ops.masked_max(x, [True, False, True], axis=0), T(FIXED[0]))),
        (3, 4)),
    "conv1d_x": (
        lambda x: ops.reduce_sum(ops.square(ops.conv1d(x, T(_rand(2, 3, 3, seed=6)), stride=2))), (2, 3, 9)),
    "conv1d_w": (
        lambda w: ops.reduce_sum(ops.square(ops.conv1d(T(_rand(2, 3, 9, seed=6)), w, stride=2))), (2, 3, 3)),
    "layer_norm": (
        lambda x: ops.reduce_sum(ops.mul(ops.layer_norm(x, T(FIXED[0] + 1), T(FIXED[1])), T(FIXED))), (3, 4)),
    "batch_norm": (
        lambda x: ops.reduce_sum(ops.mul(
            ops.batch_norm(x, T(FIXED[0] + 1), T(FIXED[1]), BatchNormState.fresh(4), True), T(FIXED))), (3, 4)),
    "batch_norm_3d": (
        lambda x: ops.reduce_sum(ops.mul(
            ops.batch_norm(x, T([1.0, 2.0]), T([0.5, 0.0]), BatchNormState.fresh(2), True),
            T(_rand(3, 2, 5, seed=11)))), (3, 2, 5)),
    "dropout": (
        lambda x: ops.reduce_sum(ops.square(ops.dropout(x, 0.4, np.random.default_rng(1), True))), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient(name):
    fn, shape = OP_CASES[name]
    assert grad_check(fn, _rand(*shape, seed=len(name))) <= 1e-6


def test_grad_check_sum_is_exact():
    assert grad_check(ops.reduce_sum, _rand(5)) <= 1e-10


def test_grad_check_softmax_dot():
    v = T([0.3, -1.0, 2.0, 0.5])
    assert grad_check(lambda x: ops.reduce_sum(ops.mul(ops.softmax_masked(x), v)), _rand(4)) <= 1e-6
