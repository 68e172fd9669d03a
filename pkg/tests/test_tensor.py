"""Tensor engine: elementwise ops, contractions, reductions, backward, Adam."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topicnet import tensor as tn
from topicnet.errors import NumericError, ShapeError
from topicnet.optim import AdamState, adam_step, zero_grads
from topicnet.tensor import Tensor, backward, no_grad

from helpers import check_grads
from oracles import adam_oracle, rel_err, softmax_oracle


class TestElementwise:
    def test_mul_values(self):
        out = Tensor([1.0, 2.0, 3.0]) * Tensor([2.0, 2.0, 2.0])
        np.testing.assert_array_equal(out.data, [2.0, 4.0, 6.0])

    def test_sigmoid_at_zero(self):
        assert tn.sigmoid(Tensor(0.0)).item() == 0.5

    def test_exp_of_inverse_temperature(self):
        """exp(1/0.07) lands near 1.60e6; pinned by direct evaluation."""
        value = tn.exp(Tensor(1.0 / 0.07)).item()
        assert value == pytest.approx(np.exp(1.0 / 0.07), rel=1e-12)
        assert value == pytest.approx(1.60e6, rel=1e-3)

    def test_broadcasting_follows_numpy(self):
        out = Tensor(np.ones((2, 1, 3))) + Tensor(np.ones((4, 1)))
        assert out.shape == (2, 4, 3)

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 5)))

    def test_div_floor_is_enforced(self):
        with pytest.raises(NumericError):
            Tensor([1.0]) / Tensor([1e-13])

    def test_nonfinite_forward_raises(self):
        with pytest.raises(NumericError):
            tn.log(Tensor([-1.0]))
        with pytest.raises(NumericError):
            tn.exp(Tensor([1000.0]))
        with pytest.raises(NumericError):
            tn.sqrt(Tensor([-4.0]))

    def test_mul_broadcast_commutes_bitwise(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 1, 5)))
        b = Tensor(rng.normal(size=(1, 4, 5)))
        np.testing.assert_array_equal((a * b).data, (b * a).data)

    def test_relu_and_clamp_values(self):
        x = Tensor([-2.0, 0.0, 3.0])
        np.testing.assert_array_equal(tn.relu(x).data, [0.0, 0.0, 3.0])
        np.testing.assert_array_equal(tn.clamp_min(x, 0.5).data, [0.5, 0.5, 3.0])

    def test_scalar_operands_promote(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        out = (2.0 * x + 1.0) / 2.0 - 0.5
        np.testing.assert_allclose(out.data, [1.0, 2.0])

    def test_elementwise_grads_match_finite_differences(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)

        def build():
            out = tn.log(a) * b + tn.exp(b) / a - tn.sqrt(a)
            return tn.sigmoid(out).sum()

        assert check_grads(build, [a, b], h=1e-5, floor=1e-6) <= 1e-6

    def test_relu_gradient_zero_at_kink(self):
        x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
        backward(tn.relu(x).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestMatmul:
    def test_identity(self):
        v = Tensor([1.0, -2.0, 0.5])
        out = Tensor(np.eye(3)) @ v
        np.testing.assert_array_equal(out.data, v.data)

    def test_hand_case(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_inner_dim_mismatch_raises(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))

    def test_grads_match_finite_differences(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
        weights = rng.normal(size=(4, 6))

        def build():
            return ((a @ b) * weights).sum()

        assert check_grads(build, [a, b], h=1e-5, floor=1e-6) <= 1e-6

    def test_batched_broadcast_grads(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        weights = rng.normal(size=(3, 2, 5))

        def build():
            return ((a @ b) * weights).sum()

        assert check_grads(build, [a, b], h=1e-5, floor=1e-6) <= 1e-6

    def test_vector_operand_grads(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(6,)), requires_grad=True)
        b = Tensor(rng.normal(size=(6,)), requires_grad=True)

        def build():
            return a @ b

        assert check_grads(build, [a, b], h=1e-5, floor=1e-6) <= 1e-6


class TestSoftmax:
    def test_uniform_inputs(self):
        out = tn.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), rtol=0, atol=1e-15)

    def test_large_inputs_do_not_overflow(self):
        out = tn.softmax(Tensor([1000.0, 1000.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=0, atol=1e-15)

    def test_known_values(self):
        out = tn.softmax(Tensor([1.0, 2.0, 3.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.09003, 0.24473, 0.66524], atol=1e-5)
        np.testing.assert_allclose(out.data, softmax_oracle([1.0, 2.0, 3.0]), atol=1e-12)

    @settings(deadline=None, max_examples=30)
    @given(
        st.lists(
            st.lists(st.floats(-50, 50), min_size=2, max_size=6),
            min_size=1,
            max_size=4,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    def test_rows_sum_to_one_and_stay_positive(self, rows):
        out = tn.softmax(Tensor(np.array(rows)), axis=1)
        assert np.all(out.data > 0)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_grads_match_finite_differences(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        weights = rng.normal(size=(3, 5))

        def build():
            return (tn.softmax(x, axis=1) * weights).sum()

        assert check_grads(build, [x], h=1e-5, floor=1e-6) <= 1e-6


class TestReductions:
    def test_max_values(self):
        out = tn.reduce_max(Tensor([[1.0, 5.0], [7.0, 2.0]]), axis=1)
        np.testing.assert_array_equal(out.data, [5.0, 7.0])

    def test_mean_of_constant(self):
        assert Tensor(np.full((4, 5), 2.5)).mean().item() == 2.5

    def test_max_tie_routes_to_lowest_index(self):
        x = Tensor([3.0, 3.0], requires_grad=True)
        backward(x.max())
        np.testing.assert_array_equal(x.grad, [1.0, 0.0])

    def test_max_backward_is_one_hot_per_slice(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(4, 7)), requires_grad=True)
        backward(x.max(axis=1).sum())
        np.testing.assert_array_equal(x.grad.sum(axis=1), np.ones(4))
        assert np.all((x.grad == 0) | (x.grad == 1))

    def test_sum_mean_grads_with_tuple_axes(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        weights = rng.normal(size=(3,))

        def build():
            return (x.mean(axis=(0, 2)) * weights).sum() + 0.1 * x.sum()

        assert check_grads(build, [x], h=1e-5, floor=1e-6) <= 1e-6

    def test_max_grad_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        weights = rng.normal(size=(3,))

        def build():
            return (x.max(axis=1) * weights).sum()

        assert check_grads(build, [x], h=1e-5, floor=1e-6) <= 1e-6


class TestShapeOps:
    def test_reshape_transpose_narrow_round_trip(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 3, 4)))
        back = x.reshape((6, 4)).reshape((2, 3, 4))
        np.testing.assert_array_equal(back.data, x.data)
        flipped = x.transpose((2, 0, 1)).transpose((1, 2, 0))
        np.testing.assert_array_equal(flipped.data, x.data)
        np.testing.assert_array_equal(x.narrow(0, 1, 1).data, x.data[1:2])

    def test_narrow_out_of_range_raises(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)).narrow(0, 2, 2)

    def test_shape_op_grads(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        weights = rng.normal(size=(4, 3))

        def build():
            y = x.narrow(0, 0, 1).reshape((3, 4)).transpose((1, 0))
            return (y * weights).sum() + x.narrow(0, 1, 1).sum()

        assert check_grads(build, [x], h=1e-5, floor=1e-6) <= 1e-6


class TestBackwardSemantics:
    def test_square_sum(self):
        x = Tensor([3.0], requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_shared_input_accumulates_exactly_once(self):
        """z = x*y + x flushes dz/dx = y + 1 in a single update."""
        x = Tensor([2.0], requires_grad=True)
        y = Tensor([5.0], requires_grad=True)
        backward((x * y + x).sum())
        np.testing.assert_array_equal(x.grad, [6.0])
        np.testing.assert_array_equal(y.grad, [2.0])

    def test_unrelated_parameter_gets_zero(self):
        x = Tensor([1.0], requires_grad=True)
        p = Tensor([1.0], requires_grad=True)
        backward((x * 2.0).sum())
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0], requires_grad=True)
        backward((x * 3.0).sum())
        backward((x * 3.0).sum())
        np.testing.assert_array_equal(x.grad, [6.0])
        x.zero_grad()
        backward((x * 3.0).sum())
        np.testing.assert_array_equal(x.grad, [3.0])

    def test_backward_clears_the_tape(self):
        x = Tensor([1.0], requires_grad=True)
        loss = (x * x).sum()
        assert len(tn.TAPE) > 0
        backward(loss)
        assert len(tn.TAPE) == 0

    def test_non_scalar_loss_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_intermediates_receive_grads(self):
        x = Tensor([2.0], requires_grad=True)
        mid = x * 3.0
        backward(mid.sum())
        np.testing.assert_array_equal(mid.grad, [1.0])

    def test_no_grad_suppresses_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            out = x * 2.0
        assert not out.requires_grad
        assert len(tn.TAPE) == 0


class TestAdam:
    def test_zero_gradient_keeps_parameter(self):
        p = Tensor([1.5], requires_grad=True)
        state = AdamState()
        _ = p.grad  # allocate zeros
        adam_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, [1.5])

    def test_first_step_moves_by_learning_rate(self):
        p = Tensor([0.0], requires_grad=True)
        p.grad[:] = 1.0
        adam_step({"p": p}, AdamState(lr=1e-4))
        assert p.data[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
        assert p.data[0] == pytest.approx(-1e-4, rel=1e-6)

    def test_step_counter_increments_by_one(self):
        p = Tensor([0.0], requires_grad=True)
        state = AdamState()
        for expected in (1, 2, 3):
            adam_step({"p": p}, state)
            assert state.t == expected

    def test_trajectory_matches_recurrence_oracle(self):
        rng = np.random.default_rng(11)
        grads = rng.normal(size=(5, 3))
        p = Tensor(np.zeros(3), requires_grad=True)
        state = AdamState(lr=1e-2)
        for step in range(5):
            zero_grads({"p": p})
            p.grad[:] = grads[step]
            adam_step({"p": p}, state)
        for c in range(3):
            expected = adam_oracle(0.0, grads[:, c], lr=1e-2)[-1]
            assert p.data[c] == pytest.approx(expected, rel=1e-12)

    def test_gradients_flow_into_update(self):
        p = Tensor([1.0], requires_grad=True)
        state = AdamState(lr=1e-3)
        backward((p * p).sum())
        adam_step({"p": p}, state)
        assert p.data[0] < 1.0
