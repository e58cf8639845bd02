import itertools

import numpy as np
import pytest

from treepcae.errors import ContractError, NumericError, ShapeError
from treepcae.tensor import Tape, Tensor, finite_diff_check


def tensors(*arrays, grad=True):
    return [Tensor(a, requires_grad=grad) for a in arrays]


class TestForward:
    def test_matmul_identity(self):
        a, b = tensors(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
        out = Tape().matmul(a, b)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_matmul_hand_product(self):
        a, b = tensors([[1.0, 2.0]], [[3.0], [4.0]])
        assert Tape().matmul(a, b).item() == 11.0

    def test_matmul_shape_error_names_both_shapes(self):
        a, b = tensors(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            Tape().matmul(a, b)

    def test_leaky_relu_definition(self):
        (x,) = tensors([[-1.0, 0.0, 2.0]])
        out = Tape().leaky_relu(x, 0.2)
        np.testing.assert_allclose(out.data, [[-0.2, 0.0, 0.4]])

    def test_leaky_relu_nonnegative_passthrough(self):
        (x,) = tensors([[0.0, 1.0, 3.5]])
        np.testing.assert_array_equal(Tape().leaky_relu(x, 0.2).data, x.data)

    def test_leaky_relu_slope_domain(self):
        (x,) = tensors([[1.0]])
        for slope in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ContractError):
                Tape().leaky_relu(x, slope)

    def test_group_max_hand(self):
        (x,) = tensors([[1.0, 5.0], [3.0, 2.0]])
        np.testing.assert_array_equal(Tape().group_max(x, 2).data, [[3.0, 5.0]])

    def test_group_max_group_one_is_identity(self):
        (x,) = tensors(np.arange(12.0).reshape(4, 3))
        np.testing.assert_array_equal(Tape().group_max(x, 1).data, x.data)

    def test_group_max_divisibility(self):
        (x,) = tensors(np.zeros((5, 2)))
        with pytest.raises(ShapeError):
            Tape().group_max(x, 2)

    def test_group_max_block_permutation_invariance_exhaustive(self):
        rng = np.random.default_rng(11)
        base = rng.normal(size=(3, 4))
        reference = Tape().group_max(Tensor(base), 3).data
        for perm in itertools.permutations(range(3)):
            out = Tape().group_max(Tensor(base[list(perm)]), 3).data
            np.testing.assert_array_equal(out, reference)

    def test_pairwise_sqdist_hand(self):
        a, b = tensors([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(Tape().pairwise_sqdist(a, b).data, [[1.0]])

    def test_pairwise_sqdist_zero_diagonal(self):
        (x,) = tensors(np.random.default_rng(0).normal(size=(6, 3)))
        d = Tape().pairwise_sqdist(x, x).data
        np.testing.assert_array_equal(np.diag(d), np.zeros(6))

    def test_concat_and_reshape_round_trip(self):
        a, b = tensors(np.arange(6.0).reshape(2, 3), np.arange(6.0, 12.0).reshape(2, 3))
        tape = Tape()
        rows = tape.concat_rows([a, b])
        assert rows.data.shape == (4, 3)
        cols = tape.concat_cols([a, b])
        assert cols.data.shape == (2, 6)
        back = tape.reshape(rows, (2, 6))
        assert back.data.shape == (2, 6)
        with pytest.raises(ShapeError):
            tape.reshape(rows, (5, 2))

    def test_repeat_rows_layout(self):
        (x,) = tensors([[1.0, 2.0], [3.0, 4.0]])
        out = Tape().repeat_rows(x, 3)
        np.testing.assert_array_equal(out.data[:3], np.tile([1.0, 2.0], (3, 1)))
        np.testing.assert_array_equal(out.data[3:], np.tile([3.0, 4.0], (3, 1)))

    def test_non_finite_input_rejected(self):
        with pytest.raises(NumericError):
            Tensor([np.inf, 0.0])

    def test_forward_determinism(self):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(8, 3)), rng.normal(size=(3, 4))

        def forward():
            tape = Tape()
            out = tape.leaky_relu(tape.matmul(Tensor(x), Tensor(w)), 0.2)
            return tape.group_max(out, 2).data

        first, second = forward(), forward()
        assert first.tobytes() == second.tobytes()


class TestBackward:
    def test_sum_gradient_is_ones(self):
        (x,) = tensors(np.arange(6.0).reshape(2, 3))
        tape = Tape()
        tape.backward(tape.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_backward_twice_is_error(self):
        (x,) = tensors([1.0, 2.0])
        tape = Tape()
        loss = tape.reduce_sum(x)
        tape.backward(loss)
        with pytest.raises(ContractError):
            tape.backward(loss)

    def test_backward_requires_scalar(self):
        (x,) = tensors(np.ones((2, 2)))
        tape = Tape()
        out = tape.leaky_relu(x, 0.2)
        with pytest.raises(ContractError):
            tape.backward(out)

    def test_backward_requires_recorded_loss(self):
        (x,) = tensors(np.ones(3))
        tape = Tape()
        tape.reduce_sum(x)
        other = Tensor(0.0)
        with pytest.raises(ContractError):
            tape.backward(other)

    def test_matmul_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        b = rng.normal(size=(4, 2))
        err = finite_diff_check(
            lambda tape, a: tape.reduce_sum(tape.matmul(a, Tensor(b))),
            Tensor(rng.normal(size=(3, 4))), 1e-5)
        assert err <= 1e-4

    def test_composite_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(3, 5))
        x = rng.normal(size=(4, 3))
        x[np.abs(x) < 1e-2] += 0.1  # keep away from the leaky-relu kink
        err = finite_diff_check(
            lambda tape, v: tape.reduce_sum(tape.leaky_relu(tape.matmul(v, Tensor(w)), 0.2)),
            Tensor(x), 1e-5)
        assert err <= 1e-4

    def test_group_max_routes_gradient_to_first_argmax(self):
        (x,) = tensors([[2.0, 1.0], [2.0, 3.0]])
        tape = Tape()
        tape.backward(tape.reduce_sum(tape.group_max(x, 2)))
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0], [0.0, 1.0]])

    def test_gradient_linearity(self):
        rng = np.random.default_rng(3)
        base = rng.normal(size=(4, 3)) + 0.5

        def grad_of(f):
            tape = Tape()
            x = Tensor(base, requires_grad=True)
            tape.backward(f(tape, x))
            return x.grad

        g1 = grad_of(lambda tape, x: tape.reduce_sum(tape.leaky_relu(x, 0.3)))
        g2 = grad_of(lambda tape, x: tape.reduce_sum(tape.scale(x, 2.0)))
        combined = grad_of(lambda tape, x: tape.add(
            tape.reduce_sum(tape.leaky_relu(x, 0.3)),
            tape.reduce_sum(tape.scale(x, 2.0))))
        np.testing.assert_array_equal(combined, g1 + g2)

    def test_gradient_accumulates_across_tapes(self):
        (x,) = tensors(np.ones(4))
        for _ in range(2):
            tape = Tape()
            tape.backward(tape.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, 2.0 * np.ones(4))

    @pytest.mark.parametrize("seed", range(10))
    def test_every_op_gradient_on_random_seeds(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 6))
        x[np.abs(x) < 1e-3] += 0.01
        bias = rng.normal(size=6)
        other = rng.normal(size=(3, 6))
        w = rng.normal(size=(6, 2))

        cases = {
            "matmul": lambda tape, v: tape.reduce_sum(tape.matmul(v, Tensor(w))),
            "leaky_relu": lambda tape, v: tape.reduce_sum(tape.leaky_relu(v, 0.2)),
            "group_max": lambda tape, v: tape.reduce_sum(tape.group_max(v, 2)),
            "add": lambda tape, v: tape.reduce_sum(tape.add(v, Tensor(x + 1.0))),
            "add_bias": lambda tape, v: tape.reduce_sum(tape.add_bias(v, Tensor(bias))),
            "scale": lambda tape, v: tape.reduce_sum(tape.scale(v, -1.7)),
            "reshape": lambda tape, v: tape.reduce_sum(tape.reshape(v, (2, 12))),
            "repeat_rows": lambda tape, v: tape.reduce_sum(tape.repeat_rows(v, 3)),
            "concat_rows": lambda tape, v: tape.reduce_sum(tape.concat_rows([v, Tensor(other)])),
            "concat_cols": lambda tape, v: tape.reduce_sum(tape.concat_cols([v, Tensor(x)])),
            "pairwise_sqdist": lambda tape, v: tape.reduce_sum(
                tape.pairwise_sqdist(v, Tensor(other))),
            "row_min": lambda tape, v: tape.reduce_sum(
                tape.row_min(tape.pairwise_sqdist(v, Tensor(other)))),
            "col_min": lambda tape, v: tape.reduce_sum(
                tape.col_min(tape.pairwise_sqdist(v, Tensor(other)))),
        }
        for name, f in cases.items():
            err = finite_diff_check(f, Tensor(x), 1e-5)
            assert err <= 1e-4, f"{name} gradient check failed: {err}"


class TestFiniteDiffCheck:
    def test_sum_of_squares(self):
        # sum(x^2) expressed as summed squared distances to the origin
        rng = np.random.default_rng(4)
        x = rng.uniform(0.5, 1.5, size=(5, 3))
        err = finite_diff_check(
            lambda tape, v: tape.reduce_sum(
                tape.pairwise_sqdist(v, Tensor(np.zeros((1, 3))))),
            Tensor(x), 1e-5)
        assert err <= 1e-6

    def test_linear_function_is_nearly_exact(self):
        rng = np.random.default_rng(6)
        err = finite_diff_check(lambda tape, v: tape.reduce_sum(v),
                                Tensor(rng.uniform(-1.0, 1.0, size=(3, 4))), 1e-2)
        assert err <= 1e-10

    def test_zero_step_rejected(self):
        with pytest.raises(ContractError):
            finite_diff_check(lambda tape, v: tape.reduce_sum(v), Tensor(np.ones(2)), 0.0)
