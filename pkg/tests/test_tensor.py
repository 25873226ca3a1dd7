import io

import numpy as np
import pytest

from topklab import tensor as T
from topklab.tensor import (NonFiniteError, Tape, Tensor, TensorError,
                            backward, finite_diff_grad, grad_of,
                            load_tensor, save_tensor)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestElementwise:
    def test_add(self):
        out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_relu(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_shape_mismatch(self):
        with pytest.raises(TensorError):
            T.add(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_mul_backward_product_rule(self):
        tape = Tape()
        a = tape.watch(Tensor([2.0]))
        b = tape.watch(Tensor([5.0]))
        loss = T.tsum(T.mul(a, b))
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grad_of(grads, a), [5.0])
        np.testing.assert_array_equal(grad_of(grads, b), [2.0])

    def test_nonfinite_is_error(self):
        with pytest.raises(NonFiniteError):
            T.scale(Tensor([1e308]), 1e308)


class TestMatmul:
    def test_identity(self):
        a = rand((2, 2), 1)
        out = T.matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_value(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_against_triple_loop(self):
        a, b = rand((3, 4), 2), rand((4, 2), 3)
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        out = T.matmul(Tensor(a), Tensor(b))
        # BLAS may sum in a different order; tolerance is a few ulp
        np.testing.assert_allclose(out.data, expected, rtol=1e-14, atol=1e-15)

    def test_dim_mismatch(self):
        with pytest.raises(TensorError):
            T.matmul(Tensor(rand((2, 3))), Tensor(rand((2, 3))))


class TestBackward:
    def test_sum_gradient_ones(self):
        tape = Tape()
        x = tape.watch(Tensor(rand((3, 4))))
        grads = backward(tape, T.tsum(x))
        np.testing.assert_array_equal(grad_of(grads, x), np.ones((3, 4)))

    def test_sum_of_squares(self):
        tape = Tape()
        x = tape.watch(Tensor([1.0, 2.0, 3.0]))
        grads = backward(tape, T.tsum(T.square(x)))
        np.testing.assert_array_equal(grad_of(grads, x), [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.watch(Tensor([1.0, 2.0]))
        with pytest.raises(TensorError):
            backward(tape, T.square(x))

    def test_unreachable_node_zero_grad(self):
        tape = Tape()
        x = tape.watch(Tensor([1.0, 2.0]))
        y = tape.watch(Tensor([3.0]))
        grads = backward(tape, T.tsum(T.square(x)))
        np.testing.assert_array_equal(grad_of(grads, y), [0.0])

    def test_composite_matches_finite_differences(self):
        def f(t: Tensor) -> float:
            tape = Tape()
            x = tape.watch(t)
            y = T.mul(T.relu(x), T.scale(x, 0.5))
            z = T.add(y, T.square(x))
            return T.tsum(z).item()

        x0 = Tensor(rand((2, 3), 7) + 2.0)  # shifted away from the relu kink
        tape = Tape()
        xw = tape.watch(x0)
        y = T.mul(T.relu(xw), T.scale(xw, 0.5))
        loss = T.tsum(T.add(y, T.square(xw)))
        g = grad_of(backward(tape, loss), xw)
        fd = finite_diff_grad(f, x0, 1e-6)
        np.testing.assert_allclose(g, fd, rtol=1e-4)

    def test_linear_in_upstream(self):
        # doubling the loss doubles every gradient exactly
        x0 = rand((4,), 9)
        outs = []
        for alpha in (1.0, 2.0):
            tape = Tape()
            x = tape.watch(Tensor(x0))
            loss = T.scale(T.tsum(T.square(x)), alpha)
            outs.append(grad_of(backward(tape, loss), x))
        np.testing.assert_array_equal(outs[1], 2.0 * outs[0])

    def test_forward_deterministic(self):
        x = Tensor(rand((5, 5), 3))
        a = T.matmul(T.relu(x), T.transpose(x)).data
        b = T.matmul(T.relu(x), T.transpose(x)).data
        assert a.tobytes() == b.tobytes()


class TestFiniteDiff:
    def test_sum(self):
        fd = finite_diff_grad(lambda t: float(t.data.sum()), Tensor(rand((3,))))
        np.testing.assert_allclose(fd, np.ones(3), atol=1e-8)

    def test_square_scalar(self):
        fd = finite_diff_grad(lambda t: float(t.data[0] ** 2),
                              Tensor([3.0]), eps=1e-5)
        assert abs(fd[0] - 6.0) < 1e-6

    def test_x_abs_x_away_from_kink(self):
        fd = finite_diff_grad(lambda t: float(t.data[0] * abs(t.data[0])),
                              Tensor([1.0]), eps=1e-6)
        assert abs(fd[0] - 2.0) < 1e-4

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda t: 0.0, Tensor([1.0]), eps=0.0)


class TestTensorFile:
    @pytest.mark.parametrize("dtype", ["f32", "f64"])
    def test_roundtrip(self, dtype):
        arr = rand((2, 3, 4), 5).astype(np.float32 if dtype == "f32" else np.float64)
        buf = io.BytesIO()
        save_tensor(buf, Tensor(arr))
        buf.seek(0)
        back = load_tensor(buf)
        assert back.dtype == dtype
        np.testing.assert_array_equal(back.data, arr)

    def test_header_layout(self):
        buf = io.BytesIO()
        save_tensor(buf, Tensor(np.zeros((2, 3), dtype=np.float32)))
        raw = buf.getvalue()
        assert raw[:4] == b"SSLT"
        assert raw[4] == 1 and raw[5] == 0 and raw[6] == 2

    def test_bad_magic(self):
        with pytest.raises(TensorError):
            load_tensor(io.BytesIO(b"XXXX" + b"\x00" * 16))
