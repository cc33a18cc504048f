"""Tensor engine tests: op semantics against independent oracles, and
finite-difference verification of every registered differentiable op."""

import numpy as np
import pytest

from dgrlab import tensor as T


def naive_conv2d(x, w, stride, padding):
    """Six-nested-loop reference convolution, independent of the engine."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.zeros((b, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    out = np.zeros((b, o, ho, wo), dtype=np.float64)
    for bi in range(b):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[bi, ci, i * stride + ki, j * stride + kj] * w[oi, ci, ki, kj]
                    out[bi, oi, i, j] = acc
    return out


def rand_t(rng, shape, dtype=np.float32, requires_grad=False, scale=1.0):
    return T.tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=dtype)


class TestConv2d:
    def test_identity_kernel(self):
        x = T.tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
        w = T.tensor(np.ones((1, 1, 1, 1)))
        y = T.conv2d(x, w)
        np.testing.assert_array_equal(y.data, x.data)

    def test_full_sum_kernel(self):
        x = T.tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        w = T.tensor(np.ones((1, 1, 2, 2)))
        y = T.conv2d(x, w)
        assert y.data.shape == (1, 1, 1, 1)
        assert y.data[0, 0, 0, 0] == pytest.approx(10.0)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_naive_loop(self, stride, padding):
        rng = np.random.default_rng(11)
        x = rand_t(rng, (1, 2, 5, 5))
        w = rand_t(rng, (3, 2, 3, 3))
        y = T.conv2d(x, w, stride=stride, padding=padding)
        ref = naive_conv2d(x.data, w.data, stride, padding)
        np.testing.assert_allclose(y.data, ref, atol=1e-5)

    def test_bias(self):
        rng = np.random.default_rng(3)
        x = rand_t(rng, (2, 2, 4, 4))
        w = rand_t(rng, (3, 2, 3, 3))
        b = T.tensor([1.0, -2.0, 0.5])
        y = T.conv2d(x, w, bias=b, padding=1)
        y0 = T.conv2d(x, w, padding=1)
        np.testing.assert_allclose(y.data, y0.data + b.data[None, :, None, None], rtol=1e-6)

    def test_channel_mismatch_names_dimension(self):
        x = T.tensor(np.zeros((1, 3, 4, 4)))
        w = T.tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(T.ShapeError, match="dimension 1"):
            T.conv2d(x, w)

    def test_non_square_kernel_rejected(self):
        x = T.tensor(np.zeros((1, 1, 4, 4)))
        w = T.tensor(np.zeros((1, 1, 3, 5)))
        with pytest.raises(T.ShapeError, match="square"):
            T.conv2d(x, w)

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
    def test_gradients_fd(self, dtype, tol):
        rng = np.random.default_rng(5)
        x0 = rng.standard_normal((2, 3, 8, 8))
        w0 = rng.standard_normal((4, 3, 3, 3)) * 0.3
        u = T.tensor(rng.standard_normal((2, 4, 8, 8)), dtype=dtype)  # smooth readout
        u2 = T.tensor(rng.standard_normal((2, 4, 4, 4)), dtype=dtype)

        def loss_of_x(p):
            return T.mean(T.mul(T.conv2d(p, T.tensor(w0, dtype=dtype), stride=1, padding=1), u))

        def loss_of_w(p):
            return T.mean(T.mul(T.conv2d(T.tensor(x0, dtype=dtype), p, stride=2, padding=1), u2))

        rep = T.finite_diff_check(loss_of_x, T.tensor(x0, dtype=dtype), tol, "conv2d/dx", max_coords=60)
        assert rep.passed, rep
        rep = T.finite_diff_check(loss_of_w, T.tensor(w0, dtype=dtype), tol, "conv2d/dw")
        assert rep.passed, rep


class TestActivations:
    def test_sigmoid_zero(self):
        y = T.sigmoid(T.tensor([0.0]))
        assert y.data[0] == pytest.approx(0.5)

    def test_leaky_relu_negative(self):
        y = T.leaky_relu(T.tensor([-1.0]), slope=0.2)
        assert y.data[0] == pytest.approx(-0.2)

    def test_leaky_relu_slope_domain(self):
        with pytest.raises(ValueError):
            T.leaky_relu(T.tensor([1.0]), slope=1.5)

    @pytest.mark.parametrize("fn", [T.tanh, T.sigmoid, lambda t: T.leaky_relu(t, 0.2)])
    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
    def test_gradients_fd(self, fn, dtype, tol):
        rng = np.random.default_rng(7)
        for trial in range(3):
            x0 = rng.standard_normal((4, 5)) + 0.05  # keep away from the lrelu kink
            rep = T.finite_diff_check(lambda p: T.mean(fn(p)), T.tensor(x0, dtype=dtype),
                                      tol, "activation")
            assert rep.passed, rep


class TestElementwiseAndReduce:
    def test_l1_mean_self_is_zero(self):
        x = T.tensor([1.0, 2.0, 3.0])
        assert T.l1_mean(x, x).item() == 0.0

    def test_l1_mean_hand_sum(self):
        a = T.tensor([1.0, 2.0])
        b = T.tensor([2.0, 4.0])
        assert T.l1_mean(a, b).item() == pytest.approx(1.5)

    def test_no_broadcasting(self):
        a = T.tensor(np.zeros((2, 3)))
        b = T.tensor(np.zeros((2, 1)))
        with pytest.raises(T.ShapeError, match="dimension 1"):
            T.add(a, b)

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(19)
        a = rng.standard_normal(40).astype(np.float32)
        b = rng.standard_normal(40).astype(np.float32)
        acc = 0.0
        for i in range(40):
            acc += abs(float(a[i]) - float(b[i]))
        assert T.l1_mean(T.tensor(a), T.tensor(b)).item() == pytest.approx(acc / 40, rel=1e-6)

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
    def test_sq_mean_gradient_fd(self, dtype, tol):
        rng = np.random.default_rng(23)
        rep = T.finite_diff_check(T.sq_mean, T.tensor(rng.standard_normal((3, 4)), dtype=dtype),
                                  tol, "sq_mean")
        assert rep.passed, rep

    def test_log_clamped_floor(self):
        y = T.log_clamped(T.tensor([0.0, -5.0, 1.0]))
        np.testing.assert_allclose(y.data[:2], np.log(1e-6), rtol=1e-5)
        assert y.data[2] == pytest.approx(0.0, abs=1e-7)

    def test_div_fd(self):
        rng = np.random.default_rng(29)
        a0 = rng.standard_normal((3, 3))
        b0 = rng.standard_normal((3, 3)) + 4.0

        rep = T.finite_diff_check(
            lambda p: T.mean(T.div(p, T.tensor(b0, dtype=np.float64))),
            T.tensor(a0, dtype=np.float64), 1e-6, "div/da")
        assert rep.passed, rep
        rep = T.finite_diff_check(
            lambda p: T.mean(T.div(T.tensor(a0, dtype=np.float64), p)),
            T.tensor(b0, dtype=np.float64), 1e-6, "div/db")
        assert rep.passed, rep


class TestGridSample:
    def test_zero_field_identity(self):
        rng = np.random.default_rng(31)
        x = rand_t(rng, (2, 3, 6, 7))
        f = T.tensor(np.zeros((2, 2, 6, 7)))
        y = T.grid_sample(x, f)
        np.testing.assert_allclose(y.data, x.data, atol=1e-6)

    def test_integer_shift_oracle(self):
        rng = np.random.default_rng(37)
        x = rand_t(rng, (1, 1, 5, 8))
        f = np.zeros((1, 2, 5, 8), dtype=np.float32)
        f[:, 1] = 1.0  # dx = +1: output column j samples input column j+1
        y = T.grid_sample(x, T.tensor(f))
        np.testing.assert_allclose(y.data[0, 0, :, :-1], x.data[0, 0, :, 1:], atol=1e-6)

    def test_border_clamp(self):
        x = T.tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 1, 4))
        f = np.zeros((1, 2, 1, 4), dtype=np.float32)
        f[:, 1] = 10.0  # everything samples past the right edge
        y = T.grid_sample(x, T.tensor(f))
        np.testing.assert_allclose(y.data, np.full((1, 1, 1, 4), 3.0), atol=1e-6)

    def test_field_shape_mismatch(self):
        x = T.tensor(np.zeros((1, 1, 4, 4)))
        f = T.tensor(np.zeros((1, 2, 4, 5)))
        with pytest.raises(T.ShapeError):
            T.grid_sample(x, f)

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
    def test_gradient_wrt_field_fd(self, dtype, tol):
        rng = np.random.default_rng(41)
        x0 = rng.standard_normal((1, 2, 6, 6))
        # non-integer displacements, well inside the border
        f0 = rng.uniform(-0.8, 0.8, (1, 2, 6, 6)) + 0.3

        def loss(p):
            return T.sq_mean(T.grid_sample(T.tensor(x0, dtype=dtype), p))

        rep = T.finite_diff_check(loss, T.tensor(f0, dtype=dtype), tol, "grid_sample/dfield")
        assert rep.passed, rep

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
    def test_gradient_wrt_input_fd(self, dtype, tol):
        rng = np.random.default_rng(43)
        x0 = rng.standard_normal((1, 2, 6, 6))
        f0 = rng.uniform(-0.7, 0.7, (1, 2, 6, 6))

        def loss(p):
            return T.sq_mean(T.grid_sample(p, T.tensor(f0, dtype=dtype)))

        rep = T.finite_diff_check(loss, T.tensor(x0, dtype=dtype), tol, "grid_sample/dinput")
        assert rep.passed, rep


class TestBackward:
    def test_mean_grad(self):
        x = T.tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        T.backward(T.mean(x))
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1.0 / 6.0), rtol=1e-6)

    def test_sq_mean_grad_analytic(self):
        x0 = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        x = T.tensor(x0, requires_grad=True)
        T.backward(T.sq_mean(x))
        np.testing.assert_allclose(x.grad, 2.0 * x0 / 3.0, rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = T.tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(T.ShapeError, match="scalar"):
            T.backward(T.add(x, x))

    def test_accumulation_documented(self):
        x = T.tensor([2.0], requires_grad=True)
        loss1 = T.sq_mean(x)
        T.backward(loss1)
        g1 = x.grad.copy()
        loss2 = T.sq_mean(x)
        T.backward(loss2)
        np.testing.assert_allclose(x.grad, 2 * g1, rtol=1e-6)

    def test_diamond_graph_accumulates_once_per_path(self):
        x = T.tensor([3.0], requires_grad=True)
        y = T.add(x, x)  # dy/dx = 2
        T.backward(T.mean(y))
        assert x.grad[0] == pytest.approx(2.0)

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-6)])
    def test_composite_chain_fd(self, dtype, tol):
        # conv -> activation -> grid_sample -> l1_mean, grads vs FD
        rng = np.random.default_rng(47)
        x0 = rng.standard_normal((1, 2, 6, 6)) * 0.5
        w0 = rng.standard_normal((2, 2, 3, 3)) * 0.4
        f0 = rng.uniform(-0.5, 0.5, (1, 2, 6, 6))
        y0 = rng.standard_normal((1, 2, 6, 6))

        def loss(p):
            h = T.conv2d(T.tensor(x0, dtype=dtype), p, padding=1)
            h = T.tanh(h)
            h = T.grid_sample(h, T.tensor(f0, dtype=dtype))
            return T.l1_mean(h, T.tensor(y0, dtype=dtype))

        rep = T.finite_diff_check(loss, T.tensor(w0, dtype=dtype), tol, "composite")
        assert rep.passed, rep


class TestStructuralOps:
    def test_concat_and_split_grads(self):
        a = T.tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        b = T.tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
        out = T.concat_channels([a, b])
        assert out.shape == (1, 5, 2, 2)
        T.backward(T.mean(out))
        assert a.grad.shape == (1, 2, 2, 2) and b.grad.shape == (1, 3, 2, 2)
        np.testing.assert_allclose(a.grad, 1.0 / 20.0)

    def test_upsample_shape_and_grad(self):
        rng = np.random.default_rng(53)
        x = T.tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        y = T.upsample2x(x)
        assert y.shape == (1, 1, 6, 6)
        np.testing.assert_allclose(y.data[0, 0, :2, :2], np.full((2, 2), x.data[0, 0, 0, 0]), rtol=1e-6)
        T.backward(T.mean(y))
        np.testing.assert_allclose(x.grad, np.full((1, 1, 3, 3), 4.0 / 36.0), rtol=1e-6)

    def test_instance_norm_stats(self):
        rng = np.random.default_rng(59)
        x = T.tensor(rng.standard_normal((2, 3, 8, 8)) * 3 + 1)
        y = T.instance_norm(x)
        flat = y.data.reshape(2, 3, -1)
        np.testing.assert_allclose(flat.mean(axis=2), 0.0, atol=1e-5)
        np.testing.assert_allclose(flat.std(axis=2), 1.0, atol=1e-3)

    def test_instance_norm_fd(self):
        rng = np.random.default_rng(61)
        x0 = rng.standard_normal((1, 2, 4, 4))
        rep = T.finite_diff_check(lambda p: T.sq_mean(T.instance_norm(p)),
                                  T.tensor(x0, dtype=np.float64), 1e-5, "instance_norm")
        assert rep.passed, rep

    def test_window_mean_valid_box(self):
        x = T.tensor(np.ones((1, 1, 5, 5)))
        taps = np.full(3, 1.0 / 3.0, dtype=np.float32)
        y = T.window_mean_valid(x, taps)
        assert y.shape == (1, 1, 3, 3)
        np.testing.assert_allclose(y.data, 1.0, rtol=1e-5)

    def test_window_mean_valid_fd(self):
        rng = np.random.default_rng(67)
        x0 = rng.standard_normal((1, 1, 7, 7))
        taps = np.array([0.25, 0.5, 0.25])
        rep = T.finite_diff_check(lambda p: T.mean(T.window_mean_valid(p, taps)),
                                  T.tensor(x0, dtype=np.float64), 1e-6, "window_mean")
        assert rep.passed, rep


class TestFiniteDiffCheck:
    def test_mean_passes_tight(self):
        rep = T.finite_diff_check(T.mean, T.tensor(np.arange(4.0), dtype=np.float64),
                                  1e-6, "mean")
        assert rep.passed and rep.max_rel_error <= 1e-6

    def test_report_invariant(self):
        rep = T.finite_diff_check(T.mean, T.tensor(np.arange(4.0), dtype=np.float64), 1e-6)
        assert rep.passed == (rep.max_rel_error <= rep.tolerance)

    def test_wrong_gradient_fails(self):
        # negative control: an op with a deliberately wrong backward
        def bad_sq_mean(p):
            out_data = np.asarray(np.mean(p.data * p.data))
            def bwd(dy):
                T._accum(p, np.full_like(p.data, 0.123), own=True)  # wrong on purpose
            return T._result(out_data, (p,), bwd)

        rep = T.finite_diff_check(bad_sq_mean,
                                  T.tensor(np.array([1.0, 2.0, 3.0]), dtype=np.float64),
                                  1e-6, "bad_op")
        assert not rep.passed


class TestDeterminism:
    def test_reductions_bitwise_repeatable(self):
        rng = np.random.default_rng(71)
        x0 = rng.standard_normal((4, 3, 16, 16)).astype(np.float32)
        w0 = (rng.standard_normal((4, 3, 3, 3)) * 0.2).astype(np.float32)
        vals = []
        for _ in range(2):
            y = T.conv2d(T.tensor(x0), T.tensor(w0), padding=1)
            vals.append(T.sq_mean(y).data.tobytes())
        assert vals[0] == vals[1]


def test_dump_format(tmp_path):
    t = T.tensor(np.array([[1.123456789, 2.0], [3.0, 4.0]]))
    path = tmp_path / "t.txt"
    T.dump(t, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "2 2"
    assert len(lines) == 5
    assert float(lines[1]) == pytest.approx(1.123456789, rel=1e-6)  # f32 storage
