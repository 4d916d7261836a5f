import numpy as np
import pytest

from streamasr import numerics as nm
from streamasr.numerics import Tape, Tensor


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = nm.matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_product(self):
        out = nm.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_mismatch_message(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
            nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = nm.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = rng.normal(size=7)
            c = rng.normal() * 100
            a = nm.softmax(Tensor(v)).data
            b = nm.softmax(Tensor(v + c)).data
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_large_logits_no_overflow(self):
        out = nm.softmax(Tensor([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        assert out[0] > 1 - 1e-12 and out[1] < 1e-12

    def test_sums_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            v = rng.normal(size=rng.integers(1, 12)) * 10
            s = nm.softmax(Tensor(v)).data.sum()
            assert abs(s - 1.0) <= 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            nm.softmax(Tensor(np.zeros(0)))


class TestTruncatedSvd:
    def test_rank_one_exact(self):
        rng = np.random.default_rng(2)
        w = np.outer(rng.normal(size=6), rng.normal(size=4))
        left, right = nm.truncated_svd(w, 1)
        assert np.linalg.norm(left @ right - w) <= 1e-10

    def test_diag_drops_smallest(self):
        w = np.diag([3.0, 2.0, 1.0])
        left, right = nm.truncated_svd(w, 2)
        assert abs(np.linalg.norm(left @ right - w) - 1.0) <= 1e-10

    def test_full_rank_reconstructs(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(8, 5))
        left, right = nm.truncated_svd(w, 5)
        assert np.linalg.norm(left @ right - w) <= 1e-9

    def test_eckart_young_vs_numpy(self):
        # Oracle: numpy SVD tail norms on random rectangular matrices.
        rng = np.random.default_rng(4)
        for _ in range(25):
            m, n = rng.integers(2, 20, size=2)
            w = rng.normal(size=(m, n))
            r = int(rng.integers(1, min(m, n) + 1))
            left, right = nm.truncated_svd(w, r)
            sv = np.linalg.svd(w, compute_uv=False)
            tail = np.sqrt((sv[r:] ** 2).sum())
            assert abs(np.linalg.norm(left @ right - w) - tail) <= 1e-8

    def test_singular_values_ordered(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(7, 9))
        sv = nm.singular_values(w)
        assert (np.diff(sv) <= 1e-12).all()
        np.testing.assert_allclose(sv, np.linalg.svd(w, compute_uv=False), atol=1e-9)

    def test_rank_out_of_range(self):
        with pytest.raises(ValueError):
            nm.truncated_svd(np.zeros((3, 3)), 0)
        with pytest.raises(ValueError):
            nm.truncated_svd(np.zeros((3, 3)), 4)


class TestBackward:
    def test_linear_case(self):
        # loss = sum(W @ x): dW = x broadcast to rows, dx = column sums of W.
        tape = Tape()
        w = tape.parameter("w", np.arange(6.0).reshape(2, 3))
        x = np.array([1.0, 2.0, 3.0])
        loss = nm.tsum(nm.matmul(w, Tensor(x)))
        grads = nm.backward(tape, loss)
        np.testing.assert_allclose(grads["w"].data, np.tile(x, (2, 1)))

    def test_unreached_parameter_zero(self):
        tape = Tape()
        a = tape.parameter("a", np.ones(3))
        tape.parameter("b", np.ones(4))
        loss = nm.tsum(a)
        grads = nm.backward(tape, loss)
        np.testing.assert_array_equal(grads["b"].data, np.zeros(4))

    def test_non_scalar_rejected(self):
        tape = Tape()
        a = tape.parameter("a", np.ones(3))
        out = nm.mul(a, a)
        with pytest.raises(ValueError):
            nm.backward(tape, out)

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(6)

        def f(p):
            h = nm.tanh(nm.matmul(p["w"], p["x"]))
            s = nm.softmax(nm.add(h, p["b"]))
            return nm.tsum(nm.mul(s, s))

        params = {
            "w": rng.normal(size=(4, 3)),
            "x": rng.normal(size=3),
            "b": rng.normal(size=4),
        }
        assert nm.grad_check(f, params, eps=1e-5) <= 1e-7

    def test_accumulates_over_reuse(self):
        tape = Tape()
        a = tape.parameter("a", np.array([2.0]))
        loss = nm.tsum(nm.mul(a, a))
        grads = nm.backward(tape, loss)
        np.testing.assert_allclose(grads["a"].data, [4.0])


class TestTapeReplay:
    def test_replay_bit_identical(self):
        rng = np.random.default_rng(7)
        tape = Tape()
        w = tape.parameter("w", rng.normal(size=(5, 5)))
        v = tape.parameter("v", rng.normal(size=5))
        out = nm.softmax(nm.matmul(w, nm.tanh(v)))
        loss = nm.tsum(nm.mul(out, out))
        nm.backward(tape, loss)
        assert tape.replay() == 0.0

    def test_duplicate_parameter_rejected(self):
        tape = Tape()
        tape.parameter("p", np.ones(2))
        with pytest.raises(ValueError):
            tape.parameter("p", np.ones(2))


class TestGradCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(5, 5))
        a = a + a.T

        def f(p):
            return nm.dot(p["x"], nm.matmul(Tensor(a), p["x"]))

        assert nm.grad_check(f, {"x": rng.normal(size=5)}, eps=1e-5) <= 1e-7

    def test_constant_objective(self):
        def f(p):
            return nm.scale(nm.tsum(p["x"]), 0.0)

        assert nm.grad_check(f, {"x": np.ones(3)}, eps=1e-5) == 0.0

    def test_non_finite_rejected(self):
        def f(p):
            return nm.log(nm.scale(nm.tsum(p["x"]), -1.0))

        with pytest.raises(ValueError):
            nm.grad_check(f, {"x": np.ones(2)}, eps=1e-5)


class TestHelpersGrad:
    def test_primitive_gradients(self):
        rng = np.random.default_rng(9)
        w6 = rng.normal(size=6)
        cases = {
            "sigmoid": lambda p: nm.tsum(nm.sigmoid(p["x"])),
            "relu": lambda p: nm.tsum(nm.mul(nm.relu(p["x"]), p["x"])),
            "exp": lambda p: nm.tsum(nm.exp(p["x"])),
            "sqrt": lambda p: nm.tsum(nm.sqrt(nm.add(nm.mul(p["x"], p["x"]), 1.0))),
            "log_softmax": lambda p: nm.dot(nm.log_softmax(p["x"]), Tensor(w6)),
            "moving_sum": lambda p: nm.tsum(nm.mul(nm.moving_sum(p["x"], 1, 2), p["x"])),
            "maxpool_pairs": lambda p: nm.tsum(nm.maxpool_pairs(p["x"])),
            "narrow": lambda p: nm.tsum(nm.narrow(p["x"], 1, 3)),
        }
        for name, f in cases.items():
            err = nm.grad_check(f, {"x": rng.normal(size=6)}, eps=1e-5)
            assert err <= 1e-6, f"{name} gradient error {err}"

    def test_maxpool_time_grad(self):
        rng = np.random.default_rng(10)

        def f(p):
            return nm.tsum(nm.mul(nm.maxpool_time(p["x"], 3), 2.0))

        assert nm.grad_check(f, {"x": rng.normal(size=(7, 4))}, eps=1e-6) <= 1e-6

    def test_monotonic_alpha_grad(self):
        rng = np.random.default_rng(11)
        ap = np.zeros(6)
        ap[0] = 1.0
        w6 = rng.normal(size=6)

        def f(p):
            alpha = nm.monotonic_alpha(nm.sigmoid(p["e"]), Tensor(ap))
            return nm.dot(alpha, Tensor(w6))

        assert nm.grad_check(f, {"e": rng.normal(size=6)}, eps=1e-5) <= 1e-6

    def test_moving_sum_values(self):
        v = Tensor([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(nm.moving_sum(v, 1, 0).data, [1.0, 3.0, 5.0, 7.0])
        np.testing.assert_array_equal(nm.moving_sum(v, 0, 1).data, [3.0, 5.0, 7.0, 4.0])

    def test_maxpool_time_partial_window(self):
        x = Tensor(np.arange(10.0).reshape(5, 2))
        out = nm.maxpool_time(x, 2)
        assert out.shape == (3, 2)
        np.testing.assert_array_equal(out.data[-1], [8.0, 9.0])
