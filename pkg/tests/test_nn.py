import math

import numpy as np
import pytest

from dib.nn import (AdamConfig, Mlp, ParamBank, ShapeError, adam_step,
                    affine_backward, affine_forward, init_params, relu,
                    relu_backward, softmax_xent)

from conftest import fd_grad, rel_err


class TestAffine:
    def test_identity(self):
        out = affine_forward(np.array([[1.0, 2.0]]), np.eye(2), np.zeros((1, 2)))
        assert np.array_equal(out, [[1.0, 2.0]])

    def test_zero_input_passes_bias(self):
        out = affine_forward(np.zeros((1, 2)), np.ones((2, 2)), np.array([[3.0, 4.0]]))
        assert np.array_equal(out, [[3.0, 4.0]])

    def test_hand_matmul(self):
        out = affine_forward(np.array([[1.0, 1.0]]),
                             np.array([[1.0, 2.0], [3.0, 4.0]]),
                             np.zeros((1, 2)))
        assert np.array_equal(out, [[4.0, 6.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            affine_forward(np.ones((2, 3)), np.ones((2, 3)), np.zeros((1, 3)))
        with pytest.raises(ShapeError):
            affine_forward(np.ones((2, 3)), np.ones((3, 4)), np.zeros((1, 3)))

    def test_backward_zero_upstream(self, rng):
        x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        dx, dw, db = affine_backward(x, w, np.zeros((3, 2)))
        assert not dx.any() and not dw.any() and not db.any()

    def test_backward_scalar_chain(self):
        dx, dw, db = affine_backward(np.array([[1.0]]), np.array([[1.0]]),
                                     np.array([[2.0]]))
        assert dx == [[2.0]] and dw == [[2.0]] and db == [[2.0]]

    def test_backward_finite_differences(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))
        b = rng.standard_normal((1, 2))
        up = rng.standard_normal((3, 2))
        loss = lambda: float((affine_forward(x, w, b) * up).sum())
        dx, dw, db = affine_backward(x, w, up)
        assert rel_err(dx, fd_grad(loss, x)) < 1e-6
        assert rel_err(dw, fd_grad(loss, w)) < 1e-6
        assert rel_err(db, fd_grad(loss, b)) < 1e-6


class TestRelu:
    def test_basic(self):
        assert np.array_equal(relu(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])

    def test_all_negative(self):
        x = -np.ones((2, 3))
        assert not relu(x).any()
        assert not relu_backward(x, np.ones((2, 3))).any()

    def test_finite_differences_away_from_kink(self, rng):
        x = rng.standard_normal((4, 5))
        x[np.abs(x) < 0.05] += 0.1  # keep clear of the nondifferentiable point
        up = rng.standard_normal((4, 5))
        loss = lambda: float((relu(x) * up).sum())
        assert rel_err(relu_backward(x, up), fd_grad(loss, x)) < 1e-6

    def test_gradient_at_zero_is_zero(self):
        x = np.zeros((1, 2))
        assert not relu_backward(x, np.ones((1, 2))).any()


class TestSoftmaxXent:
    def test_uniform_two_classes(self):
        loss, probs, _ = softmax_xent(np.zeros((1, 2)), [0])
        assert np.allclose(probs, 0.5)
        assert abs(loss - math.log(2)) < 1e-12

    def test_extreme_logits_stable(self):
        loss, probs, dlogits = softmax_xent(np.array([[1000.0, -1000.0]]), [0])
        assert abs(loss) < 1e-12
        assert np.isfinite(dlogits).all()
        # and the other way: a huge loss stays finite too
        loss, _, _ = softmax_xent(np.array([[-1000.0, 1000.0]]), [0])
        assert np.isfinite(loss) and loss > 100

    def test_rows_sum_to_one(self, rng):
        logits = 10 * rng.standard_normal((8, 5))
        _, probs, _ = softmax_xent(logits, rng.integers(0, 5, 8))
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9

    def test_loss_nonnegative(self, rng):
        for _ in range(20):
            logits = 5 * rng.standard_normal((4, 3))
            loss, _, _ = softmax_xent(logits, rng.integers(0, 3, 4))
            assert loss >= 0.0

    def test_dlogits_finite_differences(self, rng):
        logits = rng.standard_normal((4, 3))
        labels = rng.integers(0, 3, 4)
        _, _, dlogits = softmax_xent(logits, labels)
        fd = fd_grad(lambda: softmax_xent(logits, labels)[0], logits)
        assert rel_err(dlogits, fd) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_xent(np.zeros((1, 3)), [3])
        with pytest.raises(ValueError):
            softmax_xent(np.zeros((1, 3)), [-1])


class TestAdam:
    def test_zero_grad_zero_moments_bitwise_unchanged(self, rng):
        bank = ParamBank()
        v = rng.standard_normal((3, 3))
        bank.add("w", v.copy())
        adam_step(bank)
        assert np.array_equal(bank["w"].value, v)

    def test_first_step_magnitude(self):
        bank = ParamBank()
        bank.add("w", np.array([[1.0]]))
        bank["w"].grad[:] = 1.0
        adam_step(bank)
        # bias-corrected first step is ~learning_rate
        assert abs((1.0 - bank["w"].value[0, 0]) - 0.001) < 1e-9

    def test_identical_params_identical_updates(self, rng):
        bank = ParamBank()
        v = rng.standard_normal((2, 2))
        g = rng.standard_normal((2, 2))
        for name in ("a", "b"):
            bank.add(name, v.copy())
            bank[name].grad[:] = g
        adam_step(bank)
        assert np.array_equal(bank["a"].value, bank["b"].value)

    def test_grads_left_intact_and_zeroing(self):
        bank = ParamBank()
        bank.add("w", np.ones((1, 2)))
        bank["w"].grad[:] = 3.0
        adam_step(bank)
        assert np.array_equal(bank["w"].grad, [[3.0, 3.0]])
        bank.zero_grads()
        assert not bank["w"].grad.any()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AdamConfig(beta1=1.0)
        with pytest.raises(ValueError):
            AdamConfig(eps=0.0)


class TestInit:
    def test_bias_shape_zero(self, rng):
        assert not init_params((1, 7), rng).any()

    def test_deterministic(self):
        a = init_params((5, 4), np.random.default_rng(3))
        b = init_params((5, 4), np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_he_std(self):
        draws = init_params((1000, 100), np.random.default_rng(0))
        expect = math.sqrt(2.0 / 1000)
        assert abs(draws.std() - expect) / expect < 0.05


class TestBackwardProperty:
    def test_random_shapes_match_finite_differences(self):
        # the blanket gradient contract: every backward matches central
        # differences on randomized shapes up to 8x16
        rng = np.random.default_rng(99)
        for _ in range(30):
            b = int(rng.integers(1, 9))
            i = int(rng.integers(1, 17))
            o = int(rng.integers(1, 17))
            x = rng.standard_normal((b, i))
            w = rng.standard_normal((i, o))
            bias = rng.standard_normal((1, o))
            up = rng.standard_normal((b, o))
            dx, dw, db = affine_backward(x, w, up)
            loss = lambda: float((affine_forward(x, w, bias) * up).sum())
            assert rel_err(dx, fd_grad(loss, x)) < 1e-5
            assert rel_err(dw, fd_grad(loss, w)) < 1e-5
            assert rel_err(db, fd_grad(loss, bias)) < 1e-5


class TestMlp:
    def test_forward_matches_manual_composition(self, rng):
        net = Mlp([3, 4, 2], rng)
        x = rng.standard_normal((5, 3))
        h = relu(affine_forward(x, net.bank["w0"].value, net.bank["b0"].value))
        expect = affine_forward(h, net.bank["w1"].value, net.bank["b1"].value)
        out, _ = net.forward(x)
        assert np.array_equal(out, expect)

    def test_final_relu_flag(self, rng):
        net = Mlp([3, 2], rng, final_relu=True)
        out, _ = net.forward(rng.standard_normal((20, 3)))
        assert out.min() >= 0.0

    def test_backward_finite_differences(self, rng):
        net = Mlp([4, 5, 3], rng)
        x = rng.standard_normal((6, 4))
        labels = rng.integers(0, 3, 6)

        def loss():
            out, _ = net.forward(x)
            return softmax_xent(out, labels)[0]

        out, cache = net.forward(x)
        _, _, dlogits = softmax_xent(out, labels)
        net.backward(cache, dlogits)
        for name, p in net.bank.items():
            assert rel_err(p.grad, fd_grad(loss, p.value)) < 1e-5, name

    def test_backward_accumulates(self, rng):
        net = Mlp([2, 2], rng)
        x = rng.standard_normal((3, 2))
        out, cache = net.forward(x)
        up = rng.standard_normal(out.shape)
        net.backward(cache, up)
        once = net.bank["w0"].grad.copy()
        net.backward(cache, up)
        assert np.allclose(net.bank["w0"].grad, 2 * once)

    def test_grad_sink_leaves_bank_clean(self, rng):
        net = Mlp([2, 3], rng)
        x = rng.standard_normal((3, 2))
        out, cache = net.forward(x)
        sink = {}
        net.backward(cache, np.ones_like(out), grads=sink)
        assert not net.bank["w0"].grad.any()
        assert sink["w0"].shape == (2, 3)
