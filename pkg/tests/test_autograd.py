"""Tape mechanics, sign estimators and gradient checking."""

import numpy as np
import pytest

from sdbnn import autograd as ag
from sdbnn import models as M
from sdbnn.autograd import Parameter, SteKind, Tape, TapeStateError, Var
from sdbnn.tensor import ConvGeometry


class TestSignSte:
    def test_forward_sign_of_zero_is_positive(self):
        x = Var(np.array([-0.3, 0.0, 2.1]))
        out = ag.sign_ste(x, SteKind.ClipSte)
        np.testing.assert_array_equal(out.data, [-1.0, 1.0, 1.0])

    def test_forward_values_are_pm1_and_counted(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(1000)
        out = ag.sign_ste(Var(x), SteKind.ClipSte)
        assert set(np.unique(out.data)) <= {-1.0, 1.0}
        assert (out.data == 1.0).sum() == (x >= 0).sum()

    def test_clip_ste_backward(self):
        x = Parameter(np.array([-2.0, 0.5, 2.0]), "x")
        with Tape() as tape:
            loss = ag.sum_all(ag.sign_ste(x, SteKind.ClipSte))
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_approx_sign_backward_value(self):
        x = Parameter(np.array([0.5]), "x")
        with Tape() as tape:
            loss = ag.sum_all(ag.sign_ste(x, SteKind.ApproxSign))
            tape.backward(loss)
        assert x.grad[0] == pytest.approx(1.0)  # 2 - 2*0.5

    def test_clip_dead_zone_masks_gradient(self):
        rng = np.random.default_rng(1)
        data = rng.uniform(-3, 3, 200)
        x = Parameter(data.copy(), "x")
        with Tape() as tape:
            loss = ag.sum_all(ag.sign_ste(x, SteKind.ClipSte))
            tape.backward(loss)
        assert np.all(x.grad[np.abs(data) > 1] == 0.0)
        assert np.all(x.grad[np.abs(data) <= 1] == 1.0)

    def test_smooth_forward_is_antiderivative(self):
        # derivative of the smooth forward equals the estimator, by FD
        for kind in (SteKind.ClipSte, SteKind.ApproxSign):
            xs = np.array([-1.7, -0.6, -0.2, 0.3, 0.8, 1.4])
            eps = 1e-7
            num = (ag.ste_smooth_forward(xs + eps, kind)
                   - ag.ste_smooth_forward(xs - eps, kind)) / (2 * eps)
            np.testing.assert_allclose(num, ag.ste_grad(xs, kind), atol=1e-6)


class TestShiftChain:
    def test_beta_gradient_inside_clip_region(self):
        # L = sum(sign(x + beta)), x = 0.2 -> dL/dbeta = 1
        beta = Parameter(np.array([0.0]), "beta")
        x = Var(np.array([0.2]))
        with Tape() as tape:
            loss = ag.sum_all(ag.sign_ste(ag.add(x, beta), SteKind.ClipSte))
            tape.backward(loss)
        np.testing.assert_array_equal(beta.grad, [1.0])

    def test_beta_gradient_outside_clip_region(self):
        beta = Parameter(np.array([0.0]), "beta")
        x = Var(np.array([5.0]))
        with Tape() as tape:
            loss = ag.sum_all(ag.sign_ste(ag.add(x, beta), SteKind.ClipSte))
            tape.backward(loss)
        np.testing.assert_array_equal(beta.grad, [0.0])


class TestTape:
    def test_backward_before_forward_raises(self):
        x = Parameter(np.array([1.0]), "x")
        with Tape():
            loss = ag.sum_all(x)
        with Tape() as other:
            with pytest.raises(TapeStateError):
                other.backward(loss)

    def test_untaped_value_raises(self):
        loss = ag.sum_all(Var(np.array([1.0])))
        with Tape() as tape:
            with pytest.raises(TapeStateError):
                tape.backward(loss)

    def test_no_nesting(self):
        with Tape():
            with pytest.raises(TapeStateError):
                with Tape():
                    pass

    def _accumulation_grads(self, data):
        xa = Parameter(data.copy(), "xa")
        with Tape() as tape:
            l1 = ag.sum_all(ag.mul(xa, xa))
            l2 = ag.sum_all(ag.mul_const(xa, 3.0))
            tape.backward(l1)
            tape.backward(l2)
        xb = Parameter(data.copy(), "xb")
        with Tape() as tape:
            both = ag.add(ag.sum_all(ag.mul(xb, xb)), ag.sum_all(ag.mul_const(xb, 3.0)))
            tape.backward(both)
        return xa.grad, xb.grad

    def test_gradient_accumulation_exact_on_dyadic_values(self):
        # values whose sums cannot round: accumulation order is immaterial
        split, combined = self._accumulation_grads(np.array([1.0, -2.0, 0.5, 4.0, -0.25]))
        np.testing.assert_array_equal(split, combined)

    def test_gradient_accumulation_random_values(self):
        split, combined = self._accumulation_grads(
            np.random.default_rng(2).standard_normal(5))
        # accumulation order between branches may differ by rounding only
        np.testing.assert_allclose(split, combined, rtol=1e-15)

    def test_inference_mode_records_nothing(self):
        x = Parameter(np.array([2.0]), "x")
        out = ag.mul(x, x)
        assert out._tape is None and out._back is None


def _fd_check_scalar_fn(make_loss, param: Parameter, coords, eps=1e-6, tol=1e-6):
    param.zero_grad()
    with Tape() as tape:
        loss = make_loss()
        tape.backward(loss)
    analytic = param.grad.reshape(-1)[coords]
    numeric = ag.fd_gradient(lambda: float(make_loss().data), param.data, coords, eps)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
    assert rel.max() < tol, f"rel err {rel.max():.2e}"


class TestOpGradients:
    """Each op's backward against central differences, float64 smooth paths."""

    def test_linear(self):
        rng = np.random.default_rng(3)
        x = Var(rng.standard_normal((4, 6)))
        w = Parameter(rng.standard_normal((3, 6)), "w")
        b = Parameter(rng.standard_normal(3), "b")
        y = np.array([0, 2, 1, 0])
        for p in (w, b):
            _fd_check_scalar_fn(
                lambda: ag.softmax_cross_entropy(ag.linear(x, w, b), y),
                p, coords=list(range(p.data.size))[:6])

    def test_conv2d(self):
        rng = np.random.default_rng(4)
        x = Parameter(rng.standard_normal((2, 3, 6, 6)), "x")
        w = Parameter(rng.standard_normal((4, 3, 3, 3)), "w")
        geom = ConvGeometry(3, 4, 3, stride=2, padding=1)
        for p in (x, w):
            _fd_check_scalar_fn(
                lambda: ag.sum_all(ag.tanh(ag.conv2d(x, w, geom))),
                p, coords=[0, 7, 19, 31])

    def test_batchnorm_train(self):
        rng = np.random.default_rng(5)
        x = Parameter(rng.standard_normal((4, 3, 5, 5)), "x")
        gamma = Parameter(rng.uniform(0.5, 1.5, 3), "g")
        beta = Parameter(rng.standard_normal(3), "be")
        y = np.array([0, 1, 2, 0])

        def loss():
            st = ag.BatchNormState(3, dtype=np.float64)  # fresh stats: no side effects
            h = ag.batchnorm2d(x, gamma, beta, st, training=True)
            return ag.softmax_cross_entropy(ag.global_avg_pool(h), y)

        for p in (x, gamma, beta):
            _fd_check_scalar_fn(loss, p, coords=[0, 1, 2], tol=1e-5)

    def test_elementwise_chain(self):
        rng = np.random.default_rng(6)
        x = Parameter(rng.standard_normal(20), "x")

        def loss():
            return ag.sum_all(ag.mul(ag.sigmoid(x), ag.tanh(ag.mul_const(x, 0.5))))

        _fd_check_scalar_fn(loss, x, coords=list(range(8)))

    def test_pool_and_reshape(self):
        rng = np.random.default_rng(7)
        x = Parameter(rng.standard_normal((2, 2, 4, 4)), "x")

        def loss():
            h = ag.avg_pool2d(x, 2)
            return ag.sum_all(ag.mul(ag.reshape(h, (2, -1)), ag.reshape(h, (2, -1))))

        _fd_check_scalar_fn(loss, x, coords=[0, 5, 9, 30])

    def test_mean_over_and_broadcast_add(self):
        rng = np.random.default_rng(8)
        w = Parameter(rng.standard_normal((3, 2, 2, 2)), "w")

        def loss():
            m = ag.mean_over(w, (1, 2, 3))
            shifted = ag.add(w, ag.reshape(m, (3, 1, 1, 1)))
            return ag.sum_all(ag.mul(shifted, shifted))

        _fd_check_scalar_fn(loss, w, coords=list(range(8)))


class TestFiniteDiffHarness:
    def test_pure_real_model_passes_tightly(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 2, 6, 6))
        labels = np.array([0, 1, 2])
        w = Parameter(rng.standard_normal((3, 2, 3, 3)) * 0.5, "conv.w")
        fcw = Parameter(rng.standard_normal((4, 3)) * 0.5, "fc.w")
        geom = ConvGeometry(2, 3, 3, padding=1)

        def loss_fn():
            h = ag.tanh(ag.conv2d(ag.Var(x), w, geom))
            return ag.softmax_cross_entropy(ag.linear(ag.global_avg_pool(h), fcw), labels)

        report = ag.finite_diff_check(loss_fn, {"conv.w": w, "fc.w": fcw}, eps=1e-6)
        assert report.passed(1e-6), report.per_param

    def test_corrupted_gradient_is_flagged(self):
        rng = np.random.default_rng(10)
        w = Parameter(rng.standard_normal(6), "w")

        def loss_fn():
            # deliberately wrong backward: forward is sum(w*w), gradient says 1
            out = Var(np.asarray((w.data * w.data).sum()))
            tape = ag.active_tape()
            if tape is not None:
                out._tape = tape
                out._back = lambda g, sink: sink(w, np.ones_like(w.data) * g)
                tape.nodes.append(out)
            return out

        report = ag.finite_diff_check(loss_fn, {"w": w}, eps=1e-6)
        assert not report.passed(1e-4)

    def test_smooth_mode_two_block_model(self):
        cfgseed = 0
        model = M.build(M.micro2(), seed=cfgseed, dtype=np.float64)
        rng = np.random.default_rng(11)
        images = rng.standard_normal((3, 2, 6, 6))
        labels = rng.integers(0, 4, 3)

        def loss_fn():
            logits = M.forward(model, images, mode="eval", path="surrogate", smooth=True)
            return ag.softmax_cross_entropy(logits, labels)

        report = ag.finite_diff_check(loss_fn, model.params, eps=1e-6, max_coords=4)
        assert report.passed(1e-4), report.per_param
