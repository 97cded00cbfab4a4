import os

import numpy as np
import pytest

from oracles import rel_err
from phylotopo import autodiff as ad
from phylotopo.autodiff import ParameterStore, Tensor


def fd_check(build_loss, params, h=1e-5, tol=1e-4):
    """Backward gradients vs central differences for every given tensor."""
    for p in params:
        p.grad = None
    loss = build_loss()
    ad.backward(loss)
    for p in params:
        grad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fdf = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(build_loss().data)
            flat[i] = orig - h
            fm = float(build_loss().data)
            flat[i] = orig
            fdf[i] = (fp - fm) / (2 * h)
        assert rel_err(grad, fd, floor=1e-6) < tol


class TestElementwiseOps:
    @pytest.mark.parametrize("op", [ad.sigmoid, ad.tanh, ad.elu, ad.softplus,
                                    ad.exp, ad.square])
    def test_unary_fd(self, op):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        fd_check(lambda: ad.sum_all(ad.square(op(x))), [x])

    def test_log_fd(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        fd_check(lambda: ad.sum_all(ad.log(x)), [x])

    def test_maximum_fd(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        fd_check(lambda: ad.sum_all(ad.square(ad.maximum(a, b))), [a, b])

    def test_maximum_values(self):
        a = Tensor(np.array([[1.0, -2.0]]))
        b = Tensor(np.array([[0.0, 3.0]]))
        assert np.array_equal(ad.maximum(a, b).data, [[1.0, 3.0]])
        assert np.array_equal(ad.maximum(a, a).data, a.data)


class TestStructuralOps:
    def test_matmul_add_fd(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        x = Tensor(rng.standard_normal((5, 3)))
        fd_check(lambda: ad.sum_all(
            ad.square(ad.add(ad.matmul(x, Tensor(w.data.T)), b))), [b])
        fd_check(lambda: ad.sum_all(ad.square(ad.matmul(w, Tensor(x.data.T)))),
                 [w])

    def test_concat_split_fd(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 3)), requires_grad=True)

        def loss():
            parts = ad.split_cols(ad.concat([a, b], axis=1), [3, 2])
            return ad.sum_all(ad.square(parts[0]))

        fd_check(loss, [a, b])

    def test_gather_scatter_fd(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
        nbr = np.array([[1, 2, -1], [0, -1, -1], [3, 4, 5],
                        [2, -1, -1], [0, 1, 2], [5, -1, -1]])
        dst = np.array([0, 0, 1, 2, 2, 3])
        fd_check(lambda: ad.sum_all(ad.square(ad.gather_sum(x, nbr))), [x])
        fd_check(lambda: ad.sum_all(ad.square(ad.scatter_sum(x, dst, 4))), [x])
        fd_check(lambda: ad.sum_all(
            ad.square(ad.gather_rows(x, np.array([0, 0, 3, 5])))), [x])

    def test_sum_blocks_fd(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((6, 2)), requires_grad=True)
        fd_check(lambda: ad.sum_all(ad.square(ad.sum_blocks(x, 3))), [x])

    def test_gru_cell_fd(self):
        rng = np.random.default_rng(7)
        d = 3
        mi = Tensor(rng.standard_normal((4, 3 * d)), requires_grad=True)
        mh = Tensor(rng.standard_normal((4, 3 * d)), requires_grad=True)
        bi = Tensor(rng.standard_normal(3 * d), requires_grad=True)
        bh = Tensor(rng.standard_normal(3 * d), requires_grad=True)
        h = Tensor(rng.standard_normal((4, d)), requires_grad=True)
        fd_check(lambda: ad.sum_all(
            ad.square(ad.gru_cell(mi, mh, bi, bh, h))),
            [mi, mh, bi, bh, h])

    def test_broadcast_unbroadcast(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        loss = ad.sum_all(ad.mul(ad.add(x, b), ad.add(x, b)))
        ad.backward(loss)
        assert b.grad.shape == (3,)
        assert np.allclose(b.grad, (2 * (x.data + b.data)).sum(axis=0))


class TestTape:
    def test_linearity_of_backward(self):
        rng = np.random.default_rng(9)
        w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        x1 = Tensor(rng.standard_normal((4, 3)))
        x2 = Tensor(rng.standard_normal((4, 3)))

        def loss_of(x):
            return ad.sum_all(ad.square(ad.matmul(x, w)))

        ad.backward(loss_of(x1))
        g1 = w.grad.copy()
        w.grad = None
        ad.backward(loss_of(x2))
        g2 = w.grad.copy()
        w.grad = None
        ad.backward(ad.add(loss_of(x1), loss_of(x2)))
        assert np.allclose(w.grad, g1 + g2, atol=1e-12)

    def test_shared_subexpression(self):
        x = Tensor(np.array([[2.0]]), requires_grad=True)
        y = ad.square(x)          # x^2
        loss = ad.sum_all(ad.add(y, y))  # 2 x^2 -> d/dx = 4x
        ad.backward(loss)
        assert x.grad[0, 0] == pytest.approx(8.0)

    def test_untouched_parameters_stay_zero(self):
        store = ParameterStore()
        a = store.param("a", np.ones(3))
        store.param("b", np.ones(3))
        ad.backward(ad.sum_all(ad.square(a)))
        assert store.params["b"].grad is None
        assert np.array_equal(store.grad_or_zero("b"), np.zeros(3))

    def test_no_grad_disables_recording(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with ad.no_grad():
            y = ad.square(x)
        assert y._backward is None and y._parents == ()


class TestAdam:
    def test_zero_gradient_no_motion(self):
        store = ParameterStore()
        p = store.param("p", np.array([1.0, -2.0]))
        store.adam_step(lr=0.1)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        store = ParameterStore()
        p = store.param("p", np.zeros(3))
        p.grad = np.array([0.3, -5.0, 1e-3])
        store.adam_step(lr=0.05)
        # bias-corrected m/sqrt(v) = sign(g) up to eps effects
        assert np.allclose(p.data, [-0.05, 0.05, -0.05], atol=1e-5)
        assert p.grad is None  # cleared

    def test_minimizes_quadratic(self):
        store = ParameterStore()
        p = store.param("x", np.array([1.0]))
        for _ in range(500):
            p.grad = 2.0 * p.data
            store.adam_step(lr=0.05)
        assert abs(p.data[0]) < 1e-2

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        store = ParameterStore()
        store.param("w", rng.standard_normal((3, 2)))
        store.param("b", rng.standard_normal(4))
        prefix = os.path.join(tmp_path, "ckpt")
        store.save(prefix)
        other = ParameterStore()
        other.load(prefix)
        for name in store.params:
            assert np.array_equal(other.params[name].data,
                                  store.params[name].data)
