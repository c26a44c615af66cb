"""Tensor core: forward values, tape gradients vs finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankgen import tensor as T
from helpers import check_gradients, finite_difference, rel_err


def leaf(rng, *shape):
    return T.Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=True)


class TestForwardValues:
    def test_matmul_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_matmul_zero(self):
        a = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = T.Tensor([[0.0], [0.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[0.0], [0.0]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))

    def test_tanh_zero(self):
        assert T.tanh(T.Tensor(0.0)).item() == 0.0

    def test_sigmoid_zero(self):
        assert T.sigmoid(T.Tensor(0.0)).item() == 0.5

    def test_sigmoid_extreme_inputs_stay_finite(self):
        y = T.sigmoid(T.Tensor([-1000.0, 1000.0]))
        assert y.is_finite()
        np.testing.assert_allclose(y.data, [0.0, 1.0], atol=1e-12)

    def test_log_domain_error(self):
        with pytest.raises(T.DomainError):
            T.log(T.Tensor([1.0, 0.0]))

    def test_sqrt_domain_error(self):
        with pytest.raises(T.DomainError):
            T.sqrt(T.Tensor(-1.0))

    def test_mixed_shape_rejected(self):
        with pytest.raises(T.ShapeError):
            T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(3)))

    def test_scalar_broadcast(self):
        y = T.mul(T.Tensor([[1.0, 2.0]]), T.Tensor(3.0))
        np.testing.assert_array_equal(y.data, [[3.0, 6.0]])

    def test_validity_check_flags_nan(self):
        assert not T.Tensor([np.nan, 1.0]).is_finite()
        assert T.Tensor([0.0, 1.0]).is_finite()


class TestSoftmax:
    def test_two_zeros(self):
        np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_constant_vector_uniform(self):
        for c in (-7.0, 0.0, 123.0):
            np.testing.assert_allclose(
                T.softmax(T.Tensor([c, c, c])).data, [1 / 3] * 3, atol=1e-15)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
           st.floats(-50, 50))
    @settings(max_examples=60, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, vals, shift):
        """Softmax output sums to 1 within 1e-12 and ignores constant shifts."""
        v = np.array(vals)
        y = T.softmax(T.Tensor(v)).data
        assert abs(y.sum() - 1.0) <= 1e-12
        y2 = T.softmax(T.Tensor(v + shift)).data
        np.testing.assert_allclose(y, y2, atol=1e-12)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = T.Tensor(rng.normal(size=5), requires_grad=True)
        analytic = np.zeros((5, 5))
        for i in range(5):
            with T.Tape() as tape:
                yi = T.pick(T.softmax(x), i)
            analytic[i] = tape.backward(yi, wrt=[x])[x]
        numeric = np.zeros((5, 5))
        for i in range(5):
            numeric[i] = finite_difference(
                lambda i=i: T.softmax(x).data[i], [x])[0]
        assert rel_err(analytic, numeric) < 1e-6

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(8)
        v = rng.normal(size=7) * 10
        np.testing.assert_allclose(
            T.log_softmax(T.Tensor(v)).data,
            np.log(T.softmax(T.Tensor(v)).data), atol=1e-12)


class TestConvMaxpool:
    def test_width_one_identity_filter_takes_max(self):
        seq = T.Tensor([[1.0], [3.0], [2.0]])
        bank = T.Tensor([[[1.0]]])  # one filter, width 1, dim 1
        out = T.conv1d_maxpool(seq, [bank], nonlinearity="relu")
        assert out.item() == 3.0

    def test_zero_filters_zero_output(self):
        rng = np.random.default_rng(0)
        seq = T.Tensor(rng.normal(size=(6, 3)))
        banks = [T.Tensor(np.zeros((4, 2, 3))), T.Tensor(np.zeros((2, 3, 3)))]
        out = T.conv1d_maxpool(seq, banks, nonlinearity="identity")
        np.testing.assert_array_equal(out.data, np.zeros(6))

    def test_sequence_shorter_than_filter(self):
        with pytest.raises(T.ShapeError):
            T.conv1d_maxpool(T.Tensor(np.ones((2, 3))),
                             [T.Tensor(np.ones((1, 4, 3)))])

    def test_gradient_routes_only_to_argmax(self):
        seq = T.Tensor([[1.0], [5.0], [2.0]], requires_grad=True)
        bank = T.Tensor([[[1.0]]], requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(T.conv1d_maxpool(seq, [bank], nonlinearity="identity"))
        g = tape.backward(loss, wrt=[seq])[seq]
        np.testing.assert_array_equal(g, [[0.0], [1.0], [0.0]])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        seq = leaf(rng, 7, 3)
        banks = [leaf(rng, 4, 2, 3), leaf(rng, 3, 3, 3)]
        wts = rng.normal(size=7)

        def build():
            return T.dot(T.conv1d_maxpool(seq, banks), T.Tensor(wts))

        check_gradients(build, [seq] + banks, tol=1e-5)


class TestBackward:
    def test_identity_loss(self):
        x = T.Tensor(2.5, requires_grad=True)
        with T.Tape() as tape:
            pass
        assert tape.backward(x, wrt=[x])[x] == 1.0

    def test_sum_of_product(self):
        rng = np.random.default_rng(3)
        x = leaf(rng, 4)
        y = leaf(rng, 4)
        with T.Tape() as tape:
            loss = T.dot(x, y)
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[x], y.data)
        np.testing.assert_allclose(grads[y], x.data)

    def test_untouched_tensor_gets_exact_zero(self):
        rng = np.random.default_rng(4)
        x = leaf(rng, 3)
        unused = leaf(rng, 5)
        with T.Tape() as tape:
            loss = T.tsum(T.tanh(x))
        g = tape.backward(loss, wrt=[x, unused])[unused]
        assert g.shape == (5,)
        assert np.all(g == 0.0)

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            y = T.tanh(x)
        with pytest.raises(T.GraphError):
            tape.backward(y)

    def test_off_tape_loss_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            pass
        with pytest.raises(T.GraphError):
            tape.backward(T.tsum(T.tanh(x)))

    def test_reused_operand_accumulates(self):
        x = T.Tensor(3.0, requires_grad=True)
        with T.Tape() as tape:
            loss = T.mul(x, x)
        assert tape.backward(loss, wrt=[x])[x] == pytest.approx(6.0)

    def test_no_tape_means_no_recording(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        y = T.tanh(x)
        assert not y.requires_grad

    def test_lstm_step_loss_four_unit_cell(self):
        """Composed gate arithmetic against finite differences."""
        rng = np.random.default_rng(12)
        d_e, d_h = 3, 4
        w_x = leaf(rng, d_e, 4 * d_h)
        w_h = leaf(rng, d_h, 4 * d_h)
        b = leaf(rng, 4 * d_h)
        x = leaf(rng, 1, d_e)
        h0 = leaf(rng, 1, d_h)
        c0 = leaf(rng, 1, d_h)
        wts = rng.normal(size=(1, d_h))

        def build():
            gates = T.add_bias(T.add(T.matmul(x, w_x), T.matmul(h0, w_h)), b)
            i = T.sigmoid(T.narrow(gates, 1, 0, d_h))
            f = T.sigmoid(T.narrow(gates, 1, d_h, d_h))
            o = T.sigmoid(T.narrow(gates, 1, 2 * d_h, d_h))
            g = T.tanh(T.narrow(gates, 1, 3 * d_h, d_h))
            c1 = T.add(T.mul(f, c0), T.mul(i, g))
            h1 = T.mul(o, T.tanh(c1))
            return T.dot(h1, T.Tensor(wts))

        check_gradients(build, [w_x, w_h, b, x, h0, c0], tol=1e-4)


def _fd_case(name):
    """Build (loss_fn, params) for one primitive's gradient check."""

    def make(rng):
        if name == "add":
            a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
            return lambda: T.tsum(T.add(a, b)), [a, b]
        if name == "add_scalar":
            a, s = leaf(rng, 3, 4), leaf(rng)
            return lambda: T.tsum(T.add(a, s)), [a, s]
        if name == "sub":
            a, b = leaf(rng, 5), leaf(rng, 5)
            return lambda: T.tsum(T.sub(a, b)), [a, b]
        if name == "mul":
            a, b = leaf(rng, 4, 2), leaf(rng, 4, 2)
            return lambda: T.tsum(T.mul(a, b)), [a, b]
        if name == "mul_scalar":
            a, s = leaf(rng, 6), leaf(rng)
            return lambda: T.tsum(T.mul(a, s)), [a, s]
        if name == "div":
            a = leaf(rng, 3, 3)
            b = T.Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
            return lambda: T.tsum(T.div(a, b)), [a, b]
        if name == "neg":
            a = leaf(rng, 7)
            return lambda: T.tsum(T.neg(a)), [a]
        if name == "tanh":
            a = leaf(rng, 3, 4)
            return lambda: T.tsum(T.tanh(a)), [a]
        if name == "sigmoid":
            a = leaf(rng, 3, 4)
            return lambda: T.tsum(T.sigmoid(a)), [a]
        if name == "exp":
            a = leaf(rng, 4)
            return lambda: T.tsum(T.exp(a)), [a]
        if name == "log":
            a = T.Tensor(rng.uniform(0.2, 3.0, (4,)), requires_grad=True)
            return lambda: T.tsum(T.log(a)), [a]
        if name == "relu":
            vals = rng.uniform(-1, 1, (3, 4))
            vals += np.sign(vals) * 1e-2  # keep clear of the kink
            a = T.Tensor(vals, requires_grad=True)
            return lambda: T.tsum(T.relu(a)), [a]
        if name == "sqrt":
            a = T.Tensor(rng.uniform(0.2, 3.0, (5,)), requires_grad=True)
            return lambda: T.tsum(T.sqrt(a)), [a]
        if name == "matmul":
            a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
            w = rng.normal(size=(3, 2))
            return lambda: T.tsum(T.mul(T.matmul(a, b), T.Tensor(w))), [a, b]
        if name == "add_bias":
            m, b = leaf(rng, 4, 3), leaf(rng, 3)
            w = rng.normal(size=(4, 3))
            return lambda: T.tsum(T.mul(T.add_bias(m, b), T.Tensor(w))), [m, b]
        if name == "sum":
            a = leaf(rng, 3, 4)
            return lambda: T.tsum(a), [a]
        if name == "mean":
            a = leaf(rng, 3, 4)
            return lambda: T.tmean(a), [a]
        if name == "softmax":
            a = leaf(rng, 2, 5)
            w = rng.normal(size=(2, 5))
            return lambda: T.tsum(T.mul(T.softmax(a), T.Tensor(w))), [a]
        if name == "log_softmax":
            a = leaf(rng, 2, 5)
            w = rng.normal(size=(2, 5))
            return lambda: T.tsum(T.mul(T.log_softmax(a), T.Tensor(w))), [a]
        if name == "gather_rows":
            m = leaf(rng, 6, 3)
            idx = rng.integers(0, 6, size=5)  # duplicates likely
            w = rng.normal(size=(5, 3))
            return lambda: T.tsum(T.mul(T.gather_rows(m, idx), T.Tensor(w))), [m]
        if name == "take_along_rows":
            m = leaf(rng, 4, 5)
            idx = rng.integers(0, 5, size=4)
            w = rng.normal(size=4)
            return lambda: T.dot(T.take_along_rows(m, idx), T.Tensor(w)), [m]
        if name == "pick":
            v = leaf(rng, 6)
            i = int(rng.integers(0, 6))
            return lambda: T.pick(v, i), [v]
        if name == "narrow":
            a = leaf(rng, 4, 6)
            w = rng.normal(size=(4, 3))
            return lambda: T.tsum(T.mul(T.narrow(a, 1, 2, 3), T.Tensor(w))), [a]
        if name == "concat":
            a, b, c = leaf(rng, 3), leaf(rng, 2), leaf(rng, 4)
            w = rng.normal(size=9)
            return lambda: T.dot(T.concat([a, b, c]), T.Tensor(w)), [a, b, c]
        if name == "stack_scalars":
            xs = [leaf(rng) for _ in range(4)]
            w = rng.normal(size=4)
            return lambda: T.dot(T.stack_scalars(xs), T.Tensor(w)), xs
        if name == "conv1d_maxpool":
            seq = leaf(rng, 6, 2)
            banks = [leaf(rng, 3, 2, 2), leaf(rng, 2, 3, 2)]
            w = rng.normal(size=5)
            return lambda: T.dot(T.conv1d_maxpool(seq, banks), T.Tensor(w)), \
                [seq] + banks
        raise AssertionError(name)

    return make


FD_OPS = ["add", "add_scalar", "sub", "mul", "mul_scalar", "div", "neg",
          "tanh", "sigmoid", "exp", "log", "relu", "sqrt", "matmul",
          "add_bias", "sum", "mean", "softmax", "log_softmax", "gather_rows",
          "take_along_rows", "pick", "narrow", "concat", "stack_scalars",
          "conv1d_maxpool"]

FD_TOL = {"matmul": 1e-6, "tanh": 1e-6, "softmax": 1e-6, "conv1d_maxpool": 1e-5}


class TestFiniteDifferenceSweep:
    """Every differentiable primitive, 20 random instances each."""

    @pytest.mark.parametrize("name", FD_OPS)
    def test_primitive(self, name):
        make = _fd_case(name)
        tol = FD_TOL.get(name, 1e-4)
        for instance in range(20):
            rng = np.random.default_rng(1000 + 97 * instance + hash(name) % 1000)
            build, params = make(rng)
            check_gradients(build, params, tol=tol)

    def test_matmul_spec_case(self):
        rng = np.random.default_rng(42)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        w = rng.normal(size=(3, 2))
        check_gradients(lambda: T.tsum(T.mul(T.matmul(a, b), T.Tensor(w))),
                        [a, b], tol=1e-6)

    def test_tanh_at_0p3(self):
        x = T.Tensor(0.3, requires_grad=True)
        check_gradients(lambda: T.tanh(x), [x], tol=1e-6)


class TestUpdateHelpers:
    def test_clip_rescales_to_limit(self):
        t = T.Tensor(np.zeros(2), requires_grad=True)
        grads = {t: np.array([3.0, 4.0])}
        clipped = T.clip_by_global_norm(grads, 2.5)
        np.testing.assert_allclose(clipped[t], [1.5, 2.0])
        assert T.global_norm(clipped.values()) == pytest.approx(2.5)

    def test_clip_leaves_small_gradients_alone(self):
        t = T.Tensor(np.zeros(2), requires_grad=True)
        grads = {t: np.array([0.3, 0.4])}
        assert T.clip_by_global_norm(grads, 5.0) is grads

    def test_sgd_step(self):
        t = T.Tensor([1.0, 2.0], requires_grad=True)
        T.sgd_step({t: np.array([0.5, -0.5])}, lr=0.1)
        np.testing.assert_allclose(t.data, [0.95, 2.05])


class TestThreadConfinement:
    def test_tapes_on_separate_threads_are_independent(self):
        import concurrent.futures

        x = T.Tensor(np.linspace(0.1, 1.0, 8), requires_grad=True)

        def job(seed):
            w = np.random.default_rng(seed).normal(size=8)
            with T.Tape() as tape:
                loss = T.dot(T.tanh(x), T.Tensor(w))
            g = tape.backward(loss, wrt=[x])[x]
            expected = w * (1.0 - np.tanh(x.data) ** 2)
            np.testing.assert_allclose(g, expected, atol=1e-12)
            return True

        with concurrent.futures.ThreadPoolExecutor(max_workers=4) as ex:
            assert all(ex.map(job, range(16)))
