"""Tape forward rules, adjoints and error contracts."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bethe_bll import engine as E
from bethe_bll.engine import Tape


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8)


class TestForward:
    def test_tanh_of_zero(self):
        t = Tape()
        np.testing.assert_array_equal(E.tanh(t.const(np.zeros((2, 3)))).value, np.zeros((2, 3)))

    def test_identity_matmul(self, rng):
        A = rng.normal(size=(3, 4))
        t = Tape()
        np.testing.assert_array_equal(E.matmul(np.eye(3), t.const(A)).value, A)

    def test_pythagorean_sum(self):
        t = Tape()
        assert E.sum(E.square(t.const([[3.0, 4.0]]))).item() == 25.0

    def test_sum_axes(self):
        t = Tape()
        x = t.const([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(E.sum(x, axis=0).value, [[4.0, 6.0]])
        np.testing.assert_array_equal(E.sum(x, axis=1).value, [[3.0], [7.0]])

    def test_broadcast_row(self):
        t = Tape()
        np.testing.assert_array_equal(E.broadcast_row(t.const([[1.0, 2.0]]), 3).value, [[1.0, 2.0]] * 3)

    def test_softplus_large_input(self):
        t = Tape()
        np.testing.assert_allclose(E.softplus(t.const([[800.0, -800.0]])).value, [[800.0, 0.0]])

    def test_log_ndtr_deep_tail_finite(self):
        t = Tape()
        assert np.isfinite(E.log_ndtr(t.const([[-40.0]])).item())

    def test_operator_sugar(self):
        t = Tape()
        a = t.const([[1.0, 2.0]])
        b = t.const([[3.0, 5.0]])
        np.testing.assert_array_equal((a + b).value, [[4.0, 7.0]])
        np.testing.assert_array_equal((a - b).value, [[-2.0, -3.0]])
        np.testing.assert_array_equal((a * b).value, [[3.0, 10.0]])
        np.testing.assert_array_equal((2.0 * a).value, [[2.0, 4.0]])
        np.testing.assert_array_equal((-a).value, [[-1.0, -2.0]])
        np.testing.assert_array_equal((a @ b.T).value, [[13.0]])


class TestErrors:
    def test_matmul_shape_mismatch(self):
        t = Tape()
        with pytest.raises(E.ShapeError):
            E.matmul(t.const(np.ones((2, 3))), t.const(np.ones((2, 3))))

    def test_add_shape_mismatch(self):
        t = Tape()
        with pytest.raises(E.ShapeError):
            E.add(t.const(np.ones((2, 3))), t.const(np.ones((3, 2))))

    def test_log_of_nonpositive(self):
        t = Tape()
        with pytest.raises(E.DomainError):
            E.log(t.const([[1.0, 0.0]]))

    def test_overflow_is_an_error(self):
        t = Tape()
        with pytest.raises(E.NonFiniteError):
            E.exp(t.const([[1000.0]]))

    def test_non_scalar_root(self):
        t = Tape()
        w = t.param([[1.0, 2.0]])
        with pytest.raises(E.ContractError):
            t.backward(E.square(w))

    def test_foreign_root(self):
        t1, t2 = Tape(), Tape()
        w = t2.param([[1.0]])
        with pytest.raises(E.ContractError):
            t1.backward(E.sum(w))

    def test_mixing_tapes(self):
        t1, t2 = Tape(), Tape()
        with pytest.raises(E.ContractError):
            E.add(t1.const([[1.0]]), t2.const([[1.0]]))


class TestBackward:
    def test_squared_norm(self):
        t = Tape()
        w = t.param([[1.0, 2.0]])
        g = t.backward(E.sum(E.square(w)))
        np.testing.assert_array_equal(g[w.id], [[2.0, 4.0]])

    def test_bilinear(self):
        t = Tape()
        a = t.param([[1.0, 2.0]])
        b = t.param([[3.0], [5.0]])
        g = t.backward(E.matmul(a, b))
        np.testing.assert_array_equal(g[a.id], [[3.0, 5.0]])
        np.testing.assert_array_equal(g[b.id], [[1.0], [2.0]])

    def test_unused_parameter_gets_zero(self):
        t = Tape()
        w = t.param([[1.0]])
        u = t.param([[1.0, 2.0]])
        g = t.backward(E.sum(E.square(w)))
        np.testing.assert_array_equal(g[u.id], np.zeros((1, 2)))

    def test_repeated_backward_identical(self, rng):
        t = Tape()
        w = t.param(rng.normal(size=(3, 2)))
        root = E.sum(E.tanh(E.matmul(t.const(rng.normal(size=(4, 3))), w)))
        g1 = t.backward(root)[w.id]
        g2 = t.backward(root)[w.id]
        np.testing.assert_array_equal(g1, g2)

    def test_fan_out_accumulates(self):
        t = Tape()
        w = t.param([[3.0]])
        g = t.backward(E.hadamard(w, w) + w)
        np.testing.assert_allclose(g[w.id], [[7.0]])


# (kind, input builder, forward on a single free input x)
UNARY = {
    "tanh": (lambda r: r.normal(size=(3, 2)), E.tanh),
    "exp": (lambda r: r.normal(size=(3, 2)), E.exp),
    "log": (lambda r: r.uniform(0.2, 3.0, (3, 2)), E.log),
    "square": (lambda r: r.normal(size=(3, 2)), E.square),
    "sum": (lambda r: r.normal(size=(3, 2)), lambda x: E.sum(x, axis=1)),
    "sum0": (lambda r: r.normal(size=(3, 2)), lambda x: E.sum(x, axis=0)),
    "broadcast_row": (lambda r: r.normal(size=(1, 3)), lambda x: E.broadcast_row(x, 4)),
    "transpose": (lambda r: r.normal(size=(3, 2)), E.transpose),
    "log_ndtr": (lambda r: r.normal(0, 4, (3, 2)), E.log_ndtr),
    "softplus": (lambda r: r.normal(0, 3, (3, 2)), E.softplus),
    "scale": (lambda r: r.normal(size=(3, 2)), lambda x: E.scale(x, -1.7)),
    "logdet_spd": (lambda r: r.normal(size=(3, 3)), lambda x: E.logdet_spd(E.matmul(x, E.transpose(x)) + np.eye(3))),
}


class TestAdjointsAgainstFiniteDifferences:
    @pytest.mark.parametrize("kind", sorted(UNARY))
    def test_unary(self, kind):
        rng = np.random.default_rng(sorted(UNARY).index(kind))
        make, op = UNARY[kind]
        for _ in range(20):
            x0 = make(rng)
            R = rng.normal(size=op(Tape().const(x0)).shape)

            def f(x):
                t = Tape()
                return E.sum(E.hadamard(op(t.const(x)), R)).item()

            t = Tape()
            x = t.param(x0)
            g = t.backward(E.sum(E.hadamard(op(x), R)))[x.id]
            assert rel_err(g, fd_grad(f, x0)) <= 1e-4

    @pytest.mark.parametrize("kind", ["matmul", "add", "sub", "hadamard"])
    def test_binary(self, kind):
        rng = np.random.default_rng(7)
        op = getattr(E, kind)
        for _ in range(20):
            a0 = rng.normal(size=(3, 2))
            b0 = rng.normal(size=(2, 4) if kind == "matmul" else (3, 2))
            probe = Tape()
            R = rng.normal(size=op(probe.const(a0), probe.const(b0)).shape)
            t = Tape()
            a, b = t.param(a0), t.param(b0)
            g = t.backward(E.sum(E.hadamard(op(a, b), R)))

            def fa(x):
                tt = Tape()
                return E.sum(E.hadamard(op(tt.const(x), tt.const(b0)), R)).item()

            def fb(x):
                tt = Tape()
                return E.sum(E.hadamard(op(tt.const(a0), tt.const(x)), R)).item()

            assert rel_err(g[a.id], fd_grad(fa, a0)) <= 1e-4
            assert rel_err(g[b.id], fd_grad(fb, b0)) <= 1e-4

    def test_inv_quad(self):
        rng = np.random.default_rng(3)

        def build(A, m):
            return E.inv_quad(E.matmul(A, E.transpose(A)) + np.eye(3), m)

        def val(Ax, mx):
            tt = Tape()
            return build(tt.const(Ax), tt.const(mx)).item()

        for _ in range(20):
            A0 = rng.normal(size=(3, 3))
            m0 = rng.normal(size=(3, 1))
            t = Tape()
            A, m = t.param(A0), t.param(m0)
            g = t.backward(build(A, m))
            assert rel_err(g[A.id], fd_grad(lambda x: val(x, m0), A0)) <= 1e-4
            assert rel_err(g[m.id], fd_grad(lambda x: val(A0, x), m0)) <= 1e-4

    def test_ndtr_interval_log(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            b0 = rng.normal(0, 3, (5, 1))
            a0 = b0 + rng.uniform(0.05, 3.0, (5, 1))
            up = np.array([[False], [True], [False], [False], [False]])
            lo = np.array([[False], [False], [True], [False], [False]])

            def val(a, b):
                tt = Tape()
                return E.sum(E.ndtr_interval_log(tt.const(a), tt.const(b), up, lo)).item()

            t = Tape()
            a, b = t.param(a0), t.param(b0)
            g = t.backward(E.sum(E.ndtr_interval_log(a, b, up, lo)))
            assert rel_err(g[a.id], fd_grad(lambda x: val(x, b0), a0)) <= 1e-4
            assert rel_err(g[b.id], fd_grad(lambda x: val(a0, x), b0)) <= 1e-4

    def test_composite(self, rng):
        X = rng.normal(size=(6, 3))
        W0 = rng.normal(size=(3, 4))
        v0 = rng.normal(size=(4, 1))

        def build(t, W, v):
            h = E.tanh(E.matmul(t.lift(X), W))
            return E.sum(E.log_ndtr(E.matmul(h, v))) + E.sum(E.softplus(W))

        t = Tape()
        W, v = t.param(W0), t.param(v0)
        g = t.backward(build(t, W, v))

        def val(Wx, vx):
            tt = Tape()
            return build(tt, tt.const(Wx), tt.const(vx)).item()

        assert rel_err(g[W.id], fd_grad(lambda x: val(x, v0), W0)) <= 1e-4
        assert rel_err(g[v.id], fd_grad(lambda x: val(W0, x), v0)) <= 1e-4


class TestProperties:
    @given(
        a=st.floats(-5, 5), b=st.floats(-5, 5),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_backward_is_linear(self, a, b, seed):
        r = np.random.default_rng(seed)
        x0 = r.normal(size=(3, 2))

        def f(x):
            return E.sum(E.tanh(x))

        def g(x):
            return E.sum(E.square(E.exp(E.scale(x, 0.3))))

        t = Tape()
        x = t.param(x0)
        combo = t.backward(E.scale(f(x), a) + E.scale(g(x), b))[x.id]
        t1 = Tape()
        x1 = t1.param(x0)
        gf = t1.backward(f(x1))[x1.id]
        t2 = Tape()
        x2 = t2.param(x0)
        gg = t2.backward(g(x2))[x2.id]
        np.testing.assert_allclose(combo, a * gf + b * gg, atol=1e-10, rtol=1e-10)

    @given(x=st.floats(-30, 30))
    def test_mills_matches_direct_ratio(self, x):
        from scipy import special

        direct = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi) / special.ndtr(x)
        np.testing.assert_allclose(E.mills(x), direct, rtol=1e-10)

    def test_topological_order(self, rng):
        t = Tape()
        w = t.param(rng.normal(size=(2, 2)))
        E.sum(E.tanh(E.matmul(w, w)) + w)
        for node in t.nodes:
            assert all(i < node.id for i in node.inputs)
