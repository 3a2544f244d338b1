import numpy as np
import pytest
from hypothesis import given, strategies as st

from fasgnn.autodiff import (PRIMITIVE_CASES, Tape, Tensor, backward, check_primitive, grad_check, ops)
from fasgnn.autodiff.tensor import unbroadcast


def cplx(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    for seed in (0, 1):
        rep = check_primitive(name, seed=seed, step=1e-4, tolerance=1e-5)
        assert rep.passed, (name, seed, rep.worst(3))


def test_unknown_primitive_rejected():
    with pytest.raises(KeyError):
        check_primitive("no_such_op")


class TestForwardValues:
    def test_arithmetic(self):
        assert ops.add(Tensor(1 + 2j), Tensor(3 - 1j)).data == 4 + 1j
        assert ops.mul(Tensor(1j), Tensor(1j)).data == -1
        a = Tensor(np.array([3 + 4j]))
        assert ops.mul(a, ops.conj(a)).data[0] == 25
        assert ops.re(Tensor(3 + 4j)).data == 3
        assert ops.reduce_mean(Tensor(np.array([2.0, 4.0]))).data == 3
        assert ops.reciprocal(Tensor(2.0)).data == 0.5

    def test_exp_i(self):
        np.testing.assert_allclose(ops.exp_i(Tensor(np.array([0.0, np.pi]))).data, [1, -1], atol=1e-15)

    def test_activations(self):
        np.testing.assert_array_equal(ops.leaky_relu(Tensor(np.array([2.0, -1.0]))).data, [2.0, -0.01])
        np.testing.assert_array_equal(ops.crelu(Tensor(np.array([1 - 2j, -1 - 1j]))).data, [1 + 0j, 0j])
        assert ops.sigmoid(Tensor(0.0)).data == 0.5
        x = np.linspace(-30, 30, 13)
        np.testing.assert_allclose(ops.sigmoid(Tensor(-x)).data, 1 - ops.sigmoid(Tensor(x)).data, atol=1e-15)
        np.testing.assert_allclose(ops.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])
        a = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(ops.softmax(Tensor(a + 7.0)).data, ops.softmax(Tensor(a)).data, atol=1e-15)

    def test_norm_and_shapes(self, rng):
        assert ops.l2_norm(Tensor(np.array([0.6, 0.8j]))).data == pytest.approx(1.0)
        before = ops.diagnostics["norm_floor"]
        assert ops.l2_norm(Tensor(np.zeros(3, complex))).data == ops.NORM_FLOOR
        assert ops.diagnostics["norm_floor"] == before + 1
        a = cplx(rng, 2, 3)
        np.testing.assert_array_equal(ops.hermitian(ops.hermitian(Tensor(a))).data, a)
        b = cplx(rng, 3, 4)
        ab = ops.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(ops.hermitian(Tensor(ab)).data, np.conj(b.T) @ np.conj(a.T), atol=1e-14)
        assert ops.concat([Tensor(a)]).data.shape == (2, 3)
        assert ops.concat([Tensor(a), Tensor(b.T)], axis=0).data.shape == (6, 3)
        x = cplx(rng, 1, 1)
        y = cplx(rng, 1, 1)
        assert ops.matmul(Tensor(x), Tensor(y)).data[0, 0] == ops.mul(Tensor(x), Tensor(y)).data[0, 0]

    @pytest.mark.parametrize("op", ["mul", "matmul", "exp_i"])
    def test_conjugation_symmetry(self, op, rng):
        if op == "exp_i":
            phi = rng.uniform(-3, 3, 5)
            np.testing.assert_allclose(ops.exp_i(Tensor(-phi)).data, np.conj(ops.exp_i(Tensor(phi)).data))
            return
        a, b = cplx(rng, 3, 3), cplx(rng, 3, 3)
        f = getattr(ops, op)
        np.testing.assert_allclose(f(Tensor(np.conj(a)), Tensor(np.conj(b))).data, np.conj(f(Tensor(a), Tensor(b)).data))

    def test_einsum_matches_numpy_and_validates(self, rng):
        a, b = cplx(rng, 2, 3, 4), cplx(rng, 5, 4, 6)
        np.testing.assert_allclose(ops.einsum("bkv,zvd->bkzd", Tensor(a), Tensor(b)).data,
                                   np.einsum("bkv,zvd->bkzd", a, b), atol=1e-12)
        with pytest.raises(ValueError):
            ops.einsum("ii,ij->j", Tensor(a[0, :3, :3]), Tensor(b[0, :3]))
        with pytest.raises(ValueError):
            ops.einsum("ab,cd->c", Tensor(a[0]), Tensor(b[0]))


class TestInverse:
    def test_identity_and_diagonal(self):
        np.testing.assert_allclose(ops.hermitian_pd_inverse(Tensor(np.eye(3, dtype=complex))).data, np.eye(3))
        np.testing.assert_allclose(ops.hermitian_pd_inverse(Tensor(np.diag([2.0, 4.0]) + 0j)).data,
                                   np.diag([0.5, 0.25]), atol=1e-15)

    def test_rejects_non_hermitian(self, rng):
        with pytest.raises(ValueError):
            ops.hermitian_pd_inverse(Tensor(cplx(rng, 3, 3)))

    @staticmethod
    def _with_condition(rng, k, cond):
        q, _ = np.linalg.qr(cplx(rng, k, k))
        ev = np.logspace(0, -np.log10(cond), k)
        a = (q * ev) @ np.conj(q.T)
        return (a + np.conj(a.T)) / 2

    @pytest.mark.parametrize("cond", [1e2, 1e4, 1e6])
    def test_residual_well_conditioned(self, rng, cond):
        for k in (2, 4, 8):
            a = self._with_condition(rng, k, cond)
            inv = ops.hermitian_pd_inverse(Tensor(a)).data
            assert np.max(np.abs(a @ inv - np.eye(k))) < 1e-10

    @pytest.mark.xfail(strict=True, reason="double-precision residual floor is about u*cond ~ 1e-8 at cond 1e8")
    def test_residual_condition_1e8(self, rng):
        worst = 0.0
        for _ in range(20):
            a = self._with_condition(rng, 4, 1e8)
            inv = ops.hermitian_pd_inverse(Tensor(a)).data
            worst = max(worst, np.max(np.abs(a @ inv - np.eye(4))))
        assert worst < 1e-10

    def test_ridge_on_singular(self):
        v = np.array([[1.0], [1.0j]])
        a = v @ np.conj(v.T)  # rank one
        before = ops.diagnostics["inverse_ridge"]
        inv, bad = ops.pd_inverse_array(a)
        assert bad.all() and np.all(np.isfinite(inv))
        assert ops.diagnostics["inverse_ridge"] == before + 1

    def test_batched(self, rng):
        b = cplx(rng, 10, 3, 5)
        a = b @ np.conj(np.swapaxes(b, -1, -2))
        inv = ops.hermitian_pd_inverse(Tensor(a)).data
        np.testing.assert_allclose(a @ inv, np.broadcast_to(np.eye(3), (10, 3, 3)), atol=1e-10)


class TestTape:
    def test_abs2_gradient_closed_form(self):
        z = Tensor(np.array(1.5 - 0.5j), requires_grad=True)
        with Tape() as tape:
            loss = ops.re(ops.mul(z, ops.conj(z)))
        g = backward(tape, loss)[z]
        assert g == pytest.approx(2 * 1.5 - 2j * 0.5)

    def test_untouched_leaf_zero(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(2, complex), requires_grad=True)
        with Tape() as tape:
            loss = ops.reduce_sum(a)
        g = backward(tape, loss)
        np.testing.assert_array_equal(g[b], np.zeros(2))
        np.testing.assert_array_equal(g[a], np.ones(3))

    def test_rejects_bad_losses(self):
        a = Tensor(np.ones(3, complex), requires_grad=True)
        with Tape() as tape:
            c = ops.reduce_sum(a)
            v = ops.re(a)
        with pytest.raises(ValueError):
            backward(tape, c)
        with pytest.raises(ValueError):
            backward(tape, v)

    def test_no_tape_no_record(self):
        a = Tensor(np.ones(2), requires_grad=True)
        out = ops.add(a, a)
        assert out.tape is None and not out.requires_grad

    def test_one_tape_at_a_time(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with Tape():
            b = ops.add(a, a)
        with Tape():
            with pytest.raises(RuntimeError):
                ops.add(b, a)

    def test_topological_order_and_replay(self, rng):
        w = Tensor(cplx(rng, 3, 3), requires_grad=True)
        x = Tensor(cplx(rng, 3))
        with Tape() as tape:
            y = ops.matmul(w, ops.reshape(x, (3, 1)))
            loss = ops.reduce_sum(ops.abs2(ops.crelu(y)))
        seen = {w.id}
        for rec in tape.records:
            for t in rec.inputs:
                assert not t.requires_grad or t.id in seen or t.tape is None
            seen.add(rec.output.id)
        g1 = backward(tape, loss)[w]
        g2 = backward(tape, loss)[w]
        assert g1.tobytes() == g2.tobytes()

    def test_gradients_accumulate_over_reuse(self):
        a = Tensor(np.array(2.0), requires_grad=True)
        with Tape() as tape:
            loss = ops.mul(a, ops.mul(a, a))
        assert backward(tape, loss)[a] == pytest.approx(12.0)


def test_unbroadcast():
    g = np.ones((4, 2, 3), complex)
    np.testing.assert_array_equal(unbroadcast(g, (2, 1), False), np.full((2, 1), 12.0))
    assert unbroadcast(np.ones(3), (3,), True).dtype == np.complex128


class TestGradCheck:
    def test_quadratic_form(self, rng):
        m = cplx(rng, 4, 4)
        q = Tensor(m @ np.conj(m.T))

        def f(x):
            xc = ops.reshape(x, (4, 1))
            return ops.re(ops.reduce_sum(ops.matmul(ops.hermitian(xc), ops.matmul(q, xc))))
        rep = grad_check(f, [Tensor(cplx(rng, 4))])
        assert rep.max_rel_err < 1e-8

    def test_exp_i_chain(self, rng):
        c = Tensor(cplx(rng, 5))

        def f(phi):
            return ops.reduce_sum(ops.re(ops.mul(ops.exp_i(ops.scalar_mul(phi, 2.5)), c)))
        assert grad_check(f, [Tensor(rng.uniform(-2, 2, 5))]).max_rel_err < 1e-6

    def test_constant_function(self):
        rep = grad_check(lambda x: ops.reduce_sum(ops.scalar_mul(ops.re(x), 0.0)), [Tensor(np.ones(3, complex))])
        assert np.all(rep.analytic == 0) and np.all(rep.numeric == 0) and rep.passed

    def test_relative_error_floor(self):
        from fasgnn.autodiff import GradCheckReport
        r = GradCheckReport(["a"], np.array([0.0]), np.array([1e-13]), 1e-5)
        assert r.rel_err[0] == pytest.approx(0.1)

    def test_kink_guard_skips_crossing_stencils(self):
        x = Tensor(np.array([1e-5, 0.5, -0.7]))
        rep = grad_check(lambda t: ops.reduce_sum(ops.relu(t)), [x], kink_guard=True)
        assert rep.skipped == ["input0[0].re"]
        assert rep.passed and len(rep.labels) == 2
        plain = grad_check(lambda t: ops.reduce_sum(ops.relu(t)), [x])
        assert not plain.passed

    def test_inputs_restored(self, rng):
        data = cplx(rng, 3)
        x = Tensor(data.copy())
        grad_check(lambda t: ops.reduce_sum(ops.abs2(t)), [x])
        assert x.data.tobytes() == data.tobytes()


@given(st.integers(0, 2**31 - 1))
def test_matmul_vjp_property(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(cplx(rng, 2, 3, 4), requires_grad=True)
    b = Tensor(cplx(rng, 4, 2), requires_grad=True)
    c = cplx(rng, 2, 3, 2)
    with Tape() as tape:
        loss = ops.reduce_sum(ops.re(ops.mul(ops.matmul(a, b), Tensor(c))))
    g = backward(tape, loss)
    # d Re<c, AB> / dA = conj(c) B^H pattern under the dL/dRe + i dL/dIm convention
    np.testing.assert_allclose(g[a], np.conj(c) @ np.conj(b.data.T), atol=1e-12)
    np.testing.assert_allclose(g[b], np.einsum("bkv,bkd->vd", np.conj(a.data), np.conj(c)), atol=1e-12)


def test_maximum_propagates_nan():
    out = ops.maximum(Tensor(np.array([np.nan, 0.5, -1.0])), 0.0).data
    assert np.isnan(out[0]) and out[1] == 0.5 and out[2] == 0.0


def test_tape_freed_without_cycle_collection():
    import gc
    import weakref
    gc.disable()
    try:
        w = Tensor(np.ones((3, 3), complex), requires_grad=True)
        with Tape() as tape:
            loss = ops.reduce_sum(ops.abs2(ops.matmul(w, w)))
        backward(tape, loss)
        ref = weakref.ref(tape)
        del tape, loss
        assert ref() is None
    finally:
        gc.enable()
