import numpy as np
import pytest

from fasgnn.autodiff import Tensor, ops
from fasgnn.layers import (CFLParams, CGALParams, ComplexBatchNorm, activation, attention_weights,
                           cfl_forward, cgal_forward, kaiming_complex, virtual_node_forward,
                           virtual_node_weights)


def feats(rng, *shape):
    return Tensor(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def test_kaiming_variance(rng):
    w = kaiming_complex(rng, (400, 500), 400)
    assert np.var(w.real) == pytest.approx(1 / 400, rel=0.02)
    assert np.var(w.imag) == pytest.approx(1 / 400, rel=0.02)
    assert np.mean(np.abs(w) ** 2) == pytest.approx(2 / 400, rel=0.02)


def test_activation_kinds():
    x = Tensor(np.array([1 - 2j, -1 + 3j]))
    np.testing.assert_array_equal(activation(x, "crelu").data, [1, 3j])
    np.testing.assert_array_equal(activation(x, "real_relu").data, [1, 0])
    with pytest.raises(ValueError):
        activation(x, "tanh")


class TestAttention:
    def test_rows_are_distributions(self, rng):
        p = CGALParams.init(rng, 5, 3, 4)
        A = attention_weights(feats(rng, 6, 4, 5), p)[0].data
        assert A.shape == (6, 3, 4, 4)
        assert np.all(A >= 0)
        np.testing.assert_allclose(A.sum(-1), 1.0, atol=1e-14)

    def test_output_shape_and_width_check(self, rng):
        p = CGALParams.init(rng, 5, 3, 4)
        assert cgal_forward(feats(rng, 2, 4, 5), p).shape == (2, 4, 12)
        with pytest.raises(ValueError):
            cgal_forward(feats(rng, 2, 4, 6), p)

    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_permutation_equivariance(self, rng, k):
        p = CGALParams.init(rng, 3, 2, 4, vn_in_dim=3)
        V = feats(rng, 4, k, 3)
        perm = rng.permutation(k)
        out = cgal_forward(V, p).data
        out_p = cgal_forward(Tensor(V.data[:, perm]), p).data
        np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)

    def test_virtual_node_invariance(self, rng):
        p = CGALParams.init(rng, 3, 2, 4, vn_in_dim=3)
        V = feats(rng, 4, 5, 8)
        v0 = feats(rng, 4, 1, 3)
        beta = virtual_node_weights(V, p)[0].data
        np.testing.assert_allclose(beta.sum(-1), 1.0, atol=1e-14)
        out = virtual_node_forward(V, v0, p).data
        perm = rng.permutation(5)
        out_p = virtual_node_forward(Tensor(V.data[:, perm]), v0, p).data
        assert out.shape == (4, 1, 8)
        np.testing.assert_allclose(out_p, out, atol=1e-12)

    def test_virtual_node_requires_params(self, rng):
        p = CGALParams.init(rng, 3, 2, 4)
        with pytest.raises(ValueError):
            virtual_node_forward(feats(rng, 1, 2, 8), feats(rng, 1, 1, 3), p)

    def test_cfl_bias_shared(self, rng):
        p = CFLParams.init(rng, 4, 3)
        p.b.data = np.array([1.0, 2j, -1.0])
        V = Tensor(np.zeros((2, 5, 4), complex))
        out = cfl_forward(V, p).data
        np.testing.assert_array_equal(out, np.broadcast_to(np.maximum(0, p.b.data.real) + 1j * np.maximum(0, p.b.data.imag), out.shape))


class TestBatchNorm:
    def test_whitening(self, rng):
        n = 4000
        mix = np.array([[2.0, 0.0], [1.5, 0.5]])
        raw = rng.standard_normal((n, 2)) @ mix.T + [3.0, -1.0]
        X = Tensor((raw[:, 0] + 1j * raw[:, 1]).reshape(n, 1))
        bn = ComplexBatchNorm(1, eps=1e-12)
        bn.gamma.data[:] = [[1.0], [0.0], [1.0]]
        out = bn(X, training=True).data[:, 0]
        z = np.stack([out.real, out.imag])
        np.testing.assert_allclose(z.mean(1), 0, atol=1e-12)
        np.testing.assert_allclose(np.cov(z, bias=True), np.eye(2), atol=1e-9)

    def test_default_gamma_gives_unit_magnitude(self, rng):
        X = feats(rng, 5000, 3)
        out = ComplexBatchNorm(3)(X, training=True).data
        np.testing.assert_allclose(np.mean(np.abs(out) ** 2, 0), 1.0, rtol=1e-3)

    def test_split_mode(self, rng):
        X = Tensor(3 * rng.standard_normal((500, 2)) + 0.1j * rng.standard_normal((500, 2)) + 1)
        bn = ComplexBatchNorm(2, mode="split", eps=1e-12)
        bn.gamma.data[:] = [[1, 1], [0, 0], [1, 1]]
        out = bn(X, training=True).data
        np.testing.assert_allclose(out.real.std(0), 1, rtol=1e-9)
        np.testing.assert_allclose(out.imag.std(0), 1, rtol=1e-9)

    def test_running_stats_and_eval(self, rng):
        bn = ComplexBatchNorm(2, momentum=0.5)
        X = feats(rng, 64, 2)
        bn(X, training=True, update_stats=False)
        np.testing.assert_array_equal(bn.running_mean, 0)
        bn(X, training=True)
        np.testing.assert_allclose(bn.running_mean, 0.5 * X.data.mean(0))
        # evaluation is per-sample: one row gives the same answer alone or in a batch
        single = bn(Tensor(X.data[:1]), training=False).data
        batch = bn(X, training=False).data
        np.testing.assert_allclose(single[0], batch[0], atol=1e-15)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            ComplexBatchNorm(2, mode="layer")
        with pytest.raises(ValueError):
            ComplexBatchNorm(2, momentum=1.0)
        bn = ComplexBatchNorm(2)
        with pytest.raises(ValueError):
            bn(feats(rng, 1, 2), training=True)
        with pytest.raises(ValueError):
            bn(feats(rng, 4, 3))
