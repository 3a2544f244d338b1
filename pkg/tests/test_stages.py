import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fasgnn.autodiff import Tensor
from fasgnn.channel import POSITION_TOL, SystemConfig, channel_matrix, equidistant_positions
from fasgnn import channel, stage1, stage2

CFG8 = SystemConfig(n_antennas=8, n_users=4)
finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(arrays(np.float64, (3, 7), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_positions_always_feasible(xi, xi_max):
    cfg = CFG8
    x = stage1.delta_to_positions(stage1.xi_to_delta(xi, xi_max, cfg), cfg).data
    assert np.all(x[:, 0] == 0)
    assert np.all(np.diff(x, axis=1) >= cfg.min_spacing - POSITION_TOL)
    assert np.all(x[:, -1] <= cfg.aperture + POSITION_TOL)


def test_zero_slack_is_minimum_spacing():
    x = stage1.delta_to_positions(np.zeros((1, 8)), CFG8).data[0]
    np.testing.assert_allclose(x, np.arange(8) * CFG8.min_spacing)


def test_full_span_reaches_aperture():
    x = stage1.delta_to_positions(stage1.xi_to_delta(np.zeros((1, 7)), np.array([60.0]), CFG8), CFG8).data
    assert x[0, -1] == pytest.approx(CFG8.aperture, abs=1e-12)


def test_xi_width_checked():
    with pytest.raises(ValueError):
        stage1.xi_to_delta(np.zeros((1, 3)), np.zeros(1), CFG8)


def test_embedding():
    a = np.array([[0.5, 1.0]])
    np.testing.assert_array_equal(stage1.embed_angles(a).data[..., 0], a + 0j)
    np.testing.assert_allclose(stage1.embed_angles(a, "phasor").data[..., 0], np.exp(1j * a))
    with pytest.raises(ValueError):
        stage1.embed_angles(a, "raw")


def test_channels_bitwise_equal_reference(rng):
    x = equidistant_positions(CFG8)
    angles = rng.uniform(0, np.pi, (5, 4))
    g = stage1.positions_to_channels(np.broadcast_to(x, (5, 8)), angles, CFG8).data
    assert g.tobytes() == channel_matrix(x, angles, CFG8).tobytes()


def _cond_channel(rng, n, k, size=200):
    cfg = SystemConfig(n_antennas=n, n_users=k)
    x = equidistant_positions(cfg)
    return cfg, channel_matrix(x, rng.uniform(0, np.pi, (size, k)), cfg)


class TestZeroForcing:
    @pytest.mark.parametrize("n,k", [(4, 2), (8, 3), (8, 4), (8, 5)])
    def test_inverse_identity(self, rng, n, k):
        _, g = _cond_channel(rng, n, k, 2000)
        u = stage2.zf_directions(g).data
        # conditioning of the Gram matrix that actually gets inverted
        gram = g @ np.conj(np.swapaxes(g, -1, -2))
        ok = np.linalg.cond(gram) <= 1e8
        err = np.abs(g @ u - np.eye(k)).max(axis=(1, 2))
        assert np.all(err[ok] < 1e-8)

    def test_pure_zf_has_no_interference(self, rng):
        cfg, g = _cond_channel(rng, 8, 4)
        ok = np.linalg.cond(g) < 1e4
        g = g[ok]
        u = stage2.zf_directions(g)
        d = stage2.hybrid_direction(u, stage2.channel_columns(g), np.ones((len(g), 4)))
        w = stage2.assemble_beams(np.full((len(g), 4), 0.25), d).data
        gain = np.abs(g @ w) ** 2
        off = gain * (1 - np.eye(4))
        assert off.max() < 1e-10 * cfg.noise_power

    def test_single_user(self, rng):
        cfg = SystemConfig(n_antennas=4, n_users=1)
        g = channel_matrix(equidistant_positions(cfg), np.array([[0.7]]), cfg)
        u = stage2.zf_directions(g).data
        h = np.conj(g[0].T)
        np.testing.assert_allclose(u[0], h / np.vdot(h, h).real, atol=1e-14)


class TestHybrid:
    def test_alpha_zero_is_mrt(self, rng):
        _, g = _cond_channel(rng, 8, 3)
        u = stage2.zf_directions(g)
        h = stage2.channel_columns(g)
        d = stage2.hybrid_direction(u, h, np.zeros((200, 3))).data
        np.testing.assert_allclose(d, h.data / np.sqrt(8), atol=1e-14)

    @given(st.integers(0, 10_000))
    def test_unit_norm(self, seed):
        rng = np.random.default_rng(seed)
        _, g = _cond_channel(rng, 8, 4)
        alpha = rng.uniform(0, 1, (200, 4))
        d = stage2.hybrid_direction(stage2.zf_directions(g), stage2.channel_columns(g), alpha).data
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)


class TestPower:
    def test_projection_examples(self):
        p = stage2.power_projection(np.array([[0.6, 0.6], [0.2, 0.3]]), 1.0).data
        np.testing.assert_allclose(p, [[0.5, 0.5], [0.2, 0.3]])

    @given(arrays(np.float64, (4, 5), elements=st.floats(0, 1)))
    def test_projection_feasible(self, raw):
        p = stage2.power_projection(raw, 1.0).data
        assert np.all(p.sum(-1) <= 1.0 * (1 + 1e-12))
        under = raw.sum(-1) <= 1.0
        np.testing.assert_array_equal(p[under], raw[under])

    def test_beam_power(self, rng):
        _, g = _cond_channel(rng, 4, 2)
        pw = rng.uniform(0, 0.5, (200, 2))
        d = stage2.hybrid_direction(stage2.zf_directions(g), stage2.channel_columns(g), rng.uniform(0, 1, (200, 2)))
        w = stage2.assemble_beams(pw, d).data
        np.testing.assert_allclose(np.sum(np.abs(w) ** 2, axis=1), pw, rtol=1e-12)


@pytest.mark.parametrize("kind", ["sum_rate", "energy_efficiency"])
def test_utility_matches_reference(rng, kind):
    cfg, g = _cond_channel(rng, 8, 4)
    w = rng.standard_normal((200, 8, 4)) + 1j * rng.standard_normal((200, 8, 4))
    w *= 0.2
    np.testing.assert_allclose(stage2.utility(w, g, cfg, kind).data, channel.utility(w, g, cfg, kind), rtol=1e-12)
    with pytest.raises(ValueError):
        stage2.utility(w, g, cfg, "capacity")


def test_beams_csv(tmp_path):
    w = np.array([[1 + 2j, 0], [3j, 1]])
    stage2.export_beams_csv(tmp_path / "b.csv", [0.5, 0.25], [1.0, 0.0], w)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "sample,user,p,alpha,w1_re,w1_im,w2_re,w2_im"
    assert lines[1] == "0,0,0.5,1.0,1.0,2.0,0.0,3.0"


class TestStage1Examples:
    cfg = SystemConfig(n_antennas=4, n_users=2)

    def test_uniform_saturated(self):
        d = stage1.xi_to_delta(np.full((1, 3), 0.7), np.array([100.0]), self.cfg).data[0]
        assert d[0] == 0
        np.testing.assert_allclose(d[1:], self.cfg.delta_max / 3, rtol=0, atol=1e-12)
        x = stage1.delta_to_positions(d[None], self.cfg).data[0]
        np.testing.assert_allclose(np.diff(x), self.cfg.min_spacing + self.cfg.delta_max / 3, atol=1e-12)
        assert x[-1] == pytest.approx(self.cfg.aperture, abs=1e-12)

    def test_half_span(self, rng):
        d = stage1.xi_to_delta(rng.standard_normal((5, 3)), np.zeros(5), self.cfg).data
        np.testing.assert_allclose(d.sum(1), self.cfg.delta_max / 2, atol=1e-12)

    @given(arrays(np.float64, 3, elements=st.floats(-20, 20)), st.floats(-20, 20), st.floats(1e-3, 5))
    def test_span_monotone(self, xi, a, bump):
        lo = stage1.xi_to_delta(xi[None], np.array([a]), self.cfg).data.sum()
        hi = stage1.xi_to_delta(xi[None], np.array([a + bump]), self.cfg).data.sum()
        assert hi > lo

    def test_extreme_draws(self):
        rng = np.random.default_rng(7)
        xi = rng.uniform(-50, 50, (100_000, 7))
        xi_max = rng.uniform(-50, 50, 100_000)
        x = stage1.delta_to_positions(stage1.xi_to_delta(xi, xi_max, CFG8), CFG8).data
        assert np.all(x[:, 0] == 0)
        assert np.all(np.diff(x, axis=1) >= CFG8.min_spacing - POSITION_TOL)
        assert np.all(x[:, -1] <= CFG8.aperture + POSITION_TOL)

    def test_broadside_user(self):
        x = Tensor(np.array([[0.0, 0.2, 0.5, 0.9]]), requires_grad=True)
        from fasgnn.autodiff import Tape, backward, ops
        with Tape() as tape:
            g = stage1.positions_to_channels(x, np.array([[np.pi / 2]]), self.cfg)
            loss = ops.reduce_sum(ops.re(g))
        np.testing.assert_allclose(g.data, np.ones((1, 1, 4)), atol=1e-15)
        np.testing.assert_allclose(backward(tape, loss)[x], 0, atol=1e-15)

    def test_position_map_gradient(self, rng):
        from fasgnn.autodiff import grad_check, ops
        w = Tensor(rng.standard_normal(4))

        def f(xi, xi_max):
            x = stage1.delta_to_positions(stage1.xi_to_delta(xi, xi_max, self.cfg), self.cfg)
            return ops.reduce_sum(ops.mul(x, w))
        rep = grad_check(f, [Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal(2))], tolerance=1e-6)
        assert rep.passed, rep.worst(3)

    def test_zero_network_outputs_zero(self):
        from fasgnn.model import TwoStageGNN
        m = TwoStageGNN(self.cfg, seed=0)
        for t in m.params().values():
            t.data = np.zeros_like(t.data)
        xi, xi_max = m.stage1(np.array([[0.3, 1.2]]))
        np.testing.assert_array_equal(xi.data, 0)
        np.testing.assert_array_equal(xi_max.data, 0)
