import json
import zipfile

import numpy as np
import pytest

from fasgnn.channel import SystemConfig, check_feasibility, feasible_batch
from fasgnn.checkpoint import load_checkpoint, read_meta, save_checkpoint
from fasgnn.model import ArchConfig, TwoStageGNN

SMALL = ArchConfig(gal_layers=(1, 1, 1, 1), fl_layers=(2, 2, 2, 2), heads=2, head_dim=4, fl_hidden=8)


@pytest.fixture
def model():
    return TwoStageGNN(SystemConfig(n_antennas=8, n_users=4), SMALL, seed=3)


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchConfig(gal_layers=(1, 1, 1))
    with pytest.raises(ValueError):
        ArchConfig(heads=0)
    with pytest.raises(ValueError):
        ArchConfig(batchnorm="layer")
    with pytest.raises(ValueError):
        ArchConfig(vn_activation="gelu")
    with pytest.raises(ValueError):
        TwoStageGNN(SystemConfig(n_antennas=1, n_users=1))


def test_parameter_count_independent_of_users():
    counts = {TwoStageGNN(SystemConfig(n_antennas=8, n_users=k), seed=0).n_parameters() for k in (1, 3, 4, 5, 8)}
    assert len(counts) == 1
    m = TwoStageGNN(SystemConfig(n_antennas=8, n_users=4), seed=0)
    assert m.flat_parameters().size == m.n_parameters()


def test_same_seed_same_weights():
    cfg = SystemConfig(n_antennas=4, n_users=2)
    a, b = TwoStageGNN(cfg, SMALL, 5), TwoStageGNN(cfg, SMALL, 5)
    assert a.flat_parameters().tobytes() == b.flat_parameters().tobytes()
    assert a.flat_parameters().tobytes() != TwoStageGNN(cfg, SMALL, 6).flat_parameters().tobytes()


@pytest.mark.parametrize("k", [1, 3, 4, 5])
def test_forward_feasible_any_k(model, rng, k):
    angles = rng.uniform(0, np.pi, (16, k))
    sol = model(angles)
    assert sol.w.shape == (16, 8, k) and sol.x.shape == (16, 8)
    assert feasible_batch(sol.w.data, sol.x.data, model.cfg).all()
    assert np.all((sol.alpha.data > 0) & (sol.alpha.data < 1))
    assert check_feasibility(sol.w.data[0], sol.x.data[0], model.cfg).passed


def test_permutation_equivariance(model, rng):
    angles = rng.uniform(0, np.pi, (8, 4))
    perm = rng.permutation(4)
    a, b = model(angles), model(angles[:, perm])
    np.testing.assert_allclose(b.x.data, a.x.data, atol=1e-9)
    np.testing.assert_allclose(b.w.data, a.w.data[:, :, perm], atol=1e-9)
    np.testing.assert_allclose(model.utility(angles[:, perm]), model.utility(angles), atol=1e-9)


def test_eval_is_per_sample(model, rng):
    angles = rng.uniform(0, np.pi, (10, 4))
    full = model.utility(angles)
    one = model.utility(angles[3:4])
    np.testing.assert_allclose(one[0], full[3], rtol=1e-12)


def test_positions_override(model, rng):
    angles = rng.uniform(0, np.pi, (4, 4))
    x = np.linspace(0, model.cfg.aperture, 8)
    sol = model(angles, positions=x)
    np.testing.assert_array_equal(sol.x.data, np.broadcast_to(x, (4, 8)))
    assert sol.xi is None


def test_state_round_trip(model, rng):
    other = TwoStageGNN(model.cfg, SMALL, seed=99)
    other.load_state(model.state())
    assert other.flat_parameters().tobytes() == model.flat_parameters().tobytes()
    bad = model.state()
    bad.pop(next(iter(bad)))
    with pytest.raises(ValueError):
        other.load_state(bad)


def test_checkpoint_bitwise(model, rng, tmp_path):
    model.batchnorms()["stage1.xi.bn0"].running_mean[:] = rng.standard_normal(8) + 1j
    path = save_checkpoint(model, tmp_path / "m.npz", extra={"note": 1})
    back = load_checkpoint(path)
    for k, v in model.state().items():
        assert back.state()[k].tobytes() == v.tobytes(), k
    assert read_meta(path)["extra"] == {"note": 1}
    angles = rng.uniform(0, np.pi, (5, 4))
    assert back.utility(angles).tobytes() == model.utility(angles).tobytes()
    k3 = load_checkpoint(path, n_users=3)
    assert k3.cfg.n_users == 3 and k3.n_parameters() == model.n_parameters()


def test_checkpoint_version_checked(model, tmp_path):
    path = save_checkpoint(model, tmp_path / "m.npz")
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays["meta"].tobytes())
    meta["version"] = 99
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "v99.npz", **arrays)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "v99.npz")
    np.savez(tmp_path / "plain.npz", a=np.zeros(2))
    with pytest.raises(ValueError):
        read_meta(tmp_path / "plain.npz")


def test_checkpoint_layout(model, tmp_path):
    path = save_checkpoint(model, tmp_path / "m.npz")
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
    assert "meta.npy" in names
    with np.load(path) as z:
        w = z["param/stage1.xi.gal0.W"]
        assert w.dtype == np.dtype("<f8") and w.shape[-1] == 2


@pytest.mark.parametrize("variant", [dict(batchnorm="split"), dict(batchnorm="none"),
                                     dict(vn_activation="real_relu"), dict(angle_embedding="phasor")])
def test_architecture_variants(rng, variant):
    arch = ArchConfig(**{**SMALL.to_dict(), **variant})
    m = TwoStageGNN(SystemConfig(n_antennas=4, n_users=2), arch)
    sol = m(rng.uniform(0, np.pi, (6, 2)), training=True)
    assert feasible_batch(sol.w.data, sol.x.data, m.cfg).all()
