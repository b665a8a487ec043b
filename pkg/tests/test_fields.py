from __future__ import annotations

import numpy as np
import pytest

from ensurf import autodiff as ad
from ensurf.errors import ConfigurationError
from ensurf.fields import DeformationModel, FieldConfig, build_basis, delta_schedule, extract_mesh
from ensurf.geometry import icosphere

SMALL = dict(hidden=16, z_width=4, coarse_rff_freqs=8, fine_rff_freqs=8, basis_level=2,
             eigen_d=30, eigen_low=10, eigen_high=5)


@pytest.fixture(scope="module")
def small_basis(tmp_path_factory):
    return build_basis(FieldConfig(**SMALL), cache_dir=str(tmp_path_factory.mktemp("fcache")))


def _model(small_basis, **kw):
    basis, mesh = small_basis
    return DeformationModel(FieldConfig(**{**SMALL, **kw}), basis, mesh)


@pytest.mark.parametrize("it,expected", [(0, 0.0), (500, 0.0), (550, 0.05), (600, 0.1), (10_000, 0.1)])
def test_delta_schedule(it, expected):
    assert delta_schedule(it, start=500) == pytest.approx(expected)


def test_config_roundtrip_and_unknown():
    cfg = FieldConfig(hidden=8)
    assert FieldConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        FieldConfig.from_dict({"hiden": 8})


def test_defaults_match_architecture():
    cfg = FieldConfig()
    assert (cfg.hidden, cfg.z_width, cfg.coarse_sigma, cfg.fine_sigma) == (400, 128, 0.5, 4.0)
    assert len(cfg.policy.indices(cfg.eigen_d)) == 200


def test_identity_at_init(small_basis):
    model = _model(small_basis)
    model.delta = 0.1
    dom = icosphere(3)
    mesh = extract_mesh(model, dom)
    np.testing.assert_array_equal(mesh.vertices, dom.vertices)
    np.testing.assert_array_equal(mesh.faces, dom.faces)
    y, z = model.deform_full(dom.vertices[:7])
    assert z.shape == (7, 4)


def test_vertex_prefix_lookup(small_basis):
    model = _model(small_basis)
    assert np.array_equal(model.domain_vertex_ids(icosphere(1)), np.arange(42))
    assert model.domain_vertex_ids(icosphere(3)) is None


def test_freeze_coarse_keeps_bits(small_basis):
    model = _model(small_basis)
    r = np.random.default_rng(0)
    for p in model.parameters():
        p.data = r.normal(size=p.shape).astype(p.data.dtype) * 0.1
    model.delta = 0.1
    model.freeze_coarse()
    before = {p.name: p.data.copy() for p in model.coarse_net.parameters()}
    opt = ad.Adam(model.parameters(), lr=1e-2)
    x = icosphere(1).vertices
    for _ in range(3):
        y, z = model.deform_full(x)
        loss = ad.sum(ad.square(y)) + ad.sum(ad.square(z))
        for p in model.parameters():
            p.grad = None
        loss.backward()
        opt.step()
    for p in model.coarse_net.parameters():
        np.testing.assert_array_equal(p.data, before[p.name])
        assert p.grad is None


def test_state_roundtrip(small_basis):
    model = _model(small_basis)
    r = np.random.default_rng(1)
    for p in model.parameters():
        p.data = r.normal(size=p.shape).astype(p.data.dtype) * 0.1
    model.delta = 0.07
    again = DeformationModel.from_state(model.state_arrays(), model.state_meta())
    x = icosphere(2).vertices
    np.testing.assert_array_equal(model.deform_full(x)[0].data, again.deform_full(x)[0].data)
    arrays = model.state_arrays()
    arrays["rff.fine.B"] = arrays["rff.fine.B"] + 1
    with pytest.raises(ConfigurationError):
        DeformationModel.from_state(arrays, model.state_meta())


def test_no_coarse_is_identity_map(small_basis):
    model = _model(small_basis, use_coarse=False)
    x = icosphere(1).vertices
    np.testing.assert_array_equal(model.deform_coarse(x).data, x)


def test_bad_encoding_rejected(small_basis):
    with pytest.raises(ConfigurationError):
        _model(small_basis, coarse_encoding="both")
