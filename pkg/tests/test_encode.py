from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial import cKDTree

from ensurf import autodiff as ad
from ensurf.encode import HybridEncoder, RffMatrix, hybrid_encode, intrinsic_encode, octave_encode, rff_encode
from ensurf.errors import ConfigurationError
from ensurf.geometry import icosphere
from ensurf.spectral import EigenPolicy, cotan_laplacian, eigenbasis, select_eigenfunctions

finite3 = arrays(np.float64, (3,), elements=st.floats(-2, 2))


@pytest.fixture(scope="module")
def level2():
    mesh = icosphere(2)
    return mesh, eigenbasis(cotan_laplacian(mesh), 40)


def test_rff_at_origin():
    rff = RffMatrix.sample(16, 0.5, 3)
    enc = rff_encode(np.zeros((1, 3)), rff)
    assert enc.shape == (1, 32)
    np.testing.assert_array_equal(enc[0, 0::2], 1.0)
    np.testing.assert_array_equal(enc[0, 1::2], 0.0)


def test_rff_seeded_and_scaled():
    a = RffMatrix.sample(2000, 4.0, 9)
    b = RffMatrix.sample(2000, 4.0, 9)
    np.testing.assert_array_equal(a.B, b.B)
    assert a.B.std() == pytest.approx(4.0, rel=0.05)
    assert not a.B.flags.writeable


@settings(max_examples=50, deadline=None)
@given(x=finite3, y=finite3)
def test_rff_pair_identity_and_lipschitz(x, y):
    rff = RffMatrix.sample(32, 2.0, 1)
    ex, ey = rff_encode(x[None], rff)[0], rff_encode(y[None], rff)[0]
    np.testing.assert_allclose(ex[0::2] ** 2 + ex[1::2] ** 2, 1.0, atol=1e-12)
    bound = np.linalg.norm(rff.B) * np.linalg.norm(x - y)
    assert np.linalg.norm(ex - ey) <= bound + 1e-9


def test_rff_tensor_matches_numpy_and_gradient():
    rff = RffMatrix.sample(8, 1.0, 2)
    x = np.random.default_rng(0).normal(size=(5, 3))
    with ad.precision(np.float64):
        t = rff_encode(ad.tensor(x), rff)
        np.testing.assert_allclose(t.data, rff_encode(x, rff), atol=1e-14)
        err = ad.check_gradients(lambda p: ad.sum(ad.sin(rff_encode(p, rff))), [x])
    assert err <= 1e-6


@pytest.mark.parametrize("octaves,width", [(3, 18), (4, 24)])
def test_octave_widths(octaves, width):
    v = np.array([[0.0, 0.5, 1.0]])
    enc = octave_encode(v, octaves)
    assert enc.shape == (1, width)
    # first octave: cos(pi v) then sin(pi v)
    np.testing.assert_allclose(enc[0, :6], np.concatenate([np.cos(np.pi * v[0]), np.sin(np.pi * v[0])]),
                               atol=1e-15)
    with ad.precision(np.float64):
        np.testing.assert_allclose(octave_encode(ad.tensor(v), octaves).data, enc, atol=1e-14)


def test_hybrid_layout(level2):
    mesh, full = level2
    basis = select_eigenfunctions(full, EigenPolicy(10, 30, 40))
    rff = RffMatrix.sample(128, 4.0, 12)
    enc = HybridEncoder(rff, basis, mesh)
    assert (enc.d_intrinsic, enc.d_extrinsic, enc.width) == (20, 256, 276)
    ids = np.arange(0, mesh.n_vertices, 7)
    x = mesh.vertices[ids]
    rows = hybrid_encode(x, enc, vertex_ids=ids)
    np.testing.assert_array_equal(rows[:, :20], basis.eigenfunctions[ids])
    np.testing.assert_array_equal(rows[:, 20:], rff_encode(x, rff))
    # interpolation at vertices reproduces the lookup
    np.testing.assert_allclose(intrinsic_encode(x, enc), basis.eigenfunctions[ids], atol=1e-12)


def test_hybrid_desk_width(cache_dir):
    from ensurf.fields import FieldConfig, build_basis

    basis, mesh = build_basis(FieldConfig(), cache_dir=cache_dir)
    enc = HybridEncoder(RffMatrix.sample(128, 4.0, 12), basis, mesh)
    assert enc.width == 456


def test_hybrid_ablations_zero_blocks(level2):
    mesh, full = level2
    rff = RffMatrix.sample(4, 1.0, 0)
    x = mesh.vertices[:5]
    no_i = HybridEncoder(rff, full, mesh, intrinsic_enabled=False).encode(x)
    no_e = HybridEncoder(rff, full, mesh, extrinsic_enabled=False).encode(x)
    assert no_i.shape == no_e.shape == (5, 48)
    np.testing.assert_array_equal(no_i[:, :40], 0.0)
    np.testing.assert_array_equal(no_e[:, 40:], 0.0)
    assert np.abs(no_i[:, 40:]).max() > 0 and np.abs(no_e[:, :40]).max() > 0


def test_hybrid_rejects_foreign_ids(level2):
    mesh, full = level2
    enc = HybridEncoder(RffMatrix.sample(4, 1.0, 0), full, mesh)
    with pytest.raises(ConfigurationError):
        enc.intrinsic(mesh.vertices[:3], vertex_ids=[3, 4, 5])
    with pytest.raises(ConfigurationError):
        HybridEncoder(RffMatrix.sample(4, 1.0, 0), full, icosphere(1))


def test_eigenfunction_antipodal_parity(level2):
    # the degree-1 eigenspace (indices 1..3) is odd, the constant mode is even
    mesh, full = level2
    _, opposite = cKDTree(mesh.vertices).query(-mesh.vertices)
    phi = full.eigenfunctions
    np.testing.assert_allclose(phi[opposite, 0], phi[:, 0], atol=1e-10)
    np.testing.assert_allclose(phi[opposite, 1:4], -phi[:, 1:4], atol=1e-10)
    np.testing.assert_allclose(phi[opposite, 4:9], phi[:, 4:9], atol=1e-8)
