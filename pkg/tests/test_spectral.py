from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from ensurf.errors import NumericError, TopologyError, VersionError
from ensurf.geometry import Mesh, face_areas, icosphere
from ensurf.spectral import (
    EigenPolicy, LaplacianPair, PointLocator, SpectralBasis, cached_eigenbasis, cotan_laplacian,
    eigenbasis, interpolate_to_points, load_basis, save_basis, select_eigenfunctions, sphere_spectrum,
)

from conftest import convex_hull_mesh


@pytest.fixture(scope="module")
def level4():
    mesh = icosphere(4)
    pair = cotan_laplacian(mesh)
    return mesh, pair, eigenbasis(pair, 64)


def _cot(u, v):
    return np.dot(u, v) / np.linalg.norm(np.cross(u, v))


def _cotan_oracle(mesh):
    """Dense per-triangle accumulation of the cotangent formula."""
    n = mesh.n_vertices
    W = np.zeros((n, n))
    for f in mesh.faces:
        for k in range(3):
            i, j, o = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
            P = mesh.vertices
            w = 0.5 * _cot(P[i] - P[o], P[j] - P[o])
            W[i, j] -= w
            W[j, i] -= w
    W[np.diag_indices(n)] = -W.sum(axis=1)
    return W


def test_two_equilateral_triangles():
    h = np.sqrt(3) / 2
    V = np.array([[0, 0, 0], [1, 0, 0], [0.5, h, 0], [0.5, -h, 0]])
    m = Mesh(V, np.array([[0, 1, 2], [1, 0, 3]]))
    W = cotan_laplacian(m).W.toarray()
    assert W[0, 1] == pytest.approx(-1 / np.sqrt(3), abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(n=st.integers(8, 30), seed=st.integers(0, 10_000))
def test_cotan_matches_oracle(n, seed):
    m = convex_hull_mesh(np.random.default_rng(seed).normal(size=(n, 3)))
    pair = cotan_laplacian(m)
    W = pair.W.toarray()
    np.testing.assert_allclose(W, _cotan_oracle(m), atol=1e-9)
    assert abs(W - W.T).max() == 0 or np.allclose(W, W.T, atol=1e-14)
    assert np.abs(W.sum(axis=1)).max() <= 1e-10 * np.abs(W).max()
    assert np.all(pair.mass > 0)
    assert pair.mass.sum() == pytest.approx(face_areas(m).sum(), rel=1e-9)


def test_nonmanifold_rejected():
    faces = np.array([[0, 1, 2], [0, 2, 1], [0, 1, 3]])
    with pytest.raises(TopologyError):
        cotan_laplacian(Mesh(np.random.default_rng(0).normal(size=(4, 3)), faces))


def test_level4_area(level4):
    _, pair, _ = level4
    assert pair.mass.sum() == pytest.approx(4 * np.pi, rel=0.01)


def test_sphere_spectrum_oracle(level4):
    _, _, basis = level4
    lam = basis.eigenvalues[:36]
    ref = sphere_spectrum(5)
    assert lam[0] == pytest.approx(0.0, abs=1e-8)
    np.testing.assert_allclose(lam[1:], ref[1:], rtol=0.02)
    for l in range(1, 6):
        block = lam[l * l:(l + 1) ** 2]
        assert len(block) == 2 * l + 1
        assert (block.max() - block.min()) / block.mean() < 0.005


def test_eigen_invariants(level4):
    _, pair, basis = level4
    phi, lam = basis.eigenfunctions, basis.eigenvalues
    G = phi.T @ (pair.mass[:, None] * phi)
    assert np.abs(G - np.eye(basis.d)).max() <= 1e-8
    res = pair.W @ phi - (pair.mass[:, None] * phi) * lam
    assert np.linalg.norm(res, axis=0).max() <= 1e-6 * sp.linalg.norm(pair.W)
    assert np.all(np.diff(lam) >= -1e-12) and lam.min() >= -1e-10
    assert np.ptp(phi[:, 0]) < 1e-6


def test_sign_convention(level4):
    _, _, basis = level4
    phi = basis.eigenfunctions
    idx = np.argmax(np.abs(phi), axis=0)
    assert np.all(phi[idx, np.arange(phi.shape[1])] > 0)


def test_convergence_across_levels():
    # error to l(l+1) shrinks with refinement, l <= 5
    ref = sphere_spectrum(5)[1:]
    errs = []
    for level, method in ((3, "dense"), (4, "dense"), (5, "sparse")):
        lam = eigenbasis(cotan_laplacian(icosphere(level)), 36, method=method).eigenvalues[1:]
        errs.append(np.abs(lam - ref) / ref)
    for l in range(1, 6):
        sl = slice(l * l - 1, (l + 1) ** 2 - 1)
        e = [err[sl].max() for err in errs]
        assert e[0] > e[1] > e[2]


def test_dense_sparse_agree():
    pair = cotan_laplacian(icosphere(3))
    a = eigenbasis(pair, 16)
    b = eigenbasis(pair, 16, method="sparse")
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-8, atol=1e-10)


def test_eigenbasis_errors():
    pair = cotan_laplacian(icosphere(0))
    with pytest.raises(ValueError):
        eigenbasis(pair, 13)
    bad = LaplacianPair(pair.W.copy(), pair.mass.copy())
    bad.W.data[0] = np.nan
    with pytest.raises(NumericError):
        eigenbasis(bad, 3)


def test_policies():
    assert len(EigenPolicy.paper_scale().indices(10_000)) == 2320
    idx = EigenPolicy.desk().indices(400)
    assert len(idx) == 200 and idx[119] == 119 and idx[120] == 320 and idx[-1] == 399
    np.testing.assert_array_equal(EigenPolicy(64).indices(64), np.arange(64))
    with pytest.raises(ValueError):
        EigenPolicy(100, 50, 120).indices(200)


def test_select_identity(level4):
    _, _, basis = level4
    sel = select_eigenfunctions(basis, EigenPolicy(64))
    np.testing.assert_array_equal(sel.eigenfunctions, basis.eigenfunctions)


def test_interpolation_at_vertices_and_midpoints(level4):
    mesh, _, basis = level4
    out = interpolate_to_points(basis, mesh, mesh.vertices[:50])
    np.testing.assert_array_equal(out, basis.eigenfunctions[:50])
    i, j = mesh.edges[7]
    mid = mesh.vertices[i] + mesh.vertices[j]
    mid /= np.linalg.norm(mid)
    # closed-form central-projection weights for a point on edge ij
    got = interpolate_to_points(basis, mesh, mid[None])[0]
    expect = 0.5 * (basis.eigenfunctions[i] + basis.eigenfunctions[j])
    np.testing.assert_allclose(got, expect, atol=1e-9)


def test_interpolation_constant_and_linear(level4, rng):
    mesh, _, basis = level4
    pts = rng.normal(size=(300, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    vals = interpolate_to_points(basis, mesh, pts)
    assert np.ptp(vals[:, 0]) < 1e-9
    a, b = 1.7, -0.3
    combo = basis.eigenfunctions[:, 3:4] * a + basis.eigenfunctions[:, 5:6] * b
    loc = PointLocator(mesh)
    lhs = interpolate_to_points(basis, mesh, pts, locator=loc, values=combo)[:, 0]
    np.testing.assert_allclose(lhs, a * vals[:, 3] + b * vals[:, 5], atol=1e-12)


def test_interpolation_requires_unit_points(level4):
    mesh, _, basis = level4
    with pytest.raises(ValueError):
        interpolate_to_points(basis, mesh, np.array([[0.5, 0, 0]]))


def test_cache_roundtrip(tmp_path, level4):
    mesh, _, basis = level4
    path = tmp_path / "b.bin"
    save_basis(basis, path)
    back = load_basis(path, mesh.mesh_id)
    np.testing.assert_array_equal(back.eigenfunctions, basis.eigenfunctions)
    with pytest.raises(VersionError):
        load_basis(path, icosphere(3).mesh_id)
    raw = bytearray(path.read_bytes())
    raw[8] = 9  # version field
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_basis(path)


def test_cached_eigenbasis_reuses(tmp_path):
    m = icosphere(2)
    a = cached_eigenbasis(m, 10, tmp_path)
    assert len(list(tmp_path.iterdir())) == 1
    b = cached_eigenbasis(m, 10, tmp_path)
    np.testing.assert_array_equal(a.eigenfunctions, b.eigenfunctions)
    assert isinstance(b, SpectralBasis)
