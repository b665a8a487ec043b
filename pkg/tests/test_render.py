from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import binary_fill_holes
from scipy.spatial.transform import Rotation

from ensurf import autodiff as ad
from ensurf.errors import DatasetError
from ensurf.geometry import Mesh, icosphere
from ensurf.render import (
    Camera, ShaderPair, barycentrics, contour_edges, interpolate, intrinsics, look_at, normal_map, psnr,
    rasterize, rasterize_fragments, read_float_buffer, read_png, shade, shade_points, soft_mask,
    write_float_buffer, write_png,
)

W = H = 64
F = 80.0


def front_camera(focal=F, width=W, height=H):
    """Looks down +z from ``z = -3``; image x is world x, image y is world y."""
    return Camera(K=intrinsics(focal, width, height), R=np.eye(3), t=np.array([0.0, 0.0, 3.0]),
                  width=width, height=height)


def square(half=0.5, z=0.0, shift=(0.0, 0.0)):
    """Two triangles facing the camera."""
    sx, sy = shift
    v = np.array([[-half + sx, -half + sy, z], [half + sx, -half + sy, z], [half + sx, half + sy, z],
                  [-half + sx, half + sy, z]])
    return Mesh(v, np.array([[0, 2, 1], [0, 3, 2]]))


# -- camera -------------------------------------------------------------------

def test_principal_point_and_pixel_centers():
    cam = front_camera()
    uv, depth = cam.project(np.zeros((1, 3)))
    np.testing.assert_allclose(uv, [[32.0, 32.0]])
    assert depth[0] == 3.0
    # the ray through pixel (0, 0) passes through its center (0.5, 0.5)
    d = cam.pixel_rays([0])
    np.testing.assert_allclose(d @ cam.K.T, [[0.5, 0.5, 1.0]])


def test_focal_linearity():
    p = np.array([[0.3, -0.2, 0.4]])
    offs = [front_camera(f).project(p)[0] - 32.0 for f in (40.0, 80.0, 160.0)]
    np.testing.assert_allclose(offs[1], 2 * offs[0])
    np.testing.assert_allclose(offs[2], 4 * offs[0])


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.1, 3.0), st.floats(0.1, 1.4))
def test_unproject_roundtrip(x, y, z, az, el):
    eye = 4.0 * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
    cam = look_at(eye, focal=120.0, width=100, height=80)
    p = np.array([[x, y, z]])
    uv, depth = cam.project(p)
    np.testing.assert_allclose(cam.unproject(uv, depth), p, atol=1e-9)


def test_look_at_centers_target_and_roundtrips_dict():
    cam = look_at((0.0, -3.0, 1.0), focal=100.0, width=50, height=40)
    uv, depth = cam.project(np.zeros((1, 3)))
    np.testing.assert_allclose(uv, [[25.0, 20.0]], atol=1e-12)
    np.testing.assert_allclose(depth, [np.sqrt(10.0)])
    np.testing.assert_allclose(cam.center, [0.0, -3.0, 1.0], atol=1e-12)
    again = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(again.R, cam.R)
    # world up projects upward in the image (decreasing v)
    assert cam.project(np.array([[0.0, 0.0, 0.5]]))[0][0, 1] < 20.0


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(K=intrinsics(10, 8, 8), R=2 * np.eye(3), t=np.zeros(3), width=8, height=8)
    with pytest.raises(ValueError):
        Camera(K=-intrinsics(10, 8, 8), R=np.eye(3), t=np.zeros(3), width=8, height=8)


# -- rasterization ------------------------------------------------------------

def test_plane_covering_image():
    cam = front_camera()
    fr = rasterize_fragments(square(half=10.0).vertices, square(half=10.0).faces, cam)
    assert fr.coverage.all()
    np.testing.assert_allclose(fr.depth, 3.0, atol=1e-6)
    np.testing.assert_allclose(fr.bary.sum(axis=1), 1.0, atol=1e-12)


def test_tilted_plane_depth_oracle():
    # plane z = 0.2 x seen from the front: depth along each pixel ray solves analytically
    cam = front_camera()
    m = square(half=5.0)
    V = m.vertices.copy()
    V[:, 2] = 0.2 * V[:, 0]
    fr = rasterize_fragments(V, m.faces, cam)
    d = cam.pixel_rays()
    # camera frame point s * d, world = s * d - (0, 0, 3); solve s*dz - 3 = 0.2 * s*dx
    s = 3.0 / (d[:, 2] - 0.2 * d[:, 0])
    np.testing.assert_allclose(fr.depth, s, atol=1e-9)


def test_stacked_triangles_nearest_wins():
    cam = front_camera()
    far, near = square(0.5, z=0.5), square(0.3, z=-0.5)
    V = np.concatenate([far.vertices, near.vertices])
    faces = np.concatenate([far.faces, near.faces + 4])
    fr = rasterize_fragments(V, faces, cam)
    inner = fr.face_id[fr.coverage & (fr.depth < 3.0)]
    assert set(np.unique(inner)) <= {2, 3}
    assert set(np.unique(fr.face_id[fr.coverage])) == {0, 1, 2, 3}
    np.testing.assert_allclose(fr.depth[np.isin(fr.face_id, [2, 3])], 2.5, atol=1e-12)
    # reversing the face order leaves the visible depths unchanged
    fr2 = rasterize_fragments(V, faces[::-1], cam)
    np.testing.assert_array_equal(fr.depth, fr2.depth)


def test_barycentric_gradient_matches_fd():
    cam = front_camera()
    m = square(0.5)
    V = m.vertices + np.random.default_rng(0).normal(scale=0.05, size=(4, 3))
    fr = rasterize_fragments(V, m.faces, cam)
    pix = np.nonzero(fr.coverage)[0][::37]
    fid = fr.face_id[pix]
    w = np.random.default_rng(1).normal(size=(len(pix), 3))
    with ad.precision(np.float64):
        np.testing.assert_allclose(barycentrics(V, m.faces, cam, pix, fid).data, fr.bary[pix], atol=1e-12)
        err = ad.check_gradients(lambda v: ad.sum(barycentrics(v, m.faces, cam, pix, fid) * w), [V])
    assert err <= 1e-4


def test_interpolation_is_perspective_correct():
    cam = front_camera()
    m = square(0.8)
    V = m.vertices.copy()
    V[:, 2] = np.array([0.3, -0.2, 0.4, 0.1])
    tilt = Mesh(V, np.array([[0, 1, 2]]))
    g = rasterize(tilt, cam, features=V @ np.array([[1.0], [-2.0], [0.5]]) + 0.25, soft_k=None)
    # interpolated positions lie on the pixel rays
    rays = cam.pixel_rays(g.pixels[g.covered])
    pc = cam.to_camera(g.position.data)
    np.testing.assert_allclose(pc[:, :2] / pc[:, 2:], rays[:, :2], atol=1e-12)
    # an affine function of position interpolates exactly
    np.testing.assert_allclose(g.feature.data[:, 0], g.position.data @ [1.0, -2.0, 0.5] + 0.25, atol=1e-12)


def test_offscreen_and_behind():
    cam = front_camera()
    g = rasterize(square(0.5, shift=(100.0, 0.0)), cam)
    assert g.empty and g.mask.data.sum() == 0
    behind = square(0.5, z=-5.0)
    assert rasterize_fragments(behind.vertices, behind.faces, cam).empty


def test_sphere_under_rotation_has_no_holes():
    cam = front_camera()
    mesh = icosphere(3)
    for seed in range(4):
        R = Rotation.random(random_state=seed).as_matrix()
        cov = rasterize_fragments(mesh.vertices @ R.T, mesh.faces, cam).coverage.reshape(H, W)
        np.testing.assert_array_equal(binary_fill_holes(cov), cov)
        assert cov.sum() > 0.9 * np.pi * (F / np.sqrt(8)) ** 2


# -- soft silhouette ----------------------------------------------------------

def test_contour_of_sphere_is_a_loop():
    mesh = icosphere(3)
    e = contour_edges(mesh.vertices, mesh, front_camera())
    deg = np.bincount(e.reshape(-1), minlength=mesh.n_vertices)
    assert len(e) > 0 and set(np.unique(deg[deg > 0])) == {2}


def test_soft_mask_values():
    cam = front_camera()
    # edges at x = +-0.5 / 3 * 80 -> u = 32 +- 13.33; pick an edge through pixel center 20.5
    half = (32.0 - 20.5) * 3.0 / F
    m = square(half)
    mask = soft_mask(m.vertices, m, cam, k=50.0).data.reshape(H, W)
    assert mask[32, 32] > 0.999
    assert mask[0, 0] < 1e-3
    assert mask[32, 20] == pytest.approx(0.5, abs=1e-9)
    # one pixel inside / outside the edge
    assert mask[32, 21] == pytest.approx(1 / (1 + np.exp(-50.0)), rel=1e-9)
    assert mask[32, 19] == pytest.approx(1 / (1 + np.exp(50.0)), rel=1e-6)


def test_soft_mask_threshold_matches_hard():
    cam = front_camera()
    mesh = icosphere(3)
    R = Rotation.random(random_state=3).as_matrix()
    V = mesh.vertices @ R.T
    fr = rasterize_fragments(V, mesh.faces, cam)
    soft = soft_mask(V, mesh, cam, k=30.0, fragments=fr).data
    agree = (soft > 0.5) == fr.coverage
    assert agree.mean() > 0.995


def test_soft_mask_monotone_in_translation_with_fd():
    cam = front_camera()
    pix = 32 * W + 45  # just right of the square's right edge
    vals = []
    for dx in np.linspace(-0.02, 0.02, 9):
        m = square(0.5, shift=(dx, 0.0))
        vals.append(soft_mask(m.vertices, m, cam, k=10.0).data[pix])
    assert np.all(np.diff(vals) > 0)
    m = square(0.5)
    with ad.precision(np.float64):
        v = ad.tensor(m.vertices, requires_grad=True)
        soft_mask(v, m, cam, k=10.0)[pix].backward()
    grad_x = v.grad[:, 0].sum()
    h = 1e-6
    fd = (soft_mask(square(0.5, shift=(h, 0)).vertices, m, cam, k=10.0).data[pix]
          - soft_mask(square(0.5, shift=(-h, 0)).vertices, m, cam, k=10.0).data[pix]) / (2 * h)
    assert grad_x == pytest.approx(fd, rel=1e-3)


def test_soft_mask_rejects_bad_k():
    m = square()
    with pytest.raises(ValueError):
        soft_mask(m.vertices, m, front_camera(), k=0.0)


# -- shading ------------------------------------------------------------------

def test_zero_output_shaders_give_half_grey():
    cam = front_camera()
    mesh = icosphere(2)
    sh = ShaderPair(z_width=4, hidden=(16, 16))
    g = rasterize(mesh, cam, features=np.ones((mesh.n_vertices, 4)), pixels=np.arange(W * H))
    base, final = shade(g, cam, sh)
    assert base.shape == (W * H, 3)
    np.testing.assert_array_equal(base.data[g.covered], 0.5)
    np.testing.assert_array_equal(final.data[g.covered], 0.5)
    np.testing.assert_array_equal(final.data[~g.covered], 0.0)


def test_detach_contract():
    cam = front_camera()
    sh = ShaderPair(z_width=4, hidden=(8,), zero_output=False, seed=2)
    r = np.random.default_rng(0)
    x = ad.tensor(r.normal(size=(10, 3)), requires_grad=True)
    n = ad.normalize(ad.tensor(r.normal(size=(10, 3))), axis=-1)
    z = ad.tensor(r.normal(size=(10, 4)), requires_grad=True)
    _, final = shade_points(x, n, z, cam, sh)
    ad.sum(final).backward()
    assert z.grad is None
    assert all(p.grad is None or not np.any(p.grad) for p in sh.h_z.parameters())
    assert all(p.grad is not None and np.any(p.grad) for p in sh.h_g.parameters()[:1])
    with pytest.raises(ValueError):
        shade_points(x, n, ad.tensor(np.ones((10, 5))), cam, sh)


def test_shader_state_roundtrip():
    sh = ShaderPair(z_width=3, hidden=(8,), zero_output=False)
    again = ShaderPair.from_state(sh.state_arrays(), sh.state_meta())
    for a, b in zip(sh.parameters(), again.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


# -- image I/O ----------------------------------------------------------------

def test_float_buffer_roundtrip(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
    write_float_buffer(tmp_path / "a.f32", img)
    np.testing.assert_array_equal(read_float_buffer(tmp_path / "a.f32"), img)
    write_float_buffer(tmp_path / "m.f32", img[..., 0])
    assert read_float_buffer(tmp_path / "m.f32").shape == (5, 7, 1)
    raw = (tmp_path / "a.f32").read_bytes()
    (tmp_path / "t.f32").write_bytes(raw[:-4])
    with pytest.raises(DatasetError):
        read_float_buffer(tmp_path / "t.f32")
    with pytest.raises(DatasetError):
        read_float_buffer(tmp_path / "missing.f32")


def test_png_and_metrics(tmp_path):
    img = np.random.default_rng(0).random((6, 4, 3))
    write_png(tmp_path / "a.png", img)
    np.testing.assert_allclose(read_png(tmp_path / "a.png"), img, atol=0.5 / 255 + 1e-12)
    np.testing.assert_allclose(normal_map(np.array([[0.0, 0.0, 1.0]])), [[0.5, 0.5, 1.0]])
    assert psnr(img, img) == float("inf")
    assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0)
