"""Hard z-buffered rasterization, differentiable attribute interpolation and a
band-limited soft silhouette.

Visibility (which face covers a pixel) is decided in numpy and treated as a
constant.  Given that choice, barycentrics are recomputed with autodiff ops
from camera-frame vertices, so every interpolated channel is differentiable
with respect to vertex positions and features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .. import autodiff as ad
from ..autodiff import Tensor
from ..geometry import Mesh
from .camera import DEPTH_EPS, Camera

log = logging.getLogger(__name__)

MAX_CANDIDATES = 2_000_000


@dataclass
class Fragments:
    """Hard visibility for every pixel (row-major, ``-1`` where uncovered)."""

    face_id: np.ndarray  # (H*W,)
    depth: np.ndarray  # (H*W,), inf where uncovered
    bary: np.ndarray  # (H*W, 3), zeros where uncovered
    width: int
    height: int

    @property
    def coverage(self) -> np.ndarray:
        return self.face_id >= 0

    @property
    def empty(self) -> bool:
        return not np.any(self.face_id >= 0)

    def image(self, values) -> np.ndarray:
        values = np.asarray(values)
        return values.reshape((self.height, self.width) + values.shape[1:])


def _triple_weights(d, P0, P1, P2):
    """Unnormalized barycentrics of the ray ``d`` through triangle ``P0 P1 P2``."""
    return (
        np.einsum("ij,ij->i", d, np.cross(P1, P2)),
        np.einsum("ij,ij->i", d, np.cross(P2, P0)),
        np.einsum("ij,ij->i", d, np.cross(P0, P1)),
    )


def rasterize_fragments(vertices, faces, camera: Camera) -> Fragments:
    """Nearest face per pixel center; ties on depth go to the lower face id."""
    V = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    W, H = camera.width, camera.height
    npix = W * H
    best_depth = np.full(npix, np.inf)
    best_face = np.full(npix, -1, dtype=np.int64)
    best_bary = np.zeros((npix, 3))

    P = camera.to_camera(V)
    uv, depth = camera.project(V)
    ok = np.all(depth[faces] > DEPTH_EPS, axis=1)
    if not np.all(ok):
        log.debug("%d faces cross the camera plane and are skipped", int((~ok).sum()))
    fidx = np.nonzero(ok)[0]
    fuv = uv[faces[fidx]]  # (F, 3, 2)
    cmin = np.maximum(np.ceil(fuv[..., 0].min(axis=1) - 0.5), 0).astype(np.int64)
    cmax = np.minimum(np.floor(fuv[..., 0].max(axis=1) - 0.5), W - 1).astype(np.int64)
    rmin = np.maximum(np.ceil(fuv[..., 1].min(axis=1) - 0.5), 0).astype(np.int64)
    rmax = np.minimum(np.floor(fuv[..., 1].max(axis=1) - 0.5), H - 1).astype(np.int64)
    nx = np.maximum(cmax - cmin + 1, 0)
    ny = np.maximum(rmax - rmin + 1, 0)
    counts = nx * ny
    keep = counts > 0
    fidx, cmin, rmin, nx, counts = fidx[keep], cmin[keep], rmin[keep], nx[keep], counts[keep]
    Kinv = np.linalg.inv(camera.K)

    # fixed chunk order keeps the merge deterministic
    start = 0
    csum = np.cumsum(counts)
    while start < len(fidx):
        base = csum[start - 1] if start else 0
        stop = int(np.searchsorted(csum, base + MAX_CANDIDATES, side="right"))
        stop = max(stop, start + 1)
        sl = slice(start, stop)
        start = stop
        cnt = counts[sl]
        total = int(cnt.sum())
        rep = np.repeat(np.arange(len(cnt)), cnt)
        local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        col = cmin[sl][rep] + local % nx[sl][rep]
        row = rmin[sl][rep] + local // nx[sl][rep]
        face = fidx[sl][rep]
        d = np.stack([col + 0.5, row + 0.5, np.ones(total)], axis=1) @ Kinv.T
        tri = P[faces[face]]
        w0, w1, w2 = _triple_weights(d, tri[:, 0], tri[:, 1], tri[:, 2])
        S = w0 + w1 + w2
        sgn = np.sign(S)
        inside = (S != 0) & (w0 * sgn >= 0) & (w1 * sgn >= 0) & (w2 * sgn >= 0)
        det = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = det / S
        inside &= z > DEPTH_EPS
        if not np.any(inside):
            continue
        pix = (row * W + col)[inside]
        z = z[inside]
        face = face[inside]
        bary = np.stack([w0, w1, w2], axis=1)[inside] / S[inside, None]
        order = np.lexsort((face, z, pix))
        pix, z, face, bary = pix[order], z[order], face[order], bary[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, z, face, bary = pix[first], z[first], face[first], bary[first]
        better = (z < best_depth[pix]) | ((z == best_depth[pix]) & (face < best_face[pix]))
        pix, z, face, bary = pix[better], z[better], face[better], bary[better]
        best_depth[pix] = z
        best_face[pix] = face
        best_bary[pix] = bary
    return Fragments(best_face, best_depth, best_bary, W, H)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return ad.tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def barycentrics(vertices, faces, camera: Camera, pixels, face_ids) -> Tensor:
    """Perspective-correct weights at pixel centers, differentiable in ``vertices``."""
    Vt = _as_tensor(vertices)
    Pc = camera.to_camera(Vt)
    d = camera.pixel_rays(pixels)
    tri = ad.gather(Pc, np.asarray(faces)[face_ids])  # (n, 3, 3)
    P0, P1, P2 = tri[:, 0], tri[:, 1], tri[:, 2]
    dt = ad.tensor(d, dtype=Pc.dtype)
    w = ad.stack([ad.dot(dt, ad.cross(P1, P2)), ad.dot(dt, ad.cross(P2, P0)),
                  ad.dot(dt, ad.cross(P0, P1))], axis=1)
    S = ad.tsum(w, axis=1, keepdims=True)
    return w / S


def interpolate(attr, faces, face_ids, bary: Tensor) -> Tensor:
    """``sum_k bary[:, k] * attr[faces[face_ids, k]]``."""
    At = _as_tensor(attr, dtype=bary.dtype)
    corner = ad.gather(At, np.asarray(faces)[face_ids])  # (n, 3, C)
    return ad.tsum(corner * ad.reshape(bary, bary.shape + (1,)), axis=1)


def vertex_normals_t(vertices, faces) -> Tensor:
    """Area-weighted vertex normals as a differentiable function of positions."""
    Vt = _as_tensor(vertices)
    faces = np.asarray(faces)
    tri = ad.gather(Vt, faces)
    cr = ad.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    acc = ad.scatter_add(ad.concat([cr, cr, cr], axis=0), faces.T.reshape(-1), len(Vt.data))
    return ad.normalize(acc, axis=-1)


# -- soft silhouette ----------------------------------------------------------

def contour_edges(vertices, mesh: Mesh, camera: Camera) -> np.ndarray:
    """Edges separating a front-facing face from a back-facing one, plus open
    boundary edges of faces in front of the camera."""
    P = camera.to_camera(np.asarray(vertices, dtype=np.float64))
    tri = P[mesh.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    front = np.einsum("ij,ij->i", n, tri[:, 0]) < 0
    visible = np.all(tri[..., 2] > DEPTH_EPS, axis=1)
    front &= visible
    ef = mesh.edge_faces
    has_l, has_r = ef[:, 0] >= 0, ef[:, 1] >= 0
    fl = has_l & front[np.maximum(ef[:, 0], 0)]
    fr = has_r & front[np.maximum(ef[:, 1], 0)]
    interior = has_l & has_r & (fl != fr)
    boundary = has_l ^ has_r
    boundary &= np.where(has_l, visible[np.maximum(ef[:, 0], 0)], visible[np.maximum(ef[:, 1], 0)])
    return mesh.edges[interior | boundary]


def mask_band(coverage_img: np.ndarray, band: float) -> np.ndarray:
    """Pixels within ``band`` pixels of the hard coverage boundary."""
    if coverage_img.all() or not coverage_img.any():
        return np.zeros(coverage_img.shape, dtype=bool)
    d_in = distance_transform_edt(coverage_img)
    d_out = distance_transform_edt(~coverage_img)
    return np.where(coverage_img, d_in, d_out) <= band


def _segment_nearest(p, a, b):
    """Nearest segment per point (brute force) and the projection parameter."""
    best = np.full(len(p), np.inf)
    best_e = np.zeros(len(p), dtype=np.int64)
    step = max(1, 4_000_000 // max(len(a), 1))
    ab = b - a
    L2 = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
    for s in range(0, len(p), step):
        q = p[s:s + step, None, :]
        t = np.clip(np.einsum("pei,ei->pe", q - a[None], ab) / L2, 0.0, 1.0)
        diff = q - (a[None] + t[..., None] * ab[None])
        dist = np.einsum("pei,pei->pe", diff, diff)
        e = np.argmin(dist, axis=1)
        best_e[s:s + step] = e
        best[s:s + step] = dist[np.arange(len(e)), e]
    ab_sel = ab[best_e]
    t = np.einsum("ij,ij->i", p - a[best_e], ab_sel) / L2[best_e]
    return best_e, t


def soft_mask(vertices, mesh: Mesh, camera: Camera, k: float = 30.0, band: float = 3.0,
              fragments: Fragments | None = None) -> Tensor:
    """Soft silhouette over all pixels (flattened row-major).

    Pixels within ``band`` of the hard boundary get ``sigmoid(k * d)`` with
    ``d`` the screen distance to the nearest projected contour edge, signed
    positive on covered pixels.  Other pixels keep their hard 0/1 value.
    Every mask pixel on a contour edge is exactly 0.5.
    """
    if k <= 0:
        raise ValueError("soft mask sharpness must be positive")
    Vt = _as_tensor(vertices)
    V = np.asarray(Vt.data, dtype=np.float64)
    if fragments is None:
        fragments = rasterize_fragments(V, mesh.faces, camera)
    cov = fragments.coverage
    base = cov.astype(Vt.dtype)
    W, H = camera.width, camera.height
    band_mask = mask_band(cov.reshape(H, W), band).reshape(-1)
    edges = contour_edges(V, mesh, camera)
    if not band_mask.any() or len(edges) == 0:
        return ad.tensor(base)
    pix = np.nonzero(band_mask)[0]
    p = np.stack([pix % W + 0.5, pix // W + 0.5], axis=1)
    uv, _ = camera.project(V)
    e_idx, t = _segment_nearest(p, uv[edges[:, 0]], uv[edges[:, 1]])
    sign = np.where(cov[pix], 1.0, -1.0)

    uv_t, _ = camera.project(Vt)
    chosen = edges[e_idx]
    a = ad.gather(uv_t, chosen[:, 0])
    b = ad.gather(uv_t, chosen[:, 1])
    pt = ad.tensor(p, dtype=uv_t.dtype)
    interior = (t > 0.0) & (t < 1.0)
    dist_parts = []
    order = []
    if interior.any():
        i = np.nonzero(interior)[0]
        ab = b[i] - a[i]
        ap = pt[i] - a[i]
        cr = ab[:, 0] * ap[:, 1] - ab[:, 1] * ap[:, 0]
        dist_parts.append(ad.abs(cr) / ad.norm(ab, axis=-1))
        order.append(i)
    if (~interior).any():
        i = np.nonzero(~interior)[0]
        end = ad.where(np.asarray(t[i] <= 0.0)[:, None], a[i], b[i])
        diff = pt[i] - end
        dist_parts.append(ad.sqrt(ad.tsum(diff * diff, axis=-1) + 1e-24))
        order.append(i)
    dist = ad.scatter_add(ad.concat(dist_parts, axis=0), np.concatenate(order), len(pix))
    sig = ad.sigmoid(dist * ad.tensor(k * sign, dtype=dist.dtype))
    delta = sig - ad.tensor(base[pix], dtype=sig.dtype)
    return ad.tensor(base, dtype=sig.dtype) + ad.scatter_add(delta, pix, W * H)


# -- G-buffer -----------------------------------------------------------------

@dataclass
class GBuffer:
    """Rasterized channels at a set of pixels (flat row-major indices).

    ``covered`` marks pixels with a visible face; geometry channels
    (``position``, ``normal``, ``feature``, ``bary``) hold one row per covered
    pixel, in the order of ``pixels[covered]``.  ``mask`` is the full-image
    soft silhouette when requested.
    """

    pixels: np.ndarray
    covered: np.ndarray
    face_id: np.ndarray
    bary: Tensor
    position: Tensor
    normal: Tensor
    feature: Tensor | None
    mask: Tensor | None
    fragments: Fragments

    @property
    def empty(self) -> bool:
        return self.fragments.empty

    def scatter(self, rows: np.ndarray, channels: int | None = None, fill=0.0) -> np.ndarray:
        """Full ``(H, W, C)`` image from per-covered-pixel rows."""
        rows = np.asarray(rows)
        fr = self.fragments
        c = rows.shape[1] if channels is None else channels
        out = np.full((fr.height * fr.width, c), fill, dtype=np.float64)
        out[self.pixels[self.covered]] = rows
        return out.reshape(fr.height, fr.width, c)


def rasterize(mesh: Mesh, camera: Camera, features=None, vertices=None, pixels=None,
              soft_k: float | None = 30.0, band: float = 3.0,
              fragments: Fragments | None = None) -> GBuffer:
    """G-buffer of ``mesh`` (positions overridable by a ``vertices`` Tensor).

    ``pixels`` restricts the geometry channels to a subset (default: all
    covered pixels).  An off-screen mesh yields an empty buffer with an
    all-zero mask.
    """
    Vt = _as_tensor(mesh.vertices if vertices is None else vertices)
    V = np.asarray(Vt.data, dtype=np.float64)
    frags = fragments if fragments is not None else rasterize_fragments(V, mesh.faces, camera)
    if frags.empty:
        log.warning("mesh projects outside the image")
    if pixels is None:
        pixels = np.nonzero(frags.coverage)[0]
    pixels = np.asarray(pixels, dtype=np.int64)
    fid = frags.face_id[pixels]
    covered = fid >= 0
    cp = pixels[covered]
    cf = fid[covered]
    bary = barycentrics(Vt, mesh.faces, camera, cp, cf)
    position = interpolate(Vt, mesh.faces, cf, bary)
    vn = vertex_normals_t(Vt, mesh.faces)
    normal = ad.normalize(interpolate(vn, mesh.faces, cf, bary), axis=-1)
    feature = None
    if features is not None:
        feature = interpolate(features, mesh.faces, cf, bary)
    mask = None
    if soft_k is not None:
        mask = soft_mask(Vt, mesh, camera, k=soft_k, band=band, fragments=frags)
    return GBuffer(pixels, covered, fid, bary, position, normal, feature, mask, frags)
