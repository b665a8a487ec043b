"""Cotangent Laplacian, lumped mass and Laplace-Beltrami eigenbases.

The generalized problem ``W phi = lam A phi`` is reduced to a standard
symmetric one with ``y = A^{1/2} phi`` and solved densely.  Eigenfunctions
are piecewise linear on the mesh they were computed on and can be evaluated
at arbitrary sphere points by barycentric interpolation.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg
from scipy.spatial import cKDTree

from .errors import NumericError, TopologyError, VersionError
from .geometry import Mesh

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LaplacianPair:
    """Cotan stiffness ``W`` (PSD, zero row sums) and diagonal lumped mass."""

    W: sp.csr_matrix
    mass: np.ndarray  # diagonal of A
    mesh_id: str = ""

    @property
    def A(self) -> sp.dia_matrix:
        return sp.diags(self.mass)


@dataclass(frozen=True)
class SpectralBasis:
    eigenvalues: np.ndarray  # (d,)
    eigenfunctions: np.ndarray  # (n_vertices, d)
    source_mesh_id: str
    indices: np.ndarray | None = None  # positions in the full computed basis

    @property
    def d(self) -> int:
        return len(self.eigenvalues)

    @property
    def n_vertices(self) -> int:
        return self.eigenfunctions.shape[0]


@dataclass(frozen=True)
class EigenPolicy:
    """Low prefix of ``low_count`` functions plus a contiguous high band."""

    low_count: int
    high_start: int | None = None
    high_stop: int | None = None

    def indices(self, d: int) -> np.ndarray:
        if self.low_count < 0 or self.low_count > d:
            raise ValueError(f"low band {self.low_count} outside basis of size {d}")
        low = np.arange(self.low_count)
        if self.high_start is None:
            return low
        start, stop = self.high_start, self.high_stop if self.high_stop is not None else d
        if not (0 <= start <= stop <= d):
            raise ValueError(f"high band [{start}, {stop}) outside basis of size {d}")
        if start < self.low_count:
            raise ValueError(f"high band [{start}, {stop}) overlaps low band [0, {self.low_count})")
        return np.concatenate([low, np.arange(start, stop)])

    @classmethod
    def desk(cls, d: int = 400, low: int = 120, high: int = 80) -> "EigenPolicy":
        return cls(low, d - high, d)

    @classmethod
    def paper_scale(cls) -> "EigenPolicy":
        return cls(820, 8500, 10000)


def _corner_cotangents(p):
    """Cotangent of the angle at each corner of each triangle, ``(F, 3)``."""
    cots = np.empty(p.shape[:2])
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        dot = np.einsum("ij,ij->i", a, b)
        cots[:, k] = np.divide(dot, cross, out=np.zeros_like(dot), where=cross > 0)
    return cots


def mixed_voronoi_mass(mesh: Mesh) -> np.ndarray:
    """Per-vertex mixed Voronoi area (obtuse triangles split area/2, area/4)."""
    v, f = mesh.vertices, mesh.faces
    p = v[f]
    cots = _corner_cotangents(p)
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    sq = np.empty_like(cots)  # squared length of the edge opposite corner k
    for k in range(3):
        sq[:, k] = np.sum((p[:, (k + 1) % 3] - p[:, (k + 2) % 3]) ** 2, axis=1)
    contrib = np.empty_like(cots)
    for k in range(3):
        j, l = (k + 1) % 3, (k + 2) % 3
        # edges k-j (opposite l) and k-l (opposite j)
        contrib[:, k] = (sq[:, l] * cots[:, l] + sq[:, j] * cots[:, j]) / 8.0
    obtuse = cots < 0  # cot < 0 <=> angle > 90 degrees
    any_obtuse = obtuse.any(axis=1)
    contrib[any_obtuse] = np.where(
        obtuse[any_obtuse], area[any_obtuse, None] / 2.0, area[any_obtuse, None] / 4.0
    )
    mass = np.zeros(len(v))
    for k in range(3):
        np.add.at(mass, f[:, k], contrib[:, k])
    return mass


def cotan_laplacian(mesh: Mesh) -> LaplacianPair:
    """``W_ij = -(cot a_ij + cot b_ij) / 2``, ``W_ii = -sum_j W_ij``."""
    if not mesh.is_tri:
        raise ValueError("cotan Laplacian needs a triangle mesh")
    if np.any(mesh.edge_face_counts > 2):
        raise TopologyError("non-manifold edge with more than two incident faces")
    v, f = mesh.vertices, mesh.faces
    n = len(v)
    cots = _corner_cotangents(v[f])
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j = f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        w = -0.5 * cots[:, k]
        rows += [i, j]
        cols += [j, i]
        vals += [w, w]
    off = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    W = (off - sp.diags(np.asarray(off.sum(axis=1)).ravel())).tocsr()
    W.sum_duplicates()
    return LaplacianPair(W=W, mass=mixed_voronoi_mass(mesh), mesh_id=mesh.mesh_id)


def _fix_signs(phi: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(phi), axis=0)
    s = np.sign(phi[idx, np.arange(phi.shape[1])])
    s[s == 0] = 1.0
    return phi * s


def eigenbasis(pair: LaplacianPair, d: int, method: str = "dense") -> SpectralBasis:
    """Lowest ``d`` generalized eigenpairs, ascending, A-orthonormal.

    ``method="sparse"`` uses shift-invert Lanczos; it is meant for a handful
    of eigenpairs on meshes too large for the dense solver.
    """
    n = pair.W.shape[0]
    if d < 1 or d > n:
        raise ValueError(f"requested {d} eigenpairs from a {n}-vertex operator")
    if not np.all(np.isfinite(pair.W.data)) or not np.all(np.isfinite(pair.mass)):
        raise NumericError("non-finite entries in Laplacian or mass matrix")
    if np.any(pair.mass <= 0):
        raise NumericError("mass matrix must be strictly positive")
    inv_sqrt = 1.0 / np.sqrt(pair.mass)
    if method == "dense":
        C = pair.W.toarray()
        C *= inv_sqrt[:, None]
        C *= inv_sqrt[None, :]
        C = 0.5 * (C + C.T)
        lam, y = scipy.linalg.eigh(C, subset_by_index=[0, d - 1], driver="evr")
        phi = y * inv_sqrt[:, None]
    elif method == "sparse":
        lam, phi = scipy.sparse.linalg.eigsh(
            pair.W.tocsc(), k=d, M=sp.diags(pair.mass).tocsc(), sigma=-1e-3, which="LM",
            v0=np.ones(n),
        )
        order = np.argsort(lam)
        lam, phi = lam[order], phi[:, order]
        norms = np.sqrt(np.einsum("ij,i,ij->j", phi, pair.mass, phi))
        phi = phi / norms
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    phi = _fix_signs(phi)
    return SpectralBasis(
        eigenvalues=lam, eigenfunctions=phi, source_mesh_id=pair.mesh_id, indices=np.arange(d)
    )


def select_eigenfunctions(basis: SpectralBasis, policy: EigenPolicy) -> SpectralBasis:
    idx = policy.indices(basis.d)
    base_idx = basis.indices if basis.indices is not None else np.arange(basis.d)
    return SpectralBasis(
        eigenvalues=basis.eigenvalues[idx],
        eigenfunctions=basis.eigenfunctions[:, idx],
        source_mesh_id=basis.source_mesh_id,
        indices=base_idx[idx],
    )


def sphere_spectrum(l_max: int) -> np.ndarray:
    """Continuous unit-sphere eigenvalues ``l(l+1)`` repeated ``2l+1`` times."""
    return np.concatenate([np.full(2 * l + 1, l * (l + 1), dtype=np.float64) for l in range(l_max + 1)])


# -- interpolation ---------------------------------------------------------


class PointLocator:
    """Finds the face of a sphere-domain triangle mesh hit by a central ray."""

    def __init__(self, mesh: Mesh, k: int = 12):
        if not mesh.is_tri:
            raise ValueError("point location needs a triangle mesh")
        self.mesh = mesh
        self.k = min(k, mesh.n_faces)
        p = mesh.vertices[mesh.faces]
        c = p.mean(axis=1)
        self._face_tree = cKDTree(c / np.linalg.norm(c, axis=1, keepdims=True))
        self._vert_tree = cKDTree(mesh.vertices)
        # cross products of opposite edge vertices for the triple-product weights
        self._cross = np.stack(
            [np.cross(p[:, 1], p[:, 2]), np.cross(p[:, 2], p[:, 0]), np.cross(p[:, 0], p[:, 1])], axis=1
        )

    def _weights(self, points, faces):
        w = np.einsum("nkj,nj->nk", self._cross[faces], points)
        return w / w.sum(axis=1, keepdims=True)

    def locate(self, points, tol: float = 1e-12):
        """Return ``(vertex_ids (n,3), weights (n,3))`` per point."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        f = self.mesh.faces
        ids = np.zeros((n, 3), dtype=np.int64)
        wts = np.zeros((n, 3))

        dist, vid = self._vert_tree.query(points)
        exact = dist <= tol
        ids[exact] = vid[exact, None]
        wts[exact, 0] = 1.0

        rest = np.flatnonzero(~exact)
        if len(rest) == 0:
            return ids, wts
        q = points[rest]
        _, cand = self._face_tree.query(q / np.linalg.norm(q, axis=1, keepdims=True), k=self.k)
        cand = cand.reshape(len(rest), -1)
        found = np.full(len(rest), -1)
        best_w = np.zeros((len(rest), 3))
        best_score = np.full(len(rest), -np.inf)
        for c in range(cand.shape[1]):
            w = self._weights(q, cand[:, c])
            score = w.min(axis=1)
            better = (score > best_score) & (found < 0)
            best_score[better] = score[better]
            best_w[better] = w[better]
            inside = (score >= -1e-12) & (found < 0)
            found[inside] = cand[inside, c]
            best_w[inside] = w[inside]
        missing = found < 0
        if np.any(missing):
            log.warning("%d points not located inside any face; using nearest face", int(missing.sum()))
            found[missing] = cand[missing, 0]
            w = np.clip(self._weights(q[missing], found[missing]), 0.0, None)
            best_w[missing] = w / w.sum(axis=1, keepdims=True)
        ids[rest] = f[found]
        wts[rest] = best_w
        return ids, wts


def interpolate_to_points(basis: SpectralBasis, mesh: Mesh, points, locator: PointLocator | None = None,
                          values: np.ndarray | None = None) -> np.ndarray:
    """Barycentric evaluation of per-vertex values at unit-sphere points."""
    if basis.source_mesh_id != mesh.mesh_id:
        raise ValueError("spectral basis was not computed on this mesh")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(points, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("interpolation points must lie on the unit sphere")
    locator = locator or PointLocator(mesh)
    ids, wts = locator.locate(points)
    vals = basis.eigenfunctions if values is None else values
    return np.einsum("nk,nkd->nd", wts, vals[ids])


# -- binary cache ----------------------------------------------------------

_CACHE_MAGIC = b"ENSEIGB\x00"
_CACHE_VERSION = 1
_HEADER = struct.Struct("<8sI32sII")


def save_basis(basis: SpectralBasis, path) -> None:
    """Header (magic, version, mesh hash, d, n) followed by little-endian f64 payload."""
    digest = bytes.fromhex(basis.source_mesh_id)[:32].ljust(32, b"\x00")
    header = _HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, digest, basis.d, basis.n_vertices)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(basis.eigenvalues, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.eigenfunctions, dtype="<f8").tobytes())


def load_basis(path, mesh_id: str | None = None) -> SpectralBasis:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise VersionError(f"{path}: truncated eigenbasis cache")
    magic, version, digest, d, n = _HEADER.unpack_from(data)
    if magic != _CACHE_MAGIC or version != _CACHE_VERSION:
        raise VersionError(f"{path}: not an eigenbasis cache of version {_CACHE_VERSION}")
    stored_id = digest.hex()
    if mesh_id is not None and stored_id != mesh_id:
        raise VersionError(f"{path}: cache belongs to another mesh")
    expected = _HEADER.size + 8 * d * (n + 1)
    if len(data) != expected:
        raise VersionError(f"{path}: payload size {len(data)} != {expected}")
    off = _HEADER.size
    lam = np.frombuffer(data, dtype="<f8", count=d, offset=off).astype(np.float64)
    phi = np.frombuffer(data, dtype="<f8", count=d * n, offset=off + 8 * d).reshape(n, d).astype(np.float64)
    return SpectralBasis(lam, phi, stored_id, np.arange(d))


DENSE_MAX_VERTICES = 5000


def cached_eigenbasis(mesh: Mesh, d: int, cache_dir=None) -> SpectralBasis:
    """Eigenbasis of ``mesh``, read from / written to ``cache_dir`` when given.

    Meshes above ``DENSE_MAX_VERTICES`` use the sparse shift-invert solver.
    """
    path = None
    if cache_dir is not None:
        key = hashlib.sha256(f"{mesh.mesh_id}:{d}".encode()).hexdigest()[:20]
        path = Path(cache_dir) / f"eig_{key}_{d}.bin"
        if path.exists():
            try:
                return load_basis(path, mesh.mesh_id)
            except VersionError as exc:
                log.warning("discarding eigenbasis cache: %s", exc)
    method = "dense" if mesh.n_vertices <= DENSE_MAX_VERTICES else "sparse"
    basis = eigenbasis(cotan_laplacian(mesh), d, method=method)
    if path is not None:
        save_basis(basis, path)
    return basis
