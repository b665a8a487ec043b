"""Triangle/quad surface meshes on the sphere domain and mesh measurements.

Faces are stored as a dense ``(F, k)`` integer array with ``k`` = 3 (triangles)
or 4 (quads), oriented counter-clockwise when seen from outside.  Mesh objects
are immutable: the arrays are flagged read-only and derived connectivity is
computed lazily and cached.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import CapacityError, ObjParseError, TopologyError

log = logging.getLogger(__name__)

ICOSPHERE_MAX_LEVEL = 8
QUAD_SPHERE_MAX_RES = 1024

_PHI = (1.0 + 5.0**0.5) / 2.0
_ICO_VERTS = np.array(
    [
        (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
        (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
        (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


class Mesh:
    """Indexed polygon mesh with uniform face arity (3 or 4)."""

    def __init__(self, vertices, faces, name: str | None = None):
        v = np.array(vertices, dtype=np.float64, copy=True)
        f = np.array(faces, dtype=np.int64, copy=True)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must have shape (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] not in (3, 4):
            raise ValueError(f"faces must have shape (F, 3) or (F, 4), got {f.shape}")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            srt = np.sort(f, axis=1)
            if np.any(srt[:, 1:] == srt[:, :-1]):
                raise ValueError("degenerate face with repeated vertex index")
        v.flags.writeable = False
        f.flags.writeable = False
        self.vertices = v
        self.faces = f
        self.name = name

    def __repr__(self):
        kind = "tri" if self.is_tri else "quad"
        return f"Mesh({kind}, V={self.n_vertices}, F={self.n_faces})"

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def is_tri(self) -> bool:
        return self.faces.shape[1] == 3

    def with_vertices(self, vertices) -> "Mesh":
        """Same connectivity, new positions."""
        return Mesh(vertices, self.faces, name=self.name)

    @cached_property
    def mesh_id(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.faces, dtype="<i8").tobytes())
        return h.hexdigest()

    @cached_property
    def _half_edges(self):
        f = self.faces
        k = f.shape[1]
        src = f.reshape(-1)
        dst = np.roll(f, -1, axis=1).reshape(-1)
        face_of = np.repeat(np.arange(len(f)), k)
        lo = np.minimum(src, dst)
        hi = np.maximum(src, dst)
        pairs = np.stack([lo, hi], axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        return edges, inverse, src, dst, face_of

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(E, 2)`` with ``i < j``, sorted."""
        return self._half_edges[0]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def edge_face_counts(self) -> np.ndarray:
        edges, inverse, *_ = self._half_edges
        return np.bincount(inverse, minlength=len(edges))

    @cached_property
    def edge_faces(self) -> np.ndarray:
        """Per edge ``(left, right)`` face indices.

        The left face is the one traversing ``(i, j)`` (``i < j``) in its own
        winding order; the right face traverses ``(j, i)``.  Boundary edges get
        ``-1`` on the missing side.
        """
        edges, inverse, src, dst, face_of = self._half_edges
        if np.any(self.edge_face_counts > 2):
            raise TopologyError("non-manifold edge with more than two incident faces")
        out = np.full((len(edges), 2), -1, dtype=np.int64)
        forward = src < dst
        left_slots = inverse[forward]
        right_slots = inverse[~forward]
        if len(np.unique(left_slots)) != len(left_slots) or len(np.unique(right_slots)) != len(right_slots):
            raise TopologyError("inconsistent face orientation")
        out[left_slots, 0] = face_of[forward]
        out[right_slots, 1] = face_of[~forward]
        return out

    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_faces

    def is_closed(self) -> bool:
        return bool(np.all(self.edge_face_counts == 2))

    def is_watertight(self) -> bool:
        """Closed and consistently oriented (each edge used once per direction)."""
        if not self.is_closed():
            return False
        try:
            ef = self.edge_faces
        except TopologyError:
            return False
        return bool(np.all(ef >= 0))

    def require_closed(self):
        counts = self.edge_face_counts
        if not np.all(counts == 2):
            bad = int(np.sum(counts != 2))
            raise TopologyError(f"{bad} edges do not have exactly two incident faces")

    def triangulated(self) -> "Mesh":
        """Split quads along the 0-2 diagonal; triangle meshes are returned as is."""
        if self.is_tri:
            return self
        f = self.faces
        tris = np.concatenate([f[:, [0, 1, 2]], f[:, [0, 2, 3]]], axis=0)
        order = np.stack([np.arange(len(f)), np.arange(len(f)) + len(f)], axis=1).reshape(-1)
        return Mesh(self.vertices, tris[order], name=self.name)

    def mean_edge_length(self) -> float:
        e = self.edges
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())


def _midpoint_split(vertices, faces, project):
    mesh = Mesh(vertices, faces)
    mesh.require_closed()
    edges, inverse, *_ = mesh._half_edges
    nv = len(vertices)
    mids = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])
    new_v = np.concatenate([vertices, mids], axis=0)
    # half-edge k of face f runs corner k -> corner k+1
    e_id = inverse.reshape(-1, 3) + nv
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = e_id[:, 0], e_id[:, 1], e_id[:, 2]
    new_f = np.stack(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([b, bc, ab], axis=1),
            np.stack([c, ca, bc], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    if project:
        norms = np.linalg.norm(new_v, axis=1, keepdims=True)
        # vertices already on the sphere keep their exact bits so levels nest
        keep = np.abs(norms - 1.0) <= 1e-12
        keep[nv:] = False
        new_v = np.where(keep, new_v, new_v / norms)
    return new_v, new_f


def subdivide(mesh: Mesh, project_to_sphere: bool = False) -> Mesh:
    """1-to-4 midpoint split (no smoothing); old vertices keep their indices.

    New vertex ``V + e`` sits on edge ``e`` of ``mesh.edges``.
    """
    if not mesh.is_tri:
        raise ValueError("subdivide expects a triangle mesh")
    v, f = _midpoint_split(np.asarray(mesh.vertices), np.asarray(mesh.faces), project_to_sphere)
    return Mesh(v, f)


def icosahedron() -> Mesh:
    v = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    return Mesh(v, _ICO_FACES, name="icosphere-0")


def icosphere(level: int, max_level: int = ICOSPHERE_MAX_LEVEL) -> Mesh:
    """Unit icosphere with ``10 * 4**level + 2`` vertices.

    Vertex indices are nested: the vertices of level ``k`` are the first
    ``10 * 4**k + 2`` vertices of every finer level.
    """
    if level < 0:
        raise ValueError("level must be non-negative")
    if level > max_level:
        raise CapacityError(f"icosphere level {level} exceeds cap {max_level}")
    v = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    f = _ICO_FACES
    for _ in range(level):
        v, f = _midpoint_split(v, f, project=True)
    return Mesh(v, f, name=f"icosphere-{level}")


def quad_sphere(n: int) -> Mesh:
    """Equiangular cubed-sphere quad mesh with ``6 n**2 + 2`` vertices."""
    if n < 1:
        raise ValueError("quad sphere resolution must be >= 1")
    if n > QUAD_SPHERE_MAX_RES:
        raise CapacityError(f"quad sphere resolution {n} exceeds cap {QUAD_SPHERE_MAX_RES}")
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    u = 2 * ii - n
    w = 2 * jj - n
    lattice = []
    quads = []
    offset = 0
    for axis in range(3):
        for sign in (-1, 1):
            pts = np.zeros((n + 1, n + 1, 3), dtype=np.int64)
            a1, a2 = [k for k in range(3) if k != axis]
            pts[..., axis] = sign * n
            pts[..., a1] = u
            pts[..., a2] = w
            lattice.append(pts.reshape(-1, 3))
            idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1) + offset
            q = np.stack(
                [idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]], axis=-1
            ).reshape(-1, 4)
            quads.append(q)
            offset += (n + 1) ** 2
    lattice = np.concatenate(lattice)
    quads = np.concatenate(quads)
    uniq, inverse = np.unique(lattice, axis=0, return_inverse=True)
    quads = inverse.reshape(-1)[quads]
    cube = uniq.astype(np.float64) / n
    v = np.tan(cube * (np.pi / 4.0))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    p = v[quads]
    normal = np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 1])
    flip = np.einsum("ij,ij->i", normal, p.mean(axis=1)) < 0
    quads[flip] = quads[flip][:, ::-1]
    return Mesh(v, quads, name=f"quadsphere-{n}")


def _face_cross(vertices, faces):
    p = vertices[faces]
    if faces.shape[1] == 3:
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    # Newell-style normal of a (possibly non-planar) quad via its diagonals
    return np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 1])


def face_areas(mesh: Mesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(_face_cross(mesh.vertices, mesh.faces), axis=1)


def face_normals(mesh: Mesh, eps: float = 1e-300) -> np.ndarray:
    """Unit face normals; zero-area faces get a zero vector."""
    c = _face_cross(mesh.vertices, mesh.faces)
    norm = np.linalg.norm(c, axis=1, keepdims=True)
    out = np.zeros_like(c)
    ok = norm[:, 0] > eps
    out[ok] = c[ok] / norm[ok]
    return out


def degenerate_faces(mesh: Mesh, eps: float = 1e-300) -> np.ndarray:
    return np.linalg.norm(_face_cross(mesh.vertices, mesh.faces), axis=1) <= eps


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    c = _face_cross(mesh.vertices, mesh.faces)
    acc = np.zeros_like(mesh.vertices)
    for k in range(mesh.faces.shape[1]):
        np.add.at(acc, mesh.faces[:, k], c)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 0)


@dataclass(frozen=True)
class TriangleQuality:
    inradius: float
    circumradius: float
    normalized_icr: float


def triangle_icr(p0, p1, p2) -> TriangleQuality:
    """Inradius, circumradius and ``2r/R`` of one triangle (0 if degenerate)."""
    p0, p1, p2 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2))
    a = float(np.linalg.norm(p1 - p2))
    b = float(np.linalg.norm(p2 - p0))
    c = float(np.linalg.norm(p0 - p1))
    area = 0.5 * float(np.linalg.norm(np.cross(p1 - p0, p2 - p0)))
    s = 0.5 * (a + b + c)
    if area <= 0.0 or a * b * c == 0.0:
        return TriangleQuality(0.0, float("inf") if area <= 0.0 else 0.0, 0.0)
    r = area / s
    R = a * b * c / (4.0 * area)
    return TriangleQuality(r, R, float(np.clip(2.0 * r / R, 0.0, 1.0)))


def icr_values(mesh: Mesh) -> np.ndarray:
    """Normalized ICR per triangle (quads are split into two triangles)."""
    m = mesh.triangulated()
    p = m.vertices[m.faces]
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    num = (b + c - a) * (c + a - b) * (a + b - c)
    den = a * b * c
    icr = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    icr[degenerate_faces(m)] = 0.0
    return np.clip(icr, 0.0, 1.0)


def icr_stats(values) -> dict:
    """Average and low-quality percentages in the layout of a mesh-quality table."""
    v = np.asarray(values, dtype=np.float64)
    return {
        "average": float(v.mean()),
        "pct_below_0.10": float(100.0 * np.mean(v < 0.10)),
        "pct_below_0.25": float(100.0 * np.mean(v < 0.25)),
        "pct_below_0.90": float(100.0 * np.mean(v < 0.90)),
    }


def chamfer_l1(P, Q) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0 or len(Q) == 0:
        raise ValueError("chamfer_l1 needs two non-empty point sets")
    d_pq, _ = cKDTree(Q).query(P)
    d_qp, _ = cKDTree(P).query(Q)
    return 0.5 * (float(d_pq.mean()) + float(d_qp.mean()))


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform random points on the mesh surface."""
    m = mesh.triangulated()
    area = face_areas(m)
    face = rng.choice(len(area), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    p = m.vertices[m.faces[face]]
    return (1 - r1)[:, None] * p[:, 0] + (r1 * (1 - r2))[:, None] * p[:, 1] + (r1 * r2)[:, None] * p[:, 2]


def closest_points_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest point of each triangle ``(a, b, c)`` to ``p`` (all ``(n, 3)``), by Voronoi region."""
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + v[:, None] * ab + w[:, None] * ac
        # edge regions, then vertex regions (later assignments take precedence)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        out = np.where(on_bc[:, None], b + t_bc[:, None] * (c - b), out)
        t_ac = d2 / (d2 - d6)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(on_ac[:, None], a + t_ac[:, None] * ac, out)
        t_ab = d1 / (d1 - d3)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(on_ab[:, None], a + t_ab[:, None] * ab, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, out)
    return out


def point_mesh_distance(points, mesh: Mesh, k: int = 16) -> np.ndarray:
    """Exact Euclidean distance from each point to the surface of ``mesh``.

    Candidate faces come from a centroid k-d tree; the candidate set grows
    until no unexamined face can be closer than the best one found.
    """
    tri_mesh = mesh.triangulated()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = tri_mesh.vertices[tri_mesh.faces]
    cen = tri.mean(axis=1)
    reach = float(np.linalg.norm(tri - cen[:, None], axis=2).max())
    tree = cKDTree(cen)
    best = np.full(len(pts), np.inf)
    todo = np.arange(len(pts))
    k = min(k, len(cen))
    while len(todo):
        dc, fi = tree.query(pts[todo], k=k)
        dc, fi = dc.reshape(len(todo), -1), fi.reshape(len(todo), -1)
        rep = np.repeat(todo, fi.shape[1])
        f = fi.reshape(-1)
        q = closest_points_on_triangles(pts[rep], tri[f, 0], tri[f, 1], tri[f, 2])
        d = np.linalg.norm(q - pts[rep], axis=1).reshape(len(todo), -1).min(axis=1)
        best[todo] = np.minimum(best[todo], d)
        if k >= len(cen):
            break
        # any face whose centroid lies beyond the k-th one is at least dc_k - reach away
        todo = todo[dc[:, -1] - reach < best[todo]]
        k = min(4 * k, len(cen))
    return best


def surface_chamfer(mesh_a: Mesh, mesh_b: Mesh, n: int, rng: np.random.Generator) -> float:
    """Symmetric Chamfer-L1 with exact point-to-surface distances for ``n`` samples per side."""
    pa = sample_surface(mesh_a, n, rng)
    pb = sample_surface(mesh_b, n, rng)
    return 0.5 * (float(point_mesh_distance(pa, mesh_b).mean()) + float(point_mesh_distance(pb, mesh_a).mean()))


def export_obj(mesh: Mesh, path) -> None:
    path = Path(path)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += ["f " + " ".join(str(i + 1) for i in face) for face in mesh.faces]
    path.write_text("\n".join(lines) + "\n")


def import_obj(path) -> Mesh:
    """Read ``v``/``f`` records of an ASCII OBJ; other records are ignored."""
    path = Path(path)
    verts, faces, face_lines = [], [], []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise ObjParseError(path, line_no, f"bad vertex record: {exc}") from None
                if len(verts[-1]) != 3:
                    raise ObjParseError(path, line_no, "vertex record needs 3 coordinates")
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError:
                        raise ObjParseError(path, line_no, f"bad face index {tok!r}") from None
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) not in (3, 4):
                    raise ObjParseError(path, line_no, f"faces must have 3 or 4 vertices, got {len(idx)}")
                if faces and len(idx) != len(faces[0]):
                    raise ObjParseError(path, line_no, "mixed triangle/quad faces are not supported")
                faces.append(idx)
                face_lines.append(line_no)
    n = len(verts)
    for idx, line_no in zip(faces, face_lines):
        if min(idx) < 0 or max(idx) >= n:
            raise ObjParseError(path, line_no, f"face index out of range (have {n} vertices)")
        if len(set(idx)) != len(idx):
            raise ObjParseError(path, line_no, "degenerate face with repeated index")
    if not faces:
        raise ObjParseError(path, 0, "no faces found")
    return Mesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64), name=path.stem)
