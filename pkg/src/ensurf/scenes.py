"""Synthetic multi-view scenes with analytic star-shaped targets.

Every target is described by a radial function ``r(d)`` over unit directions,
so ray casting reduces to a sign change of ``|p| - r(p / |p|)`` along the ray,
refined by bisection.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DatasetError
from .render.camera import Camera, look_at
from .render.imageio import read_float_buffer, write_float_buffer, write_png

log = logging.getLogger(__name__)

DATASET_VERSION = 1
SHAPE_KINDS = ("ellipsoid", "bumpy_sphere", "rounded_box")
DEFAULT_LIGHT = (0.48, -0.36, 0.8)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class TargetShape:
    kind: str
    params: dict = field(default_factory=dict)
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ConfigurationError(f"unknown shape {self.kind!r}; valid kinds: {', '.join(SHAPE_KINDS)}")

    # -- constructors --------------------------------------------------------
    @classmethod
    def ellipsoid(cls, a=0.9, b=0.6, c=0.6) -> "TargetShape":
        if min(a, b, c) <= 0:
            raise ConfigurationError("ellipsoid semi-axes must be positive")
        return cls("ellipsoid", {"a": float(a), "b": float(b), "c": float(c)})

    @classmethod
    def bumpy_sphere(cls, radius=0.85, amplitude=0.08, frequency=6) -> "TargetShape":
        if not 0 <= amplitude < radius:
            raise ConfigurationError("bump amplitude must lie in [0, radius)")
        return cls("bumpy_sphere", {"radius": float(radius), "amplitude": float(amplitude),
                                    "frequency": int(frequency)})

    @classmethod
    def rounded_box(cls, half_extents=(0.6, 0.5, 0.4), radius=0.15) -> "TargetShape":
        h = [float(x) for x in half_extents]
        if radius <= 0 or radius > min(h):
            raise ConfigurationError("rounding radius must lie in (0, min(half_extents)]")
        return cls("rounded_box", {"half_extents": h, "radius": float(radius)})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetShape":
        return cls(d["kind"], dict(d.get("params", {})), float(d.get("scale", 1.0)))

    # -- geometry ------------------------------------------------------------
    def _box_sdf(self, p):
        h = np.asarray(self.params["half_extents"])
        rho = self.params["radius"]
        q = np.abs(p) - (h - rho)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside - rho

    def radius(self, dirs) -> np.ndarray:
        """Surface distance from the origin along unit directions."""
        d = _unit(dirs)
        if self.kind == "ellipsoid":
            a, b, c = self.params["a"], self.params["b"], self.params["c"]
            r = 1.0 / np.sqrt((d[..., 0] / a) ** 2 + (d[..., 1] / b) ** 2 + (d[..., 2] / c) ** 2)
        elif self.kind == "bumpy_sphere":
            # sectoral harmonic Re((x + iy)^l): extremes exactly +-1 on the equator
            l = self.params["frequency"]
            bump = np.real((d[..., 0] + 1j * d[..., 1]) ** l)
            r = self.params["radius"] + self.params["amplitude"] * bump
        else:
            lo = np.zeros(d.shape[:-1])
            hi = np.full(d.shape[:-1], np.linalg.norm(self.params["half_extents"]) + 1e-9)
            for _ in range(64):
                mid = 0.5 * (lo + hi)
                inside = self._box_sdf(mid[..., None] * d) < 0
                lo = np.where(inside, mid, lo)
                hi = np.where(inside, hi, mid)
            r = 0.5 * (lo + hi)
        return self.scale * r

    def implicit(self, points) -> np.ndarray:
        """Negative inside, positive outside, zero on the surface."""
        p = np.asarray(points, dtype=np.float64)
        if self.kind == "rounded_box":
            return self._box_sdf(p / self.scale) * self.scale
        n = np.linalg.norm(p, axis=-1)
        safe = np.where(n[..., None] > 0, p, np.array([0.0, 0.0, 1.0]))
        return n - self.radius(safe)

    def contains(self, points) -> np.ndarray:
        return self.implicit(points) < 0

    def normals(self, points, h=1e-6) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        g = np.empty_like(p)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[..., k] = (self.implicit(p + e) - self.implicit(p - e)) / (2 * h)
        return _unit(g)

    def max_radius(self, n=20000) -> float:
        return float(self.radius(fibonacci_sphere(n)).max())

    def normalized(self, bound: float = 1.0) -> "TargetShape":
        """Rescaled copy fitting inside the ball of radius ``bound``."""
        m = self.max_radius() / self.scale
        scale = min(1.0, bound / m) if m > 0 else 1.0
        return TargetShape(self.kind, dict(self.params), scale)

    def surface_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-uniform samples: directions accepted with weight ``r^2 / cos``."""
        out = []
        probe = fibonacci_sphere(4096)
        w_probe = self._area_density(probe)
        w_max = 1.25 * float(w_probe.max())
        have = 0
        while have < n:
            d = _unit(rng.normal(size=(max(2 * n, 1024), 3)))
            w = self._area_density(d)
            if w.max() > w_max:
                w_max = 1.25 * float(w.max())
                continue
            keep = rng.uniform(0.0, w_max, size=len(d)) < w
            pts = d[keep] * self.radius(d[keep])[:, None]
            out.append(pts)
            have += len(pts)
        return np.concatenate(out)[:n]

    def _area_density(self, d):
        r = self.radius(d)
        p = d * r[:, None]
        cos = np.abs(np.einsum("ij,ij->i", self.normals(p), d))
        return r ** 2 / np.maximum(cos, 1e-3)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    s = np.sqrt(1.0 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


# -- appearance ---------------------------------------------------------------

@dataclass(frozen=True)
class Albedo:
    """Band-limited trigonometric colour field over directions from the origin."""

    frequency: float = 3.0
    seed: int = 5
    terms: int = 3

    def __call__(self, points) -> np.ndarray:
        d = _unit(points)
        rng = np.random.default_rng(self.seed)
        out = np.full(d.shape[:-1] + (3,), 0.55)
        for _ in range(self.terms):
            w = _unit(rng.normal(size=(3, 3)))
            phase = rng.uniform(0, 2 * np.pi, size=3)
            out += (0.3 / self.terms) * np.sin(self.frequency * d @ w.T + phase)
        return np.clip(out, 0.05, 1.0)

    def to_dict(self):
        return {"frequency": self.frequency, "seed": self.seed, "terms": self.terms}


def lambert(normals, albedo, light) -> np.ndarray:
    l = _unit(light)
    return albedo * np.maximum(normals @ l, 0.0)[..., None]


# -- cameras ------------------------------------------------------------------

def camera_ring(n: int = 24, radius: float = 3.0, elevations=(20.0, 45.0), focal: float = 160.0,
                width: int = 128, height: int = 128) -> list[Camera]:
    """Cameras on elevation rings around the z axis, all looking at the origin."""
    if n < 6:
        raise ConfigurationError("a camera ring needs at least 6 views")
    elevations = list(elevations)
    per = [n // len(elevations) + (1 if i < n % len(elevations) else 0) for i in range(len(elevations))]
    cams = []
    for ring, (elev, count) in enumerate(zip(elevations, per)):
        e = np.deg2rad(elev)
        offset = 0.5 * ring * 2 * np.pi / count
        for k in range(count):
            az = offset + 2 * np.pi * k / count
            eye = radius * np.array([np.cos(e) * np.cos(az), np.cos(e) * np.sin(az), np.sin(e)])
            cams.append(look_at(eye, focal=focal, width=width, height=height))
    return cams


# -- ray casting ---------------------------------------------------------------

def raycast(shape: TargetShape, camera: Camera, samples: int = 256, tol: float = 1e-7):
    """First hit per pixel: ``(hit mask (H*W,), points (H*W, 3))``."""
    Rm = camera.R
    origin = camera.center
    dirs = _unit(camera.pixel_rays() @ Rm)  # world frame
    bound = shape.max_radius() * 1.01 + 1e-6
    b = dirs @ origin
    c = origin @ origin - bound ** 2
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.maximum(-b - sq, 0.0)
    t1 = -b + sq
    pts = np.zeros_like(dirs)
    idx = np.nonzero(hit)[0]
    if len(idx) == 0:
        return hit & False, pts
    ts = t0[idx, None] + (t1 - t0)[idx, None] * np.linspace(0.0, 1.0, samples)[None]
    vals = shape.implicit(origin + ts[..., None] * dirs[idx, None, :])
    inside = vals < 0
    any_in = inside.any(axis=1)
    first = np.argmax(inside, axis=1)
    idx, first, ts = idx[any_in], first[any_in], ts[any_in]
    rows = np.arange(len(idx))
    hi = ts[rows, first]
    lo = ts[rows, np.maximum(first - 1, 0)]
    d = dirs[idx]
    while np.max(hi - lo, initial=0.0) > tol:
        mid = 0.5 * (lo + hi)
        ins = shape.implicit(origin + mid[:, None] * d) < 0
        hi = np.where(ins, mid, hi)
        lo = np.where(ins, lo, mid)
    mask = np.zeros(len(dirs), dtype=bool)
    mask[idx] = True
    pts[idx] = origin + hi[:, None] * d
    return mask, pts


# -- datasets -----------------------------------------------------------------

@dataclass(frozen=True)
class SceneDataset:
    images: np.ndarray  # (N, H, W, 3) float32
    masks: np.ndarray  # (N, H, W) float32 in {0, 1}
    cameras: tuple
    gt_points: np.ndarray  # (M, 3)
    meta: dict

    def __post_init__(self):
        if not (len(self.images) == len(self.masks) == len(self.cameras)):
            raise DatasetError("<memory>", "image, mask and camera counts differ")

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def shape(self) -> TargetShape | None:
        s = self.meta.get("shape")
        return TargetShape.from_dict(s) if s else None


def render_ground_truth(shape: TargetShape, cameras, light=DEFAULT_LIGHT, albedo: Albedo | None = None,
                        n_points: int = 50_000, seed: int = 0) -> SceneDataset:
    albedo = albedo or Albedo()
    images, masks = [], []
    for cam in cameras:
        hit, pts = raycast(shape, cam)
        img = np.zeros((len(hit), 3))
        if hit.any():
            p = pts[hit]
            img[hit] = lambert(shape.normals(p), albedo(p), light)
        images.append(img.reshape(cam.height, cam.width, 3).astype(np.float32))
        masks.append(hit.reshape(cam.height, cam.width).astype(np.float32))
    gt = shape.surface_points(n_points, np.random.default_rng(seed))
    meta = {"shape": shape.to_dict(), "light": [float(x) for x in light], "albedo": albedo.to_dict(),
            "seed": int(seed), "version": DATASET_VERSION}
    return SceneDataset(np.stack(images), np.stack(masks), tuple(cameras), gt, meta)


def save_dataset(ds: SceneDataset, root) -> None:
    root = Path(root)
    for i in range(ds.n_views):
        write_float_buffer(root / "images" / f"view_{i:03d}.f32", ds.images[i])
        write_png(root / "images" / f"view_{i:03d}.png", ds.images[i])
        write_float_buffer(root / "masks" / f"view_{i:03d}.f32", ds.masks[i])
    (root / "cameras.json").write_text(json.dumps([c.to_dict() for c in ds.cameras], indent=1))
    write_float_buffer(root / "gt_points.f32", np.asarray(ds.gt_points)[:, None, :])
    (root / "meta.json").write_text(json.dumps(ds.meta, indent=1, sort_keys=True))


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DatasetError(path, f"cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(path, f"invalid JSON ({exc.msg})") from exc


def load_dataset(root) -> SceneDataset:
    root = Path(root)
    meta = _read_json(root / "meta.json")
    if meta.get("version") != DATASET_VERSION:
        raise DatasetError(root / "meta.json", f"unsupported dataset version {meta.get('version')}")
    try:
        cameras = tuple(Camera.from_dict(c) for c in _read_json(root / "cameras.json"))
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(root / "cameras.json", f"bad camera record ({exc})") from exc
    images = np.stack([read_float_buffer(root / "images" / f"view_{i:03d}.f32") for i in range(len(cameras))])
    masks = np.stack([read_float_buffer(root / "masks" / f"view_{i:03d}.f32")[..., 0]
                      for i in range(len(cameras))])
    gt_path = root / "gt_points.f32"
    gt = read_float_buffer(gt_path)[:, 0, :].astype(np.float64) if gt_path.exists() else np.zeros((0, 3))
    return SceneDataset(images, masks, cameras, gt, meta)


def make_scene(kind: str, views: int = 24, resolution: int = 128, focal: float | None = None,
               n_points: int = 50_000, seed: int = 0, albedo_frequency: float = 3.0, **params) -> SceneDataset:
    """Named preset scene; ``params`` override the shape constructor defaults."""
    ctor = {"ellipsoid": TargetShape.ellipsoid, "bumpy_sphere": TargetShape.bumpy_sphere,
            "rounded_box": TargetShape.rounded_box}.get(kind)
    if ctor is None:
        raise ConfigurationError(f"unknown shape {kind!r}; valid kinds: {', '.join(SHAPE_KINDS)}")
    shape = ctor(**params).normalized()
    f = focal if focal is not None else 1.25 * resolution
    cams = camera_ring(views, 3.0, (20.0, 45.0), f, resolution, resolution)
    return render_ground_truth(shape, cams, albedo=Albedo(frequency=albedo_frequency), n_points=n_points, seed=seed)
