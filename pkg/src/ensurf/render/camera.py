"""Pinhole cameras (OpenCV convention: x right, y down, z forward)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor

DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class Camera:
    K: np.ndarray  # (3, 3)
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray  # world -> camera translation
    width: int
    height: int

    def __post_init__(self):
        for name in ("K", "R", "t"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0 or np.any(np.abs(self.K[[1, 2, 2], [0, 0, 1]]) > 0):
            raise ValueError("intrinsics must be upper triangular with positive focal lengths")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def resolution(self):
        return self.width, self.height

    def to_camera(self, points):
        """World points to camera frame; Tensor in, Tensor out."""
        if isinstance(points, Tensor):
            return ad.matmul(points, ad.tensor(self.R.T, dtype=points.dtype)) + ad.tensor(self.t, dtype=points.dtype)
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def project(self, points):
        """``(uv, depth)``; ``uv`` in pixels with pixel centers at ``i + 0.5``."""
        pc = self.to_camera(points)
        if isinstance(pc, Tensor):
            h = ad.matmul(pc, ad.tensor(self.K.T, dtype=pc.dtype))
            depth = pc[..., 2]
            return h[..., :2] / ad.reshape(h[..., 2], h.shape[:-1] + (1,)), depth
        h = pc @ self.K.T
        depth = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = h[..., :2] / h[..., 2:3]
        return uv, depth

    def visible(self, depth):
        """Points in front of the camera plane (others are excluded from rasterization)."""
        return np.asarray(depth) > DEPTH_EPS

    def unproject(self, uv, depth):
        uv = np.asarray(uv, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        h = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
        pc = (h @ np.linalg.inv(self.K).T) * depth[..., None]
        return (pc - self.t) @ self.R

    def pixel_rays(self, pixels=None):
        """Camera-frame ray directions with unit z for flat pixel indices (row-major)."""
        if pixels is None:
            pixels = np.arange(self.width * self.height)
        pixels = np.asarray(pixels)
        u = pixels % self.width + 0.5
        v = pixels // self.width + 0.5
        h = np.stack([u, v, np.ones_like(u, dtype=np.float64)], axis=-1)
        return h @ np.linalg.inv(self.K).T

    def to_dict(self) -> dict:
        return {
            "K": [float(x) for x in self.K.reshape(-1)],
            "R": [float(x) for x in self.R.reshape(-1)],
            "t": [float(x) for x in self.t],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            K=np.array(d["K"], dtype=np.float64).reshape(3, 3),
            R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
            t=np.array(d["t"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def intrinsics(focal: float, width: int, height: int) -> np.ndarray:
    return np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), focal=160.0, width=128, height=128) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, fwd)) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    # re-orthonormalize to machine precision
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return Camera(K=intrinsics(focal, width, height), R=R, t=-R @ eye, width=width, height=height)
