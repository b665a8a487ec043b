"""Positional encodings: random Fourier features, eigenfunctions, octaves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError
from .geometry import Mesh
from .spectral import PointLocator, SpectralBasis, interpolate_to_points


@dataclass(frozen=True)
class RffMatrix:
    B: np.ndarray  # (n_freq, 3)
    sigma: float
    seed: int

    @classmethod
    def sample(cls, n_freq: int, sigma: float, seed: int) -> "RffMatrix":
        B = np.random.default_rng(seed).normal(0.0, sigma, size=(n_freq, 3))
        B.flags.writeable = False
        return cls(B=B, sigma=float(sigma), seed=int(seed))

    @property
    def width(self) -> int:
        return 2 * len(self.B)


def rff_encode(x, rff: RffMatrix):
    """Interleaved ``[cos(b1.x), sin(b1.x), cos(b2.x), ...]``.

    Accepts a numpy array or a Tensor (the result is then differentiable).
    """
    if isinstance(x, Tensor):
        proj = ad.matmul(x, ad.tensor(rff.B.T, dtype=x.dtype))
        pairs = ad.stack([ad.cos(proj), ad.sin(proj)], axis=-1)
        return pairs.reshape(proj.shape[:-1] + (rff.width,))
    x = np.asarray(x, dtype=np.float64)
    proj = x @ rff.B.T
    out = np.empty(proj.shape[:-1] + (rff.width,))
    out[..., 0::2] = np.cos(proj)
    out[..., 1::2] = np.sin(proj)
    return out


def octave_encode(v, octaves: int):
    """``[cos(2^k pi v), sin(2^k pi v)]`` for ``k < octaves``; width ``6 * octaves``.

    Layout per octave: cos of (x, y, z) then sin of (x, y, z).
    """
    freqs = (2.0 ** np.arange(octaves)) * np.pi
    if isinstance(v, Tensor):
        scaled = ad.reshape(v, v.shape[:-1] + (1, 3)) * ad.tensor(freqs[:, None], dtype=v.dtype)
        enc = ad.concat([ad.cos(scaled), ad.sin(scaled)], axis=-1)
        return enc.reshape(v.shape[:-1] + (6 * octaves,))
    v = np.asarray(v, dtype=np.float64)
    scaled = v[..., None, :] * freqs[:, None]
    enc = np.concatenate([np.cos(scaled), np.sin(scaled)], axis=-1)
    return enc.reshape(v.shape[:-1] + (6 * octaves,))


class HybridEncoder:
    """``[intrinsic | extrinsic]`` encoding of domain points.

    Intrinsic channels are eigenfunction values on the domain sphere (looked
    up at mesh vertices, interpolated elsewhere).  Extrinsic channels are RFF
    of an ambient point, which may differ from the domain point.
    """

    def __init__(self, rff: RffMatrix, basis: SpectralBasis, basis_mesh: Mesh,
                 intrinsic_enabled: bool = True, extrinsic_enabled: bool = True,
                 eigenvalue_scaling: bool = False):
        if basis.source_mesh_id != basis_mesh.mesh_id:
            raise ConfigurationError("spectral basis is not bound to the given domain mesh")
        self.rff = rff
        self.basis = basis
        self.basis_mesh = basis_mesh
        self.intrinsic_enabled = intrinsic_enabled
        self.extrinsic_enabled = extrinsic_enabled
        self.eigenvalue_scaling = eigenvalue_scaling
        values = basis.eigenfunctions
        if eigenvalue_scaling:
            lam = np.where(basis.eigenvalues > 1e-8, basis.eigenvalues, np.inf)
            values = values / np.sqrt(lam)[None, :]
            # keep the constant mode instead of zeroing it
            values[:, basis.eigenvalues <= 1e-8] = basis.eigenfunctions[:, basis.eigenvalues <= 1e-8]
        self._values = values
        self._locator = None

    @property
    def d_intrinsic(self) -> int:
        return self.basis.d

    @property
    def d_extrinsic(self) -> int:
        return self.rff.width

    @property
    def width(self) -> int:
        return self.d_intrinsic + self.d_extrinsic

    @property
    def locator(self) -> PointLocator:
        if self._locator is None:
            self._locator = PointLocator(self.basis_mesh)
        return self._locator

    def intrinsic(self, points, vertex_ids=None) -> np.ndarray:
        """Eigenfunction rows at unit-sphere points (zeros when disabled)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not self.intrinsic_enabled:
            return np.zeros((len(points), self.d_intrinsic))
        if vertex_ids is not None:
            vertex_ids = np.asarray(vertex_ids, dtype=np.int64)
            if vertex_ids.max(initial=-1) >= self.basis_mesh.n_vertices or not np.allclose(
                self.basis_mesh.vertices[vertex_ids], points, atol=1e-12, rtol=0
            ):
                raise ConfigurationError("vertex ids do not address the encoder's domain mesh")
            return self._values[vertex_ids]
        return interpolate_to_points(self.basis, self.basis_mesh, points, locator=self.locator,
                                     values=self._values)

    def extrinsic(self, points):
        enc = rff_encode(points, self.rff)
        if self.extrinsic_enabled:
            return enc
        if isinstance(enc, Tensor):
            return ad.tensor(np.zeros(enc.shape), dtype=enc.dtype)
        return np.zeros_like(enc)

    def encode(self, domain_points, extrinsic_points=None, vertex_ids=None):
        """Hybrid rows; a Tensor result when ``extrinsic_points`` is a Tensor."""
        ext_pts = domain_points if extrinsic_points is None else extrinsic_points
        intr = self.intrinsic(domain_points, vertex_ids)
        ext = self.extrinsic(ext_pts)
        if isinstance(ext, Tensor):
            return ad.concat([ad.tensor(intr, dtype=ext.dtype), ext], axis=-1)
        return np.concatenate([intr, ext], axis=-1)


def hybrid_encode(points, encoder: HybridEncoder, vertex_ids=None):
    return encoder.encode(points, vertex_ids=vertex_ids)


def intrinsic_encode(points, encoder: HybridEncoder, vertex_ids=None) -> np.ndarray:
    return encoder.intrinsic(points, vertex_ids)
