"""Dual deferred shaders: a feature shader ``h_z`` and a geometry shader ``h_g``.

``h_g`` sees the base colour of ``h_z`` only through a detach, so photometric
error on its output can move the geometry but never the feature shader.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import MLP, Tensor
from ..encode import octave_encode
from .camera import Camera
from .raster import GBuffer

NORMAL_OCTAVES = 3
VIEW_OCTAVES = 4
GEOM_WIDTH = 3 + 6 * NORMAL_OCTAVES + 6 * VIEW_OCTAVES


class ShaderPair:
    def __init__(self, z_width: int, hidden=(256, 256, 256), seed: int = 21, dtype=np.float32,
                 zero_output: bool = True):
        rng = np.random.default_rng(seed)
        self.z_width = int(z_width)
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype).type
        self.h_z = MLP([GEOM_WIDTH + self.z_width, *self.hidden, 3], "relu", rng=rng,
                       zero_output=zero_output, dtype=self.dtype, name="h_z")
        self.h_g = MLP([GEOM_WIDTH + 3, *self.hidden, 3], "relu", rng=rng,
                       zero_output=zero_output, dtype=self.dtype, name="h_g")

    def parameters(self):
        return self.h_z.parameters() + self.h_g.parameters()

    def state_arrays(self) -> dict:
        return {p.name: p.data for p in self.parameters()}

    def state_meta(self) -> dict:
        return {"z_width": self.z_width, "hidden": list(self.hidden), "seed": self.seed,
                "dtype": np.dtype(self.dtype).name}

    @classmethod
    def from_state(cls, arrays: dict, meta: dict) -> "ShaderPair":
        sp = cls(meta["z_width"], tuple(meta["hidden"]), meta["seed"], np.dtype(meta["dtype"]).type)
        for p in sp.parameters():
            p.data = np.array(arrays[p.name], dtype=sp.dtype)
        return sp


def geometry_inputs(x: Tensor, n: Tensor, camera: Camera) -> Tensor:
    """``[x, octave(n), octave(omega)]`` with ``omega`` the unit direction to the camera."""
    center = ad.tensor(camera.center, dtype=x.dtype)
    omega = ad.normalize(center - x, axis=-1)
    return ad.concat([x, octave_encode(n, NORMAL_OCTAVES), octave_encode(omega, VIEW_OCTAVES)], axis=-1)


def shade_points(x: Tensor, n: Tensor, z: Tensor, camera: Camera, shaders: ShaderPair):
    """``(I_z, I)`` rows for surface samples; ``I`` sees ``I_z`` through a detach."""
    if z.shape[-1] != shaders.z_width:
        raise ValueError(f"feature width {z.shape[-1]} does not match shader z_width {shaders.z_width}")
    geo = geometry_inputs(x, n, camera)
    dt = shaders.dtype
    geo32 = ad.astype(geo, dt)
    base = ad.sigmoid(shaders.h_z(ad.concat([geo32, ad.astype(z, dt)], axis=-1)))
    final = ad.sigmoid(shaders.h_g(ad.concat([geo32, ad.detach(base)], axis=-1)))
    return base, final


def shade(gbuffer: GBuffer, camera: Camera, shaders: ShaderPair):
    """Base and final colours at ``gbuffer.pixels`` (black where uncovered)."""
    n = len(gbuffer.pixels)
    idx = np.nonzero(gbuffer.covered)[0]
    if len(idx) == 0 or gbuffer.feature is None:
        zero = ad.tensor(np.zeros((n, 3)), dtype=shaders.dtype)
        return zero, zero
    base, final = shade_points(gbuffer.position, gbuffer.normal, gbuffer.feature, camera, shaders)
    return ad.scatter_add(base, idx, n), ad.scatter_add(final, idx, n)
