"""Cameras, rasterization, soft silhouettes and neural deferred shading."""

from .camera import Camera, intrinsics, look_at
from .imageio import normal_map, psnr, read_float_buffer, read_png, write_float_buffer, write_png
from .raster import (
    Fragments, GBuffer, barycentrics, contour_edges, interpolate, mask_band, rasterize,
    rasterize_fragments, soft_mask, vertex_normals_t,
)
from .shading import ShaderPair, geometry_inputs, shade, shade_points


def project(camera: Camera, points):
    return camera.project(points)


def unproject(camera: Camera, uv, depth):
    return camera.unproject(uv, depth)


__all__ = [
    "Camera", "intrinsics", "look_at", "project", "unproject", "Fragments", "GBuffer",
    "barycentrics", "contour_edges", "interpolate", "mask_band", "rasterize",
    "rasterize_fragments", "soft_mask", "vertex_normals_t", "ShaderPair", "geometry_inputs",
    "shade", "shade_points", "normal_map", "psnr", "read_float_buffer", "read_png",
    "write_float_buffer", "write_png",
]
