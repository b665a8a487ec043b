"""Reconstruction metrics: Chamfer-L1, triangle quality and re-render PSNR."""

from __future__ import annotations

import logging

import numpy as np

from .geometry import Mesh, chamfer_l1, icr_stats, icr_values, sample_surface
from .render.imageio import psnr

log = logging.getLogger(__name__)

EVAL_SAMPLES = 10_000


def mesh_quality(mesh: Mesh) -> dict:
    tri = mesh if mesh.is_tri else mesh.triangulated()
    return icr_stats(icr_values(tri))


def chamfer_to_points(mesh: Mesh, gt_points, n_samples: int = EVAL_SAMPLES, seed: int = 0) -> float:
    tri = mesh if mesh.is_tri else mesh.triangulated()
    pts = sample_surface(tri, n_samples, np.random.default_rng(seed))
    return chamfer_l1(pts, gt_points)


def evaluate_mesh(mesh: Mesh, dataset=None, n_samples: int = EVAL_SAMPLES, seed: int = 0) -> dict:
    """Metrics with a fixed schema; ``chamfer_l1`` is ``None`` without GT points."""
    out = {
        "n_vertices": int(mesh.n_vertices),
        "n_faces": int(mesh.n_faces),
        "euler_characteristic": int(mesh.euler_characteristic()),
        "watertight": bool(mesh.is_watertight()),
        "icr": mesh_quality(mesh),
        "chamfer_l1": None,
        "psnr": None,
    }
    if dataset is not None:
        if len(dataset.gt_points) == 0:
            log.warning("dataset has no gt_points; evaluating image metrics only")
        else:
            out["chamfer_l1"] = chamfer_to_points(mesh, dataset.gt_points, n_samples, seed)
    return out


def view_psnr(rendered, dataset, views=None) -> list:
    views = range(dataset.n_views) if views is None else views
    return [psnr(rendered[i], dataset.images[v]) for i, v in enumerate(views)]
