from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from ensurf.geometry import Mesh


def convex_hull_mesh(points) -> Mesh:
    """Outward-oriented closed triangle mesh of a random point cloud."""
    pts = np.asarray(points, dtype=np.float64)
    hull = ConvexHull(pts)
    faces = hull.simplices.copy()
    c = pts.mean(axis=0)
    tri = pts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, tri[:, 0] - c) < 0
    faces[flip] = faces[flip][:, ::-1]
    used = np.unique(faces)
    remap = np.full(len(pts), -1)
    remap[used] = np.arange(len(used))
    return Mesh(pts[used], remap[faces])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("eigcache"))


def tiny_config(cache_dir=None, **schedule):
    """Seconds-scale training config for unit tests."""
    from ensurf.fields import FieldConfig
    from ensurf.train import Schedule, TrainConfig

    sched = dict(coarse_iters=4, fine_iters=4, coarse_mesh_level=2, fine_mesh_level=3, views_per_step=3,
                 pixel_fraction=0.2)
    sched.update(schedule)
    field = FieldConfig(hidden=32, z_width=8, coarse_rff_freqs=16, fine_rff_freqs=16, basis_level=2,
                        eigen_d=30, eigen_low=10, eigen_high=5, delta_ramp=2)
    return TrainConfig(schedule=Schedule(**sched), field=field, shader_hidden=(32, 32), cache_dir=cache_dir)


@pytest.fixture(scope="session")
def tiny_scene():
    from ensurf.scenes import make_scene

    return make_scene("ellipsoid", views=6, resolution=32, n_points=10_000, seed=3)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one pass/fail line per acceptance criterion (echoed in the summary)."""

    def report(name: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
