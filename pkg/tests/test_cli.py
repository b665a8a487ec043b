from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from ensurf.cli import main
from ensurf.geometry import import_obj
from ensurf.render import read_png

from conftest import tiny_config


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-scene", "--shape", "ellipsoid", "--a", "0.9", "--b", "0.6", "--c", "0.6",
                 "--views", "6", "--res", "24", "--points", "10000", "--out", str(root / "scene")]) == 0
    cfg = tiny_config(str(root / "cache"))
    cfg.save(root / "cfg.json")
    assert main(["train", "--data", str(root / "scene"), "--config", str(root / "cfg.json"),
                 "--out", str(root / "run"), "--threads", "1"]) == 0
    return root


def test_invalid_shape_is_usage_error(capsys, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["gen-scene", "--shape", "torus", "--out", str(tmp_path)])
    assert info.value.code == 2
    err = capsys.readouterr().err
    for kind in ("ellipsoid", "bumpy_sphere", "rounded_box"):
        assert kind in err


def test_gen_scene_outputs(trained):
    scene = trained / "scene"
    cfg = json.loads((scene / "scene_config.json").read_text())
    assert cfg["shape"] == "ellipsoid" and cfg["params"] == {"a": 0.9, "b": 0.6, "c": 0.6}
    assert len(list((scene / "images").glob("*.png"))) == 6


def test_gen_scene_bumpy_alias(capsys, tmp_path):
    code, out = _run(capsys, "gen-scene", "--shape", "bumpy", "--views", "6", "--res", "8", "--points", "100",
                     "--out", tmp_path / "b")
    assert code == 0 and json.loads(out.out)["views"] == 6
    assert json.loads((tmp_path / "b" / "meta.json").read_text())["shape"]["kind"] == "bumpy_sphere"


def test_train_outputs(trained):
    run = trained / "run"
    summary = json.loads((run / "summary.json").read_text())
    assert summary["status"] == "ok" and summary["steps"] == 8
    assert (run / "final.ckpt").exists() and (run / "config.json").exists()


@pytest.mark.parametrize("flag,value,n_vertices,n_faces", [
    ("--tri-level", 5, 10_242, 20_480),
    ("--quad", 41, 10_088, 10_086),
])
def test_extract_counts(capsys, trained, tmp_path, flag, value, n_vertices, n_faces):
    out = tmp_path / "m.obj"
    code, res = _run(capsys, "extract", "--checkpoint", trained / "run" / "final.ckpt", flag, value, "--out", out)
    assert code == 0
    report = json.loads(res.out)
    assert report["n_vertices"] == n_vertices and report["n_faces"] == n_faces
    assert report["euler_characteristic"] == 2 and report["watertight"]
    assert {"average", "pct_below_0.10", "pct_below_0.25", "pct_below_0.90"} <= set(report["icr"])
    assert report["extract_seconds"] >= 0
    assert import_obj(out).n_vertices == n_vertices


def test_eval_schema(capsys, trained, tmp_path):
    code, res = _run(capsys, "eval", "--checkpoint", trained / "run" / "final.ckpt", "--data", trained / "scene",
                     "--out", tmp_path / "e.json")
    assert code == 0
    report = json.loads((tmp_path / "e.json").read_text())
    assert json.loads(res.out) == report
    assert set(report) == {"n_vertices", "n_faces", "euler_characteristic", "watertight", "icr", "chamfer_l1",
                           "psnr", "source"}
    assert report["chamfer_l1"] > 0 and len(report["psnr"]["per_view"]) == 6


def test_eval_identity_baseline_exceeds_gt_mesh(capsys, trained, tmp_path):
    from ensurf.geometry import Mesh, export_obj, icosphere
    from ensurf.scenes import load_dataset

    ds = load_dataset(trained / "scene")
    dom = icosphere(5)
    gt_mesh = Mesh(dom.vertices * ds.shape.radius(dom.vertices)[:, None], dom.faces)
    export_obj(gt_mesh, tmp_path / "gt.obj")
    tri = gt_mesh.vertices[gt_mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1).sum()
    bound = 2 * np.sqrt(area / len(ds.gt_points))
    export_obj(dom, tmp_path / "sphere.obj")
    vals = {}
    for name in ("gt", "sphere"):
        code, res = _run(capsys, "eval", "--mesh", tmp_path / f"{name}.obj", "--data", trained / "scene")
        assert code == 0
        vals[name] = json.loads(res.out)["chamfer_l1"]
    assert vals["gt"] < bound < vals["sphere"]


def test_render_from_training_pose(capsys, trained, tmp_path):
    out = tmp_path / "r.png"
    code, res = _run(capsys, "render", "--checkpoint", trained / "run" / "final.ckpt", "--data", trained / "scene",
                     "--view", 2, "--out", out)
    assert code == 0
    report = json.loads(res.out)
    assert np.isfinite(report["psnr"])
    nrm = read_png(tmp_path / "r_normals.png")
    rgb = read_png(out)
    assert nrm.shape == rgb.shape == (24, 24, 3)
    # covered pixels hold (n + 1) / 2 of unit normals; background stays black
    cov = nrm.sum(axis=-1) > 0
    n = nrm[cov] * 2 - 1
    np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=0.02)


def test_render_novel_pose(capsys, trained, tmp_path):
    from ensurf.render import look_at

    cam = look_at((2.0, 2.0, -1.0), focal=30.0, width=20, height=16)
    (tmp_path / "cam.json").write_text(json.dumps(cam.to_dict()))
    code, _ = _run(capsys, "render", "--checkpoint", trained / "run" / "final.ckpt", "--camera",
                   tmp_path / "cam.json", "--out", tmp_path / "n.png")
    assert code == 0 and read_png(tmp_path / "n.png").shape == (16, 20, 3)


def test_exit_codes(capsys, trained, tmp_path):
    code, res = _run(capsys, "eval", "--mesh", tmp_path / "missing.obj", "--data", trained / "scene")
    assert code == 4
    code, res = _run(capsys, "train", "--data", tmp_path / "nothing", "--out", tmp_path / "o")
    assert code == 4 and "meta.json" in res.err
    (tmp_path / "bad.json").write_text('{"schedule": {"pixel_fraction": 2}}')
    code, _ = _run(capsys, "train", "--data", trained / "scene", "--config", tmp_path / "bad.json",
                   "--out", tmp_path / "o")
    assert code == 2
    code, _ = _run(capsys, "train", "--data", trained / "scene", "--ablate", "nope", "--out", tmp_path / "o")
    assert code == 2
    cfg = replace(tiny_config(str(trained / "cache")), divergence_threshold=-1.0, divergence_patience=2)
    cfg.save(tmp_path / "div.json")
    code, res = _run(capsys, "train", "--data", trained / "scene", "--config", tmp_path / "div.json",
                     "--out", tmp_path / "d")
    assert code == 3 and json.loads(res.out)["status"] == "diverged"
    (tmp_path / "x.ckpt").write_bytes(b"garbage!" * 4)
    code, _ = _run(capsys, "extract", "--checkpoint", tmp_path / "x.ckpt", "--out", tmp_path / "x.obj")
    assert code == 4


def test_resolved_config_reruns_identically(capsys, trained, tmp_path):
    code, _ = _run(capsys, "train", "--data", trained / "scene", "--config", trained / "run" / "config.json",
                   "--out", tmp_path / "again", "--threads", "1")
    assert code == 0
    assert (tmp_path / "again" / "final.ckpt").read_bytes() == (trained / "run" / "final.ckpt").read_bytes()
    assert (tmp_path / "again" / "metrics.jsonl").read_text() == (trained / "run" / "metrics.jsonl").read_text()
