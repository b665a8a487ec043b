"""Command line interface: ``ensurf gen-scene | train | extract | eval | render``.

Exit codes: 0 success, 2 usage or configuration error, 3 training divergence,
4 file or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigurationError, DatasetError, DivergenceError, EnsError, ObjParseError, VersionError
from .evaluate import evaluate_mesh
from .geometry import export_obj, icosphere, import_obj, quad_sphere
from .render import Camera
from .render.imageio import psnr, write_png
from .scenes import SHAPE_KINDS, load_dataset, make_scene, save_dataset
from .train import LAMBDA_G_SWEEP, TrainConfig, apply_ablation, extract, load_checkpoint, render_view, train

log = logging.getLogger("ensurf")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
SHAPE_ALIASES = {"bumpy": "bumpy_sphere", "box": "rounded_box"}


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _read_config(path) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg})") from exc


# -- commands -----------------------------------------------------------------

def cmd_gen_scene(args) -> int:
    cfg = _read_config(args.config)
    kind = SHAPE_ALIASES.get(args.shape, args.shape)
    params = dict(cfg.get("params", {}))
    if kind == "ellipsoid":
        for k in ("a", "b", "c"):
            if getattr(args, k) is not None:
                params[k] = getattr(args, k)
    elif kind == "bumpy_sphere":
        for k in ("radius", "amplitude", "frequency"):
            if getattr(args, k) is not None:
                params[k] = getattr(args, k)
    elif kind == "rounded_box":
        if args.half_extents is not None:
            params["half_extents"] = args.half_extents
        if args.round is not None:
            params["radius"] = args.round
    resolved = {
        "shape": kind, "params": params, "views": args.views, "resolution": args.res,
        "focal": args.focal, "points": args.points, "seed": args.seed,
        "albedo_frequency": args.albedo_frequency,
    }
    ds = make_scene(kind, views=args.views, resolution=args.res, focal=args.focal, n_points=args.points,
                    seed=args.seed, albedo_frequency=args.albedo_frequency, **params)
    save_dataset(ds, args.out)
    _write_json(Path(args.out) / "scene_config.json", resolved)
    print(json.dumps({"out": str(args.out), "views": ds.n_views, "gt_points": len(ds.gt_points)}))
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_dict(_read_config(args.config))
    if args.seed is not None:
        cfg = replace(cfg, schedule=replace(cfg.schedule, seed=args.seed))
    if args.coarse_iters is not None:
        cfg = replace(cfg, schedule=replace(cfg.schedule, coarse_iters=args.coarse_iters))
    if args.fine_iters is not None:
        cfg = replace(cfg, schedule=replace(cfg.schedule, fine_iters=args.fine_iters))
    if args.icr:
        cfg = replace(cfg, weights=replace(cfg.weights, icr_enabled=True))
    if args.cache_dir:
        cfg = replace(cfg, cache_dir=args.cache_dir)
    if args.ablate:
        cfg = apply_ablation(replace(cfg, ablation=None), args.ablate)
    return cfg


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    cfg = _train_config(args)
    runs = [(Path(args.out), cfg)]
    if args.lambda_g_sweep:
        runs = [(Path(args.out) / f"lambda_g_{v:g}", apply_ablation(cfg, f"lambda-g={v:g}")) for v in LAMBDA_G_SWEEP]
    summary = []
    for out, c in runs:
        try:
            res = train(ds, c, out)
        except DivergenceError as exc:
            print(json.dumps({"out": str(out), "status": "diverged", "reason": str(exc),
                              "dump": exc.dump_path}))
            return EXIT_DIVERGED
        info = {"out": str(out), "status": "ok", "steps": len(res.metrics), "checkpoint": res.checkpoint,
                "final_total": res.metrics[-1]["total"] if res.metrics else None,
                "wall_time_s": res.wall_time}
        _write_json(out / "summary.json", info)
        summary.append(info)
    print(json.dumps(summary if args.lambda_g_sweep else summary[0]))
    return EXIT_OK


def _domain(args, meta):
    if args.quad is not None:
        return quad_sphere(args.quad), {"connectivity": "quad", "n": args.quad}
    level = args.tri_level if args.tri_level is not None else meta["domain_level"]
    return icosphere(level), {"connectivity": "tri", "level": level}


def cmd_extract(args) -> int:
    model, _, meta = load_checkpoint(args.checkpoint)
    domain, spec = _domain(args, meta)
    t0 = time.perf_counter()
    mesh = extract(model, domain)
    elapsed = time.perf_counter() - t0
    export_obj(mesh, args.out)
    report = evaluate_mesh(mesh)
    report.update({"domain": spec, "extract_seconds": elapsed, "obj": str(args.out),
                   "checkpoint": str(args.checkpoint)})
    report.pop("chamfer_l1")
    report.pop("psnr")
    _write_json(Path(str(args.out) + ".json"), report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    model = shaders = None
    if args.mesh:
        mesh = import_obj(args.mesh)
    else:
        model, shaders, meta = load_checkpoint(args.checkpoint)
        domain = icosphere(args.tri_level if args.tri_level is not None else meta["domain_level"])
        mesh = extract(model, domain)
    report = evaluate_mesh(mesh, ds, n_samples=args.samples, seed=args.seed or 0)
    if model is not None:
        vals = []
        for cam, img in zip(ds.cameras, ds.images):
            rgb, _, _ = render_view(model, shaders, domain, cam)
            vals.append(psnr(rgb, img))
        report["psnr"] = {"per_view": vals, "mean": float(np.mean(vals))}
    report["source"] = str(args.mesh or args.checkpoint)
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    model, shaders, meta = load_checkpoint(args.checkpoint)
    ds = None
    if args.camera:
        cam_data = json.loads(Path(args.camera).read_text())
        if isinstance(cam_data, list):
            cam_data = cam_data[args.view or 0]
        cam = Camera.from_dict(cam_data)
    elif args.data is not None:
        ds = load_dataset(args.data)
        cam = ds.cameras[args.view or 0]
    else:
        raise ConfigurationError("render needs --camera or --data with --view")
    domain = icosphere(args.tri_level if args.tri_level is not None else meta["domain_level"])
    rgb, nrm, _ = render_view(model, shaders, domain, cam)
    out = Path(args.out)
    write_png(out, rgb)
    nrm_path = out.with_name(out.stem + "_normals" + out.suffix)
    write_png(nrm_path, nrm)
    report = {"image": str(out), "normals": str(nrm_path), "camera": cam.to_dict()}
    if ds is not None:
        report["psnr"] = psnr(rgb, ds.images[args.view or 0])
    _write_json(Path(str(out) + ".json"), report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed (u64)")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread limit (1 = deterministic)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ensurf", description="Explicit neural surface reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", parents=[common], help="render a synthetic dataset")
    g.add_argument("--shape", required=True, choices=sorted(set(SHAPE_KINDS) | set(SHAPE_ALIASES)))
    g.add_argument("--views", type=int, default=24)
    g.add_argument("--res", type=int, default=128)
    g.add_argument("--focal", type=float, default=None)
    g.add_argument("--points", type=int, default=50_000)
    g.add_argument("--albedo-frequency", type=float, default=3.0)
    g.add_argument("--a", type=float)
    g.add_argument("--b", type=float)
    g.add_argument("--c", type=float)
    g.add_argument("--radius", type=float)
    g.add_argument("--amplitude", type=float)
    g.add_argument("--frequency", type=int)
    g.add_argument("--half-extents", type=float, nargs=3)
    g.add_argument("--round", type=float)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene, seed=0)

    t = sub.add_parser("train", parents=[common], help="fit a surface to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablate", help="no-intrinsic | no-extrinsic | no-coarse | no-hg | lambda-g=<v>")
    t.add_argument("--lambda-g-sweep", action="store_true", help=f"train once per lambda_g in {LAMBDA_G_SWEEP}")
    t.add_argument("--icr", action="store_true", help="enable the inradius/circumradius regularizer")
    t.add_argument("--coarse-iters", type=int)
    t.add_argument("--fine-iters", type=int)
    t.add_argument("--cache-dir", help="directory for cached eigenbases")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", parents=[common], help="export a mesh from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    grp = e.add_mutually_exclusive_group()
    grp.add_argument("--tri-level", type=int)
    grp.add_argument("--quad", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", parents=[common], help="metrics against a dataset")
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--mesh")
    v.add_argument("--data", required=True)
    v.add_argument("--tri-level", type=int)
    v.add_argument("--samples", type=int, default=10_000)
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", parents=[common], help="render a checkpoint from a pose")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--camera", help="camera JSON (a record or an array of records)")
    r.add_argument("--data", help="dataset directory to take the pose from")
    r.add_argument("--view", type=int)
    r.add_argument("--tri-level", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (ConfigurationError, ValueError) as exc:
        if isinstance(exc, (VersionError, ObjParseError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, OSError, EnsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
