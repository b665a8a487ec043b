"""Losses, pixel sampling and the two-stage coarse-to-fine training driver."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Adam, Tensor
from .errors import ConfigurationError, DivergenceError, NonFiniteLossError
from .fields import DeformationModel, FieldConfig, build_basis, delta_schedule, extract_mesh
from .geometry import Mesh, icosphere
from .render import ShaderPair, rasterize, rasterize_fragments, shade, soft_mask
from .render.imageio import normal_map, write_png
from .scenes import SceneDataset

log = logging.getLogger(__name__)

LAMBDA_G_SWEEP = (0.0, 0.1, 0.3, 1.0)
ABLATIONS = ("no-intrinsic", "no-extrinsic", "no-coarse", "no-hg")


# -- losses -------------------------------------------------------------------

def _vertices(mesh: Mesh, vertices=None) -> Tensor:
    if vertices is None:
        return ad.tensor(np.asarray(mesh.vertices, dtype=np.float64))
    return vertices if isinstance(vertices, Tensor) else ad.tensor(np.asarray(vertices, dtype=np.float64))


def loss_normal(mesh: Mesh, vertices=None) -> Tensor:
    """Mean over interior edges of ``(1 - n_l . n_r)^2``; degenerate faces are skipped."""
    V = _vertices(mesh, vertices)
    tri = ad.gather(V, mesh.faces)
    cr = ad.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    ok = np.linalg.norm(cr.data, axis=1) > 1e-20
    ef = mesh.edge_faces
    sel = (ef[:, 0] >= 0) & (ef[:, 1] >= 0)
    sel &= ok[np.maximum(ef[:, 0], 0)] & ok[np.maximum(ef[:, 1], 0)]
    if not sel.any():
        return ad.tensor(0.0, dtype=V.dtype)
    n = ad.normalize(cr, axis=-1)
    nl = ad.gather(n, ef[sel, 0])
    nr = ad.gather(n, ef[sel, 1])
    return ad.mean(ad.square(1.0 - ad.dot(nl, nr)))


def loss_icr(mesh: Mesh, vertices=None) -> Tensor:
    """Mean over faces of ``1 - 2r/R``."""
    V = _vertices(mesh, vertices)
    tri = ad.gather(V, mesh.faces)

    def length(u):
        return ad.sqrt(ad.tsum(u * u, axis=-1) + 1e-30)

    a = length(tri[:, 1] - tri[:, 2])
    b = length(tri[:, 2] - tri[:, 0])
    c = length(tri[:, 0] - tri[:, 1])
    ratio = (b + c - a) * (c + a - b) * (a + b - c) / (a * b * c)
    return ad.mean(1.0 - ratio)


def loss_photometric(target, base: Tensor, final: Tensor, lambda_g: float = 0.1) -> Tensor | None:
    """Per-channel L1 of both shaders against ``target``; ``None`` for no pixels."""
    target = np.asarray(target)
    if target.size == 0:
        log.info("photometric term skipped: empty pixel set")
        return None
    t = ad.tensor(target, dtype=base.dtype)
    loss = ad.mean(ad.abs(t - base))
    if lambda_g:
        loss = loss + lambda_g * ad.mean(ad.abs(t - final))
    return loss


def loss_mask(gt_mask, pred_mask) -> Tensor:
    """Mean per-pixel L1 between masks (prediction may be a Tensor)."""
    gt = np.asarray(gt_mask, dtype=np.float64).reshape(-1)
    pred = pred_mask if isinstance(pred_mask, Tensor) else ad.tensor(np.asarray(pred_mask, dtype=np.float64))
    pred = ad.reshape(pred, (-1,))
    if pred.shape[0] != gt.shape[0]:
        raise ValueError("mask resolutions differ")
    return ad.mean(ad.abs(ad.tensor(gt, dtype=pred.dtype) - pred))


@dataclass
class LossWeights:
    lambda_c: float = 1.0
    lambda_m: float = 2.0
    lambda_n: float = 0.01
    lambda_g: float = 0.1
    lambda_icr: float = 5e-3
    icr_enabled: bool = False

    def __post_init__(self):
        for f in ("lambda_c", "lambda_m", "lambda_n", "lambda_g", "lambda_icr"):
            v = float(getattr(self, f))
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"loss weight {f} must be finite and >= 0, got {v}")


def total_loss(components: dict, weights: LossWeights):
    """Weighted sum of ``L_c``, ``L_m``, ``L_n`` and (if enabled) ``L_ICR``.

    Returns ``(total Tensor, {name: float})``.  Missing components count as 0.
    """
    scale = {"L_c": weights.lambda_c, "L_m": weights.lambda_m, "L_n": weights.lambda_n,
             "L_ICR": weights.lambda_icr if weights.icr_enabled else 0.0}
    values = {}
    total = None
    for name, w in scale.items():
        comp = components.get(name)
        if comp is None:
            values[name] = 0.0
            continue
        val = float(comp.data) if isinstance(comp, Tensor) else float(comp)
        if not np.isfinite(val):
            raise NonFiniteLossError(name, val)
        values[name] = val
        if w == 0:
            continue
        term = comp * w if isinstance(comp, Tensor) else ad.tensor(val * w)
        total = term if total is None else total + term
    if total is None:
        total = ad.tensor(0.0)
    values["total"] = float(total.data)
    return total, values


def sample_pixels(gt_mask, pred_mask, fraction: float, rng: np.random.Generator):
    """Uniform sample of flat pixel indices from the mask intersection.

    Falls back to the union when the intersection is empty.  Returns
    ``(indices sorted ascending, used_fallback)``; both masks empty gives an
    empty index array.
    """
    if not 0 < fraction <= 1:
        raise ConfigurationError("pixel fraction must lie in (0, 1]")
    gt = np.asarray(gt_mask).reshape(-1) > 0.5
    pred = np.asarray(pred_mask).reshape(-1) > 0.5
    if gt.shape != pred.shape:
        raise ValueError("mask resolutions differ")
    pool = np.nonzero(gt & pred)[0]
    fallback = False
    if len(pool) == 0:
        pool = np.nonzero(gt | pred)[0]
        fallback = True
        if len(pool):
            log.info("mask intersection empty; sampling from the union")
    if len(pool) == 0:
        return pool, fallback
    k = max(1, int(round(fraction * len(pool))))
    return np.sort(rng.choice(pool, size=k, replace=False)), fallback


# -- configuration ------------------------------------------------------------

@dataclass
class Schedule:
    coarse_iters: int = 200
    fine_iters: int = 600
    coarse_mesh_level: int = 3
    fine_mesh_level: int = 5
    views_per_step: int = 6
    pixel_fraction: float = 0.05
    lr_shader: float = 1e-3
    lr_deform: float = 2e-3
    lr_decay_at_refine: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.coarse_mesh_level > self.fine_mesh_level:
            raise ConfigurationError("coarse mesh level exceeds fine mesh level")
        if not 0 < self.pixel_fraction <= 1 or not 0 < self.lr_decay_at_refine <= 1:
            raise ConfigurationError("fractions must lie in (0, 1]")
        if min(self.coarse_iters, self.fine_iters) < 0 or self.views_per_step < 1:
            raise ConfigurationError("iteration counts must be >= 0 and views_per_step >= 1")

    @classmethod
    def paper_scale(cls) -> "Schedule":
        return cls(coarse_iters=500, fine_iters=1500, coarse_mesh_level=4, fine_mesh_level=7)


@dataclass
class TrainConfig:
    schedule: Schedule = field(default_factory=Schedule)
    weights: LossWeights = field(default_factory=LossWeights)
    field: FieldConfig = field(default_factory=FieldConfig)
    shader_hidden: tuple = (256, 256, 256)
    shader_seed: int = 21
    mask_sharpness: float = 30.0
    mask_band: float = 3.0
    dtype: str = "float32"
    ablation: str | None = None
    checkpoint_every: int = 0
    preview_every: int = 0
    divergence_threshold: float = 1e3
    divergence_patience: int = 50
    cache_dir: str | None = None

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["schedule"] = asdict(self.schedule)
        d["weights"] = asdict(self.weights)
        d["field"] = self.field.to_dict()
        d["shader_hidden"] = list(self.shader_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        try:
            if "schedule" in d:
                d["schedule"] = Schedule(**d["schedule"])
            if "weights" in d:
                d["weights"] = LossWeights(**d["weights"])
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc
        if "field" in d:
            d["field"] = FieldConfig.from_dict(d["field"])
        if "shader_hidden" in d:
            d["shader_hidden"] = tuple(d["shader_hidden"])
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc.msg})") from exc


def apply_ablation(cfg: TrainConfig, name: str | None) -> TrainConfig:
    """Config for an ablation preset (``lambda-g=<v>`` sets the geometry-shader weight)."""
    if not name:
        return cfg
    fc = cfg.field
    w = cfg.weights
    if name == "no-intrinsic":
        fc = replace(fc, intrinsic_enabled=False)
    elif name == "no-extrinsic":
        fc = replace(fc, extrinsic_enabled=False)
    elif name == "no-coarse":
        fc = replace(fc, use_coarse=False)
    elif name == "no-hg":
        w = replace(w, lambda_g=0.0)
    elif name.startswith("lambda-g="):
        try:
            w = replace(w, lambda_g=float(name.split("=", 1)[1]))
        except ValueError:
            raise ConfigurationError(f"bad lambda-g value in {name!r}") from None
    else:
        raise ConfigurationError(f"unknown ablation {name!r}; valid: {', '.join(ABLATIONS)}, lambda-g=<v>")
    return replace(cfg, field=fc, weights=w, ablation=name)


# -- driver -------------------------------------------------------------------

@dataclass
class StepResult:
    total: Tensor
    values: dict
    views: list
    fallbacks: int
    empty_views: int


@dataclass
class TrainResult:
    model: DeformationModel
    shaders: ShaderPair
    metrics: list
    wall_time: float
    checkpoint: str | None = None


class Trainer:
    """Two-stage optimisation of a deformation model and shader pair.

    Stage 1 fits the coarse field on the coarse mesh while the fine network
    only supplies features (its displacement is gated by ``delta = 0`` and it
    reads RFF of the domain point).  Stage 2 switches to the fine mesh,
    freezes the coarse field, ramps ``delta`` and decays the deformation lr.
    Without a coarse field the whole run happens at the fine level.
    """

    def __init__(self, dataset: SceneDataset, config: TrainConfig, out_dir=None):
        if dataset.n_views < config.schedule.views_per_step:
            raise ConfigurationError("dataset has fewer views than views_per_step")
        self.ds = dataset
        self.cfg = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.dtype = np.dtype(config.dtype).type
        basis, basis_mesh = build_basis(config.field, config.cache_dir)
        self.model = DeformationModel(config.field, basis, basis_mesh, dtype=self.dtype)
        self.shaders = ShaderPair(config.field.z_width, config.shader_hidden, config.shader_seed, self.dtype)
        self.rng = np.random.default_rng(config.schedule.seed)
        s = config.schedule
        lr = s.lr_deform
        self.opt_coarse = Adam(self.model.coarse_net.parameters(), lr)
        self.opt_fine = Adam(self.model.fine_net.parameters(), lr)
        self.opt_hz = Adam(self.shaders.h_z.parameters(), s.lr_shader)
        self.opt_hg = Adam(self.shaders.h_g.parameters(), s.lr_shader)
        self.step_index = 0
        self.metrics: list = []
        self._stage = 0
        self._above = 0
        self.mesh: Mesh | None = None

    # -- stages ----------------------------------------------------------
    @property
    def total_iters(self) -> int:
        return self.cfg.schedule.coarse_iters + self.cfg.schedule.fine_iters

    @property
    def refine_at(self) -> int:
        """Global iteration after which stage 2 starts."""
        return self.cfg.schedule.coarse_iters if self.cfg.field.use_coarse else 0

    def _enter_stage(self, stage: int):
        s = self.cfg.schedule
        m = self.model
        level = s.coarse_mesh_level if stage == 1 else s.fine_mesh_level
        self.mesh = icosphere(level)
        x = self.mesh.vertices
        ids = m.domain_vertex_ids(self.mesh)
        self._ids = ids
        if stage == 1:
            self._coarse_in = m.coarse_input(x, ids)
            self._fine_in = ad.tensor(m.encoder.encode(x, extrinsic_points=x, vertex_ids=ids), dtype=self.dtype)
        else:
            if m.cfg.use_coarse:
                m.freeze_coarse()
                with ad.no_grad():
                    c = m.deform_coarse(x, ids).data
                self.opt_fine.lr = s.lr_deform * s.lr_decay_at_refine
            else:
                c = np.asarray(x, dtype=np.float64)
            self._c = ad.tensor(c, dtype=np.float64)
            self._fine_in = m.fine_input(x, c, ids)
        self._stage = stage
        log.info("stage %d: mesh level %d (%d vertices)", stage, level, self.mesh.n_vertices)

    def surface(self):
        """Current surface vertices and features as Tensors."""
        m = self.model
        if self._stage == 1:
            c = m.deform_coarse(self.mesh.vertices, self._ids, coarse_in=self._coarse_in)
        else:
            c = self._c
        return m.fine_head(c, self._fine_in)

    # -- one step --------------------------------------------------------
    def compute_loss(self, views, pixel_sets=None) -> StepResult:
        """Forward pass of the total loss over ``views``.

        ``pixel_sets`` optionally fixes the shaded pixels per view (used by
        gradient audits); otherwise they are drawn from ``self.rng``.
        """
        cfg = self.cfg
        s = cfg.schedule
        y, z = self.surface()
        Lc_terms, Lm_terms = [], []
        fallbacks = empties = 0
        for k, v in enumerate(views):
            cam = self.ds.cameras[v]
            frags = rasterize_fragments(y.data, self.mesh.faces, cam)
            if frags.empty:
                empties += 1
                log.warning("view %d: mesh projects outside the image", v)
            m_soft = soft_mask(y, self.mesh, cam, k=cfg.mask_sharpness, band=cfg.mask_band, fragments=frags)
            Lm_terms.append(loss_mask(self.ds.masks[v], m_soft))
            if pixel_sets is not None:
                pix = np.asarray(pixel_sets[k], dtype=np.int64)
            else:
                pix, fb = sample_pixels(self.ds.masks[v], frags.coverage, s.pixel_fraction, self.rng)
                fallbacks += int(fb)
            if len(pix) == 0:
                continue
            gb = rasterize(self.mesh, cam, features=z, vertices=y, pixels=pix, soft_k=None, fragments=frags)
            base, final = shade(gb, cam, self.shaders)
            target = self.ds.images[v].reshape(-1, 3)[pix]
            term = loss_photometric(target, base, final, cfg.weights.lambda_g)
            if term is not None:
                Lc_terms.append(term)
        comps = {
            "L_m": _mean_terms(Lm_terms),
            "L_c": _mean_terms(Lc_terms),
            "L_n": loss_normal(self.mesh, y),
        }
        if cfg.weights.icr_enabled:
            comps["L_ICR"] = loss_icr(self.mesh, y)
        total, values = total_loss(comps, cfg.weights)
        return StepResult(total, values, list(views), fallbacks, empties)

    def _optimizers(self):
        opts = [self.opt_fine, self.opt_hz, self.opt_hg]
        if not self.model.coarse_frozen and self.model.cfg.use_coarse:
            opts.insert(0, self.opt_coarse)
        return opts

    def step(self) -> dict:
        it = self.step_index + 1
        if self._stage == 0 or (self._stage == 1 and it > self.refine_at):
            self._enter_stage(1 if it <= self.refine_at else 2)
        fc = self.cfg.field
        self.model.delta = delta_schedule(it, self.refine_at, fc.delta_ramp, fc.delta_max)
        views = np.sort(self.rng.choice(self.ds.n_views, size=self.cfg.schedule.views_per_step, replace=False))
        for p in self.model.parameters() + self.shaders.parameters():
            p.grad = None
        try:
            res = self.compute_loss(views)
        except NonFiniteLossError as exc:
            self._abort(f"non-finite loss component {exc.component} at step {it}")
        res.total.backward()
        for opt in self._optimizers():
            opt.step()
        self.step_index = it
        rec = {"step": it, "stage": self._stage, **{k: res.values[k] for k in ("L_c", "L_m", "L_n", "L_ICR", "total")},
               "delta": self.model.delta, "lr": self.opt_fine.lr if self._stage == 2 else self.opt_coarse.lr,
               "lr_shader": self.opt_hz.lr, "views": [int(v) for v in views], "fallbacks": res.fallbacks,
               "empty_views": res.empty_views}
        self.metrics.append(rec)
        if rec["total"] > self.cfg.divergence_threshold:
            self._above += 1
            if self._above >= self.cfg.divergence_patience:
                self._abort(f"loss above {self.cfg.divergence_threshold:g} for {self._above} consecutive steps")
        else:
            self._above = 0
        return rec

    def _abort(self, reason: str):
        dump = None
        if self.out_dir is not None:
            dump = self.out_dir / "divergence.json"
            self.out_dir.mkdir(parents=True, exist_ok=True)
            dump.write_text(json.dumps({"reason": reason, "step": self.step_index + 1,
                                        "recent_metrics": self.metrics[-10:]}, indent=1))
            self.save_checkpoint(self.out_dir / "diverged.ckpt")
        log.error("training aborted: %s", reason)
        raise DivergenceError(reason, str(dump) if dump else None)

    # -- persistence -----------------------------------------------------
    def checkpoint_payload(self):
        arrays = dict(self.model.state_arrays())
        arrays.update(self.shaders.state_arrays())
        opt_steps = {}
        for name, opt in (("coarse", self.opt_coarse), ("fine", self.opt_fine), ("h_z", self.opt_hz),
                          ("h_g", self.opt_hg)):
            arrays.update(opt.state_arrays(f"adam.{name}"))
            opt_steps[name] = opt.state.step_count
        meta = {
            "kind": "ens-checkpoint",
            "step": self.step_index,
            "stage": self._stage,
            "model": self.model.state_meta(),
            "shaders": self.shaders.state_meta(),
            "train_config": self.cfg.to_dict(),
            "optimizer_steps": opt_steps,
            "domain_level": int(self.cfg.schedule.fine_mesh_level if self._stage == 2
                                else self.cfg.schedule.coarse_mesh_level),
        }
        return arrays, meta

    def save_checkpoint(self, path) -> str:
        arrays, meta = self.checkpoint_payload()
        checkpoint.save(path, arrays, meta)
        return str(path)

    def _write_preview(self, it: int):
        cam = self.ds.cameras[0]
        img, nrm, _ = render_view(self.model, self.shaders, self.mesh, cam)
        write_png(self.out_dir / "previews" / f"step_{it:05d}.png", img)
        write_png(self.out_dir / "previews" / f"step_{it:05d}_normals.png", nrm)

    def run(self) -> TrainResult:
        t0 = time.perf_counter()
        metrics_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.cfg.save(self.out_dir / "config.json")
            metrics_fh = open(self.out_dir / "metrics.jsonl", "w")
        ckpt = None
        try:
            while self.step_index < self.total_iters:
                rec = self.step()
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                it = rec["step"]
                if rec["step"] % 50 == 0 or it == 1:
                    log.info("step %d stage %d total %.5f L_c %.5f L_m %.5f", it, rec["stage"],
                             rec["total"], rec["L_c"], rec["L_m"])
                if self.out_dir is not None:
                    if self.cfg.checkpoint_every and it % self.cfg.checkpoint_every == 0:
                        self.save_checkpoint(self.out_dir / f"step_{it:05d}.ckpt")
                    if self.cfg.preview_every and it % self.cfg.preview_every == 0:
                        self._write_preview(it)
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        if self.out_dir is not None:
            ckpt = self.save_checkpoint(self.out_dir / "final.ckpt")
        return TrainResult(self.model, self.shaders, self.metrics, time.perf_counter() - t0, ckpt)


def _mean_terms(terms):
    if not terms:
        return None
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc / float(len(terms))


def train(dataset: SceneDataset, config: TrainConfig | None = None, out_dir=None) -> TrainResult:
    config = config or TrainConfig()
    if config.ablation:
        config = apply_ablation(replace(config, ablation=None), config.ablation)
    return Trainer(dataset, config, out_dir).run()


# -- rendering and loading ------------------------------------------------------

def render_view(model: DeformationModel, shaders: ShaderPair, domain_mesh: Mesh, camera):
    """Full-frame ``(final rgb, normal map, hard mask)`` images for one pose."""
    with ad.no_grad():
        x = domain_mesh.vertices
        y, z = model.deform_full(x, model.domain_vertex_ids(domain_mesh))
        gb = rasterize(domain_mesh, camera, features=z, vertices=y, soft_k=None)
        _, final = shade(gb, camera, shaders)
    rgb = np.zeros((camera.height * camera.width, 3))
    nrm = np.zeros_like(rgb)
    cp = gb.pixels[gb.covered]
    rgb[gb.pixels] = final.data
    nrm[cp] = normal_map(gb.normal.data)
    mask = gb.fragments.coverage.reshape(camera.height, camera.width)
    shape = (camera.height, camera.width, 3)
    return rgb.reshape(shape), nrm.reshape(shape), mask


def load_checkpoint(path):
    """``(model, shaders, meta)`` from a training checkpoint."""
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "ens-checkpoint":
        raise ConfigurationError(f"{path}: not a training checkpoint")
    model = DeformationModel.from_state(arrays, meta["model"])
    shaders = ShaderPair.from_state(arrays, meta["shaders"])
    return model, shaders, meta


def extract(model: DeformationModel, domain_mesh: Mesh) -> Mesh:
    return extract_mesh(model, domain_mesh)
