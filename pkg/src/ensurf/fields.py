"""The explicit neural surface: coarse and fine residual deformation fields.

A unit-sphere domain point ``x`` maps to ``c = x + dc * MLP_c(rff_c(x))`` and
then to ``y = c + delta * MLP_f([eig(x) | rff_f(c)])[:3]`` with the feature
vector ``z`` read from the remaining fine-network outputs.  Eigenfunctions
live on the domain, so the intrinsic block is always keyed by ``x``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Tensor
from .encode import HybridEncoder, RffMatrix, rff_encode
from .errors import ConfigurationError
from .geometry import Mesh, icosphere
from .spectral import EigenPolicy, SpectralBasis, cached_eigenbasis, select_eigenfunctions

log = logging.getLogger(__name__)


@dataclass
class FieldConfig:
    hidden: int = 400
    z_width: int = 128
    coarse_rff_freqs: int = 128
    coarse_sigma: float = 0.5
    coarse_seed: int = 11
    fine_rff_freqs: int = 128
    fine_sigma: float = 4.0
    fine_seed: int = 12
    net_seed: int = 13
    delta_coarse: float = 1.0
    delta_max: float = 0.1
    delta_ramp: int = 100
    basis_level: int = 4
    eigen_d: int = 400
    eigen_low: int = 120
    eigen_high: int = 80
    eigenvalue_scaling: bool = False
    intrinsic_enabled: bool = True
    extrinsic_enabled: bool = True
    use_coarse: bool = True
    # "extrinsic" (RFF) or "intrinsic" (eigenfunctions) input for the coarse net
    coarse_encoding: str = "extrinsic"
    # ambient point fed to the fine RFF block: coarse output "coarse" or domain "domain"
    fine_extrinsic_input: str = "coarse"

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown field config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def policy(self) -> EigenPolicy:
        return EigenPolicy.desk(self.eigen_d, self.eigen_low, self.eigen_high)


def delta_schedule(iteration: int, start: int, ramp: int = 100, delta_max: float = 0.1) -> float:
    """0 before ``start``, linear to ``delta_max`` over ``ramp`` iterations, then flat."""
    if iteration <= start:
        return 0.0
    if ramp <= 0 or iteration >= start + ramp:
        return float(delta_max)
    return float(delta_max) * (iteration - start) / ramp


def build_basis(cfg: FieldConfig, cache_dir=None):
    """Selected eigenbasis on the icosphere of ``cfg.basis_level``."""
    mesh = icosphere(cfg.basis_level)
    full = cached_eigenbasis(mesh, cfg.eigen_d, cache_dir=cache_dir)
    return select_eigenfunctions(full, cfg.policy), mesh


class DeformationModel:
    def __init__(self, cfg: FieldConfig, basis: SpectralBasis, basis_mesh: Mesh, dtype=np.float32):
        if cfg.coarse_encoding not in ("extrinsic", "intrinsic"):
            raise ConfigurationError(f"unknown coarse encoding {cfg.coarse_encoding!r}")
        if cfg.fine_extrinsic_input not in ("coarse", "domain"):
            raise ConfigurationError(f"unknown fine extrinsic input {cfg.fine_extrinsic_input!r}")
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self.coarse_rff = RffMatrix.sample(cfg.coarse_rff_freqs, cfg.coarse_sigma, cfg.coarse_seed)
        fine_rff = RffMatrix.sample(cfg.fine_rff_freqs, cfg.fine_sigma, cfg.fine_seed)
        self.encoder = HybridEncoder(
            fine_rff, basis, basis_mesh,
            intrinsic_enabled=cfg.intrinsic_enabled,
            extrinsic_enabled=cfg.extrinsic_enabled,
            eigenvalue_scaling=cfg.eigenvalue_scaling,
        )
        # eigenfunction input for the coarse net when RFF are ablated
        self._coarse_intrinsic = HybridEncoder(
            self.coarse_rff, basis, basis_mesh, eigenvalue_scaling=cfg.eigenvalue_scaling
        )
        rng = np.random.default_rng(cfg.net_seed)
        coarse_in = self.coarse_rff.width if cfg.coarse_encoding == "extrinsic" else basis.d
        self.coarse_net = MLP([coarse_in, cfg.hidden, 3], "softplus", rng=rng, dtype=self.dtype, name="coarse")
        self.fine_net = MLP([self.encoder.width, cfg.hidden, 3 + cfg.z_width], "softplus", rng=rng,
                            dtype=self.dtype, name="fine")
        self.delta = 0.0
        self.delta_coarse = float(cfg.delta_coarse)
        self.coarse_frozen = False

    @property
    def z_width(self) -> int:
        return self.cfg.z_width

    def parameters(self):
        return self.coarse_net.parameters() + self.fine_net.parameters()

    def freeze_coarse(self):
        """Stop gradients into the coarse net; later optimizer steps leave it untouched."""
        self.coarse_frozen = True
        self.coarse_net.set_requires_grad(False)

    # -- encodings ---------------------------------------------------------
    def domain_vertex_ids(self, mesh: Mesh):
        """Vertex ids into the basis mesh when ``mesh`` shares its vertex prefix."""
        bm = self.encoder.basis_mesh
        n = mesh.n_vertices
        if n <= bm.n_vertices and np.array_equal(mesh.vertices, bm.vertices[:n]):
            return np.arange(n)
        return None

    def coarse_input(self, x, vertex_ids=None) -> np.ndarray:
        if self.cfg.coarse_encoding == "extrinsic":
            return rff_encode(x, self.coarse_rff)
        return self._coarse_intrinsic.intrinsic(x, vertex_ids)

    # -- forward -----------------------------------------------------------
    def deform_coarse(self, x, vertex_ids=None, coarse_in=None) -> Tensor:
        """``x + dc * MLP_c(enc(x))`` (identity when the coarse stage is disabled)."""
        x = np.asarray(x, dtype=np.float64)
        # positions stay float64 so the zero-residual map is exactly the identity
        xt = ad.tensor(x, dtype=np.float64)
        if not self.cfg.use_coarse:
            return xt
        if coarse_in is None:
            coarse_in = self.coarse_input(x, vertex_ids)
        out = self.coarse_net(ad.tensor(coarse_in, dtype=self.dtype))
        return xt + self.delta_coarse * out

    def fine_input(self, x, c, vertex_ids=None):
        """Hybrid encoding; ``c`` is the coarse output (array or Tensor)."""
        if self.cfg.fine_extrinsic_input == "domain":
            amb = np.asarray(x, dtype=np.float64)
        elif isinstance(c, Tensor) and c.requires_grad:
            amb = c
        else:
            amb = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
        enc = self.encoder.encode(x, extrinsic_points=amb, vertex_ids=vertex_ids)
        if isinstance(enc, Tensor):
            return enc
        return ad.tensor(enc, dtype=self.dtype)

    def fine_head(self, c: Tensor, fine_in) -> tuple[Tensor, Tensor]:
        out = self.fine_net(fine_in)
        y = c + self.delta * out[:, :3]
        z = out[:, 3:]
        return y, z

    def deform_full(self, x, vertex_ids=None) -> tuple[Tensor, Tensor]:
        """Surface points and features for domain points ``x``."""
        c = self.deform_coarse(x, vertex_ids)
        return self.fine_head(c, self.fine_input(x, c, vertex_ids))

    # -- state -------------------------------------------------------------
    def state_arrays(self) -> dict:
        out = {p.name: p.data for p in self.parameters()}
        out["rff.coarse.B"] = self.coarse_rff.B
        out["rff.fine.B"] = self.encoder.rff.B
        out["basis.eigenvalues"] = self.encoder.basis.eigenvalues
        out["basis.eigenfunctions"] = self.encoder.basis.eigenfunctions
        out["basis.indices"] = self.encoder.basis.indices
        return out

    def state_meta(self) -> dict:
        return {
            "field_config": self.cfg.to_dict(),
            "delta": self.delta,
            "delta_coarse": self.delta_coarse,
            "coarse_frozen": self.coarse_frozen,
            "basis_mesh_id": self.encoder.basis_mesh.mesh_id,
            "dtype": np.dtype(self.dtype).name,
        }

    @classmethod
    def from_state(cls, arrays: dict, meta: dict) -> "DeformationModel":
        cfg = FieldConfig.from_dict(meta["field_config"])
        basis_mesh = icosphere(cfg.basis_level)
        if basis_mesh.mesh_id != meta["basis_mesh_id"]:
            raise ConfigurationError("checkpoint basis mesh does not match the regenerated domain mesh")
        basis = SpectralBasis(
            arrays["basis.eigenvalues"], arrays["basis.eigenfunctions"], basis_mesh.mesh_id,
            arrays["basis.indices"],
        )
        model = cls(cfg, basis, basis_mesh, dtype=np.dtype(meta["dtype"]).type)
        if not (np.array_equal(model.coarse_rff.B, arrays["rff.coarse.B"])
                and np.array_equal(model.encoder.rff.B, arrays["rff.fine.B"])):
            raise ConfigurationError("RFF matrices in checkpoint do not match their recorded seeds")
        for p in model.parameters():
            if p.name not in arrays:
                raise ConfigurationError(f"checkpoint lacks parameter {p.name}")
            if arrays[p.name].shape != p.data.shape:
                raise ConfigurationError(f"parameter {p.name} shape mismatch")
            p.data = np.array(arrays[p.name], dtype=model.dtype)
        model.delta = float(meta["delta"])
        model.delta_coarse = float(meta["delta_coarse"])
        if meta["coarse_frozen"]:
            model.freeze_coarse()
        return model


def extract_mesh(model: DeformationModel, domain_mesh: Mesh, batch: int = 32768) -> Mesh:
    """Surface mesh with the connectivity of ``domain_mesh`` (one forward pass per vertex)."""
    x = np.asarray(domain_mesh.vertices)
    ids = model.domain_vertex_ids(domain_mesh)
    out = np.empty_like(x)
    with ad.no_grad():
        for s in range(0, len(x), batch):
            sl = slice(s, s + batch)
            y, _ = model.deform_full(x[sl], None if ids is None else ids[sl])
            out[sl] = y.data
    return Mesh(out, domain_mesh.faces, name=domain_mesh.name)
