"""Full two-stage model: lifting (stage 1) then motion-guided mesh regression (stage 2)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import blocks as bk
from .autodiff import Tensor
from .body import MiniBody
from .kinematics import KinematicTree, kinematic_scan_order, temporal_chain_order


class StageError(RuntimeError):
    """Raised when a pipeline stage fails; the message names the stage."""


@dataclass(frozen=True)
class Ablation:
    ga: bool = True      # geometry alignment (deformable attention)
    em: bool = True      # explicit motion in keys/values
    im: bool = True      # implicit motion in keys/values

    @property
    def label(self) -> str:
        return "+".join(n for n, on in (("GA", self.ga), ("EM", self.em), ("IM", self.im)) if on) or "none"


@dataclass
class ModelConfig:
    n_joints: int = 17
    n_vertices: int = 602
    lift_dim: int = 64
    lift_layers: int = 3
    n_state: int = 8
    conv_kernel: int = 3
    img_dim: int = 64
    grid_channels: int = 8
    heads: int = 2
    points: int = 4
    recon_dim: int = 64
    recon_layers: int = 3
    mesh_hidden: int = 128
    bidirectional: bool = False
    frame_major: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    p.update(bk.init_encoder(rng, cfg.n_joints, cfg.img_dim, cfg.lift_dim))
    block = bk.DualScanConfig(cfg.lift_dim, cfg.n_state, cfg.conv_kernel)
    for i in range(cfg.lift_layers):
        p.update(bk.init_dual_scan(rng, block, f"spatial.{i}"))
    p.update(bk.init_deformable(rng, cfg.lift_dim, cfg.grid_channels, cfg.heads, cfg.points,
                                max(1, cfg.lift_dim // cfg.heads)))
    for i in range(cfg.lift_layers):
        p.update(bk.init_dual_scan(rng, block, f"temporal.{i}"))
    p.update(bk.init_lifting_head(rng, cfg.lift_dim))
    p.update(bk.init_implicit_motion(rng, cfg.n_joints, cfg.img_dim))
    p.update(bk.init_linear(rng, cfg.img_dim, cfg.recon_dim, "recon.in"))
    for i in range(cfg.recon_layers):
        p.update(bk.init_motion_attention(rng, cfg.recon_dim, cfg.n_joints, cfg.img_dim,
                                          cfg.recon_dim, f"maa.{i}"))
    p.update(bk.init_mesh_head(rng, cfg.recon_dim, cfg.n_joints, cfg.mesh_hidden, cfg.n_vertices))
    return p


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as e:
        raise StageError(f"{name}: {e}") from e


class Model:
    """Parameters plus the forward pass. Parameters are leaf Tensors updated in place."""

    def __init__(self, cfg: ModelConfig, body: MiniBody, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.cfg = cfg
        self.body = body
        raw = init_params(cfg, seed) if params is None else params
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                       for k, v in raw.items()}
        self._orders: dict[int, tuple] = {}

    @property
    def tree(self) -> KinematicTree:
        return self.body.tree

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        extra = sorted(set(state) - set(self.params))
        bad = [k for k in self.params if k in state and np.shape(state[k]) != self.params[k].shape]
        if missing or extra or bad:
            raise ValueError(f"checkpoint mismatch: missing={missing} unexpected={extra} "
                             f"shape_mismatch={[(k, np.shape(state[k]), self.params[k].shape) for k in bad]}")
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def block_configs(self, T: int):
        if T not in self._orders:
            c = self.cfg
            spatial = bk.DualScanConfig(c.lift_dim, c.n_state, c.conv_kernel,
                                        kinematic_scan_order(self.tree), True, False)
            temporal = bk.DualScanConfig(c.lift_dim, c.n_state, c.conv_kernel,
                                         temporal_chain_order(self.tree, T, c.frame_major),
                                         True, c.bidirectional)
            self._orders[T] = ([spatial] * c.lift_layers, [temporal] * c.lift_layers)
        return self._orders[T]

    def lift(self, p2d, grid, f_img, flags: Ablation = Ablation()) -> Tensor:
        p = self.params
        T = p2d.shape[1]
        spatial_cfgs, temporal_cfgs = self.block_configs(T)
        f = _stage("encoder", bk.encoder, ad.as_tensor(p2d), ad.as_tensor(f_img), p)
        f = _stage("spatial_mamba", bk.spatial_mamba, f, spatial_cfgs, p)
        if flags.ga:
            f = ad.add(f, _stage("deformable_attention", bk.deformable_attention, f, ad.as_tensor(grid),
                                 ad.as_tensor(p2d), p, self.cfg.heads, self.cfg.points))
        f = _stage("temporal_mamba", bk.temporal_mamba, f, temporal_cfgs, p)
        return _stage("lifting_head", bk.lifting_head, f, p)

    def reconstruct(self, p3d, f_img, flags: Ablation = Ablation()) -> Tensor:
        p = self.params
        f_img = ad.as_tensor(f_img)
        m = motion_reps(p3d, f_img, p, flags)
        f = _stage("recon_in", bk.linear, f_img, p, "recon.in")
        for i in range(self.cfg.recon_layers):
            f = ad.add(f, _stage("motion_aware_attention", bk.motion_aware_attention, f, m, p, f"maa.{i}"))
        return _stage("mesh_head", bk.mesh_head, f, p3d, self.body.template_vertices, p)

    def forward(self, p2d, grid, f_img, flags: Ablation = Ablation()) -> tuple[Tensor, Tensor]:
        p3d = self.lift(p2d, grid, f_img, flags)
        return p3d, self.reconstruct(p3d, f_img, flags)


def motion_reps(p3d, f_img, p, flags: Ablation) -> bk.MotionRep:
    exp_m = _stage("explicit_motion", bk.explicit_motion, p3d)
    imp_m = _stage("implicit_motion", bk.implicit_motion, p3d, f_img, p)
    return bk.MotionRep(exp_m, imp_m, flags.em, flags.im)


def pipeline_forward(model: Model, p2d, grid, f_img, flags: Ablation = Ablation()) -> tuple[Tensor, Tensor]:
    """Lift 2D joints to a 3D pose anchor, then regress the mesh from it."""
    T = {p2d.shape[1], grid.shape[1], f_img.shape[1]}
    if len(T) != 1:
        raise StageError(f"inputs: inconsistent frame counts {sorted(T)}")
    return model.forward(p2d, grid, f_img, flags)
