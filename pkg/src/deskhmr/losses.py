"""Training objectives for the lifting stage and the mesh stage.

Both work on tape tensors (prediction) against numpy targets, with time on
axis ``ndim - 3`` so batched (B, T, ...) and unbatched (T, ...) inputs work.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .body import mesh_edges

DEGENERATE_AREA2 = 1e-24


@dataclass(frozen=True)
class PoseLossWeights:
    lambda_t: float = 0.5
    lambda_m: float = 20.0
    lambda_2d: float = 0.5

    def __post_init__(self):
        if min(self.lambda_t, self.lambda_m, self.lambda_2d) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class MeshLossWeights:
    lambda_mesh: float = 1.0
    lambda_joint: float = 1.0
    lambda_normal: float = 0.1
    lambda_edge: float = 20.0

    def __post_init__(self):
        if min(self.lambda_mesh, self.lambda_joint, self.lambda_normal, self.lambda_edge) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class MeshTopology:
    faces: np.ndarray
    joint_regressor: np.ndarray


def _check(name: str, pred, gt) -> None:
    if tuple(pred.shape) != tuple(np.shape(gt)):
        raise ShapeError(f"{name}: prediction {tuple(pred.shape)} vs target {np.shape(gt)}")


def norm_last(x) -> Tensor:
    return ad.sqrt(ad.reduce_sum(ad.square(x), axis=-1))


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


def pose_loss_terms(pred, gt, pred2d, gt2d) -> dict[str, Tensor]:
    pred = ad.as_tensor(pred)
    _check("loss_pose", pred, gt)
    _check("loss_pose (2D)", ad.as_tensor(pred2d), gt2d)
    tax = pred.ndim - 3
    T = pred.shape[tax]
    d = ad.sub(pred, gt)
    terms = {"l3d": ad.reduce_mean(norm_last(d))}
    if T >= 2:
        vel = ad.sub(ad.slice(d, tax, 1, T), ad.slice(d, tax, 0, T - 1))
        terms["lm"] = ad.reduce_mean(norm_last(vel))
    else:
        terms["lm"] = _zero()
    if T >= 3:
        acc = ad.add(ad.sub(ad.slice(d, tax, 2, T), ad.mul(ad.slice(d, tax, 1, T - 1), 2.0)),
                     ad.slice(d, tax, 0, T - 2))
        terms["lt"] = ad.reduce_mean(norm_last(acc))
    else:
        terms["lt"] = _zero()
    terms["l2d"] = ad.reduce_mean(norm_last(ad.sub(pred2d, gt2d)))
    return terms


def loss_pose(pred, gt, pred2d, gt2d, w: PoseLossWeights = PoseLossWeights()) -> Tensor:
    """3D joint error plus weighted acceleration, velocity and 2D reprojection terms.

    ``lm`` compares frame differences (velocity); ``lt`` compares second
    differences (acceleration). Both are 0 when T is too short.
    """
    t = pose_loss_terms(pred, gt, pred2d, gt2d)
    total = ad.add(t["l3d"], ad.mul(t["lt"], w.lambda_t))
    total = ad.add(total, ad.mul(t["lm"], w.lambda_m))
    return ad.add(total, ad.mul(t["l2d"], w.lambda_2d))


def regress(vertices, regressor: np.ndarray) -> Tensor:
    """Joint positions (..., J, 3) from vertices (..., N_v, 3)."""
    v = ad.as_tensor(vertices)
    nd = v.ndim
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    return ad.transpose(ad.matmul(ad.transpose(v, swap), np.ascontiguousarray(regressor.T)), swap)


def _cross(a, b) -> Tensor:
    ax, ay, az = (ad.slice(a, -1, i, i + 1) for i in range(3))
    bx, by, bz = (ad.slice(b, -1, i, i + 1) for i in range(3))
    return ad.concat([ad.sub(ad.mul(ay, bz), ad.mul(az, by)),
                      ad.sub(ad.mul(az, bx), ad.mul(ax, bz)),
                      ad.sub(ad.mul(ax, by), ad.mul(ay, bx))], axis=-1)


def face_normals(vertices, faces: np.ndarray):
    """Unnormalised face normals; tensors in, tensor out, arrays in, array out."""
    if isinstance(vertices, Tensor):
        v = [ad.gather_rows(vertices, faces[:, k], axis=-2) for k in range(3)]
        return _cross(ad.sub(v[1], v[0]), ad.sub(v[2], v[0]))
    v = np.asarray(vertices)
    return np.cross(v[..., faces[:, 1], :] - v[..., faces[:, 0], :], v[..., faces[:, 2], :] - v[..., faces[:, 0], :])


def mesh_loss_terms(pred, gt, body, edges: np.ndarray | None = None) -> tuple[dict[str, Tensor], int]:
    """Per-term mesh losses and the number of (face, frame) pairs skipped as degenerate."""
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    _check("loss_mesh", pred, gt)
    faces = np.asarray(body.faces)
    edges = mesh_edges(faces) if edges is None else edges
    d = ad.sub(pred, gt)
    terms = {"mesh": ad.reduce_mean(ad.reduce_sum(ad.abs(d), axis=-1))}

    reg = np.asarray(body.joint_regressor)
    gt_joints = np.einsum("jv,...va->...ja", reg, gt)
    terms["joint"] = ad.reduce_mean(norm_last(ad.sub(regress(pred, reg), gt_joints)))

    n_pred = face_normals(pred, faces)
    n_gt = face_normals(gt, faces)
    a2 = ad.reduce_sum(ad.square(n_pred), axis=-1)
    b2 = (n_gt * n_gt).sum(-1)
    valid = ((a2.data > DEGENERATE_AREA2) & (b2 > DEGENERATE_AREA2)).astype(np.float64)
    n_degenerate = int(valid.size - valid.sum())
    dot = ad.reduce_sum(ad.mul(n_pred, n_gt), axis=-1)
    # sqrt(|a|^2 |b|^2) makes cos exactly 1 for identical normals
    denom = ad.sqrt(ad.add(ad.mul(a2, b2), 1.0 - valid))
    cos = ad.div(dot, denom)
    n_valid = max(valid.sum(), 1.0)
    terms["normal"] = ad.div(ad.reduce_sum(ad.mul(ad.sub(1.0, cos), valid)), n_valid)

    def edge_len(x):
        if isinstance(x, Tensor):
            return norm_last(ad.sub(ad.gather_rows(x, edges[:, 0], axis=-2), ad.gather_rows(x, edges[:, 1], axis=-2)))
        return np.linalg.norm(x[..., edges[:, 0], :] - x[..., edges[:, 1], :], axis=-1)

    terms["edge"] = ad.reduce_mean(ad.abs(ad.sub(edge_len(pred), edge_len(gt))))
    return terms, n_degenerate


def loss_mesh(pred, gt, body, w: MeshLossWeights = MeshLossWeights(), stats: dict | None = None,
              edges: np.ndarray | None = None) -> Tensor:
    """Weighted vertex L1, regressed-joint L2, normal-cosine and edge-length losses.

    Degenerate faces are left out of the normal term; their count goes into
    ``stats["degenerate_faces"]`` when a dict is passed.
    """
    t, n_deg = mesh_loss_terms(pred, gt, body, edges)
    if stats is not None:
        stats["degenerate_faces"] = stats.get("degenerate_faces", 0) + n_deg
    total = ad.mul(t["mesh"], w.lambda_mesh)
    total = ad.add(total, ad.mul(t["joint"], w.lambda_joint))
    total = ad.add(total, ad.mul(t["normal"], w.lambda_normal))
    return ad.add(total, ad.mul(t["edge"], w.lambda_edge))
