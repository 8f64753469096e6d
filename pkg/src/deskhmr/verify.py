"""Self-check suites run by ``deskhmr verify``.

Each suite returns a list of failures; an empty list means it passed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import blocks as bk
from . import metrics as M
from . import ssm
from .body import build_minibody, mesh_edges
from .kinematics import KinematicTree, ScanOrder, kinematic_scan_order, temporal_chain_order
from .losses import loss_mesh, loss_pose


@dataclass
class Failure:
    suite: str
    check: str
    detail: str

    def to_dict(self) -> dict:
        return {"suite": self.suite, "check": self.check, "detail": self.detail}


@dataclass
class VerifyResult:
    suites: dict[str, float] = field(default_factory=dict)   # suite -> seconds
    failures: list[Failure] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"ok": self.ok, "suites": sorted(self.suites), "failures": [f.to_dict() for f in self.failures]}


def random_tree(rng: np.random.Generator, J: int) -> KinematicTree:
    """Random rooted tree whose joint labels are shuffled, so parents may have larger indices."""
    parent = np.full(J, -1)
    for k in range(1, J):
        parent[k] = rng.integers(0, k)
    label = rng.permutation(J)
    relabelled = np.full(J, -1)
    relabelled[label[1:]] = label[parent[1:]]
    return KinematicTree(relabelled, rng.normal(size=(J, 3)))


def order_violations(tree: KinematicTree, order: ScanOrder) -> list[str]:
    J = tree.n_joints
    perm = order.perm
    if sorted(perm.tolist()) != list(range(J)):
        return ["not a bijection"]
    pos = order.inverse
    return [f"joint {j} precedes its parent {int(p)}" for j, p in enumerate(tree.parent)
            if p >= 0 and pos[j] < pos[p]]


# ----------------------------------------------------------------------------
# suites


def suite_ssm(rng: np.random.Generator) -> list[Failure]:
    out = []
    worst = 0.0
    for _ in range(200):
        N, L = int(rng.integers(1, 17)), int(rng.integers(1, 65))
        p = ssm.SsmParams(-np.exp(rng.normal(size=N)), rng.normal(size=N), rng.normal(size=N),
                          float(rng.uniform(0.01, 1.0)))
        d = ssm.discretize_zoh(p)
        x = rng.normal(size=L)
        diff = np.abs(ssm.scan_recurrent(d, p.C, x)
                      - ssm.scan_convolutional(ssm.build_conv_kernel(d, p.C, L), x)).max()
        worst = max(worst, float(diff))
    if not worst < 1e-10:
        out.append(Failure("ssm", "scan-equivalence", f"max abs diff {worst:.3e} >= 1e-10"))

    B = rng.normal(size=4)
    d0 = ssm.discretize_zoh(ssm.SsmParams(np.zeros(4), B, B, 0.3))
    if np.abs(d0.A_bar - 1).max() > 1e-12 or np.abs(d0.B_bar - 0.3 * B).max() > 1e-12:
        out.append(Failure("ssm", "zoh-limit", "A=0 does not give A_bar=1, B_bar=delta*B"))
    d1 = ssm.discretize_zoh(ssm.SsmParams(-np.ones(4), B, B, float(np.log(2.0))))
    if np.abs(d1.A_bar - 0.5).max() > 1e-12 or np.abs(d1.B_bar - 0.5 * B).max() > 1e-12:
        out.append(Failure("ssm", "zoh-limit", "A=-1, delta=ln 2 does not give A_bar=1/2, B_bar=B/2"))
    A = -np.exp(rng.normal(size=8))
    d2 = ssm.discretize_zoh(ssm.SsmParams(A, np.ones(8), np.ones(8), 1e-8))
    z = 1e-8 * A
    if np.abs(d2.A_bar - (1 + z + z * z / 2)).max() > 1e-15 or np.abs(d2.B_bar / 1e-8 - 1).max() > 1e-7:
        out.append(Failure("ssm", "zoh-limit",
                           "delta=1e-8 departs from the second-order expansion of A_bar or from B_bar=delta*B"))

    x = rng.normal(size=(2, 9, 3))
    dl = rng.uniform(0.01, 0.5, size=(2, 9, 3))
    A2 = -np.exp(rng.normal(size=(3, 4)))
    Bs, Cs = rng.normal(size=(2, 9, 4)), rng.normal(size=(2, 9, 4))
    diff = np.abs(ssm.selective_scan(x, dl, A2, Bs, Cs).data - ssm.selective_scan_reference(x, dl, A2, Bs, Cs)).max()
    if not diff < 1e-10:
        out.append(Failure("ssm", "selective-scan", f"fused vs reference max abs diff {diff:.3e}"))
    return out


def suite_autodiff(rng: np.random.Generator) -> list[Failure]:
    out = []
    W = rng.normal(size=(2, 5, 4))
    cases = {
        "elementwise": (lambda t: ad.reduce_sum(ad.mul(ad.silu(ad.mul(ad.softplus(t), ad.sigmoid(t))), W)),
                        rng.normal(size=(2, 5, 4))),
        "matmul": (lambda t: ad.reduce_sum(ad.mul(ad.matmul(t, np.ones((4, 4)) + np.eye(4)), W)),
                   rng.normal(size=(2, 5, 4))),
        "softmax": (lambda t: ad.reduce_sum(ad.mul(ad.softmax_lastdim(t), W)), rng.normal(size=(2, 5, 4))),
        "conv1d": (lambda t: ad.reduce_sum(ad.mul(ad.conv1d_depthwise(t, np.arange(12.0).reshape(3, 4) / 10), W)),
                   rng.normal(size=(2, 5, 4))),
    }
    A = -np.exp(rng.normal(size=(4, 3)))
    cases["selective_scan"] = (
        lambda v: ad.reduce_sum(ad.mul(ssm.selective_scan(v["x"], ad.softplus(v["d"]), A, v["B"], v["C"]), W)),
        {"x": rng.normal(size=(2, 5, 4)), "d": rng.normal(size=(2, 5, 4)),
         "B": rng.normal(size=(2, 5, 3)), "C": rng.normal(size=(2, 5, 3))})
    cfg = bk.DualScanConfig(4, 3, 3, ScanOrder(rng.permutation(5)))
    params = bk.init_dual_scan(rng, cfg, "blk")
    cases["dual_scan_block"] = (lambda t: ad.reduce_sum(ad.mul(bk.dual_scan_block(t, cfg, params, "blk"), W)),
                                rng.normal(size=(2, 5, 4)))
    for name, (f, x) in cases.items():
        rep = ad.grad_check(f, x, rng=rng, max_coords=40)
        if not rep.passed:
            out.append(Failure("autodiff", f"gradient-check:{name}",
                               f"max rel err {rep.max_rel_err:.3e} at {rep.worst} (tol {rep.tol:g})"))
    return out


def suite_kinematics(rng: np.random.Generator) -> list[Failure]:
    out = []
    body = build_minibody()
    trees = [("minibody", body.tree)] + [(f"random{i}", random_tree(rng, int(rng.integers(1, 33))))
                                         for i in range(100)]
    for name, tree in trees:
        bad = order_violations(tree, kinematic_scan_order(tree))
        if bad:
            out.append(Failure("kinematics", f"permutation:{name}", "; ".join(bad[:3])))
        T = int(rng.integers(1, 9))
        tp = temporal_chain_order(tree, T).perm
        if sorted(tp.tolist()) != list(range(T * tree.n_joints)):
            out.append(Failure("kinematics", f"temporal-permutation:{name}", "not a bijection over T*J slots"))
    return out


def suite_metrics(rng: np.random.Generator) -> list[Failure]:
    out = []
    worst = 0.0
    for _ in range(100):
        X = rng.normal(size=(17, 3))
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        R = q * np.sign(np.linalg.det(q))
        Y = rng.uniform(0.5, 2.0) * X @ R.T + rng.normal(size=3)
        worst = max(worst, float(np.abs(M.procrustes_align(X, Y) - Y).max()))
    if not worst < 1e-9:
        out.append(Failure("metrics", "procrustes-oracle", f"similarity not recovered, max err {worst:.3e}"))
    for _ in range(100):
        P, G = rng.normal(size=(4, 17, 3)), rng.normal(size=(4, 17, 3))
        if M.pa_mpjpe(P, G) > M.mpjpe(P, G) + 1e-9:
            out.append(Failure("metrics", "pa-le-mpjpe", "PA-MPJPE exceeded MPJPE"))
            break
    t = np.arange(10.0)[:, None, None]
    lin = rng.normal(size=(1, 5, 3)) + t * rng.normal(size=(1, 5, 3))
    acc = M.accel_error(lin, np.zeros_like(lin))
    if acc > 1e-9:
        out.append(Failure("metrics", "accel-linear", f"Accel of linear motion is {acc:.3e}"))
    return out


def suite_losses(rng: np.random.Generator) -> list[Failure]:
    out = []
    body = build_minibody()
    p3d = rng.normal(size=(2, 6, 17, 3))
    p2d = p3d[..., :2]
    lp = loss_pose(ad.tensor(p3d), p3d, ad.tensor(p2d), p2d).item()
    if lp != 0.0:
        out.append(Failure("losses", "loss-zero:pose", f"pose loss at pred=gt is {lp:.3e}"))
    mesh = body.template_vertices + 0.01 * rng.normal(size=(2, 3) + body.template_vertices.shape)
    lm = loss_mesh(ad.tensor(mesh), mesh, body).item()
    if abs(lm) > 1e-12:
        out.append(Failure("losses", "loss-zero:mesh", f"mesh loss at pred=gt is {lm:.3e}"))
    return out


def _project(rng, shape):
    """Fixed random read-out so every case reduces to a scalar with dense gradients."""
    W = rng.normal(size=shape)
    return lambda y: ad.reduce_sum(ad.mul(y, W))


class GradCase(NamedTuple):
    f: Callable
    x: object                  # array or dict of arrays
    tol: float
    step: float
    coords: dict | None = None


def _smooth_mesh_coords(pred, gt, faces, margin, rng, k) -> np.ndarray:
    """Flat coordinates of ``k`` vertices whose L1 and edge-length residuals all exceed ``margin``.

    Both terms are kinked where a residual crosses zero, and finite differences
    are only meaningful on coordinates at least a few steps away from a kink.
    """
    edges = mesh_edges(faces)
    el = lambda v: np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=-1)
    near = np.abs(el(pred) - el(gt)) <= margin
    ok = np.all(np.abs(pred - gt) > margin, axis=-1)
    ok[edges[near].ravel()] = False
    verts = rng.choice(np.flatnonzero(ok), size=k, replace=False)
    return np.sort(3 * verts[:, None] + rng.integers(0, 3, size=(k, 1))).ravel()


def block_gradient_cases(rng: np.random.Generator, n_coords: int = 6) -> dict[str, GradCase]:
    """One random tiny instance per block, keyed by block name.

    Inputs mix the block's activations with a few of its weights, so both
    data and parameter gradients are exercised. Network blocks use a 1e-4
    central-difference step, which keeps roundoff well under the tolerance on
    coordinates whose gradient is tiny. The pose loss is a sum of norms with
    curvature 1/|residual| and keeps 1e-5, as does the deformable block so a
    step rarely straddles an interpolation cell edge. The mesh loss uses 1e-6:
    its normal term is sharply curved on small faces and its four terms can
    nearly cancel at a vertex, which inflates truncation error relative to the
    total gradient.
    """
    from .body import build_minibody, mesh_edges
    cases = {}
    B, L, D = 2, 5, 4
    cfg = bk.DualScanConfig(D, 3, 3, ScanOrder(rng.permutation(L), rng.integers(0, 2, size=L).cumsum()))
    prm = bk.init_dual_scan(rng, cfg, "blk")
    keys = ["blk.global.dt.w", "blk.local.B.w", "blk.gate_conv_w"]
    ro_dual = _project(rng, (B, L, D))

    def dual(v):
        p = dict(prm, **{k: v[k] for k in keys})
        return ro_dual(bk.dual_scan_block(v["x"], cfg, p, "blk"))
    cases["dual_scan"] = GradCase(dual, {"x": rng.normal(size=(B, L, D)), **{k: prm[k] for k in keys}}, 1e-4, 1e-4)

    T, J, C, heads, points = 2, 3, 3, 2, 2
    da = bk.init_deformable(rng, D, C, heads, points, 3)
    grid = rng.normal(size=(1, T, 5, 5, C))
    p2d = rng.uniform(-0.7, 0.7, size=(1, T, J, 2))
    ro_da = _project(rng, (1, T, J, D))

    def deform(v):
        p = dict(da, **{k: v[k] for k in ("da.offset.w", "da.value_w", "da.attn.w")})
        return ro_da(bk.deformable_attention(v["f"], v["grid"], v["p2d"], p, heads, points))
    # the offset path runs through bilinear interpolation, which is only piecewise smooth
    cases["deformable_attention"] = GradCase(deform, {"f": rng.normal(size=(1, T, J, D)), "grid": grid, "p2d": p2d,
                                              "da.offset.w": da["da.offset.w"], "da.value_w": da["da.value_w"],
                                              "da.attn.w": da["da.attn.w"]}, 1e-3, 1e-5)

    T, J, Di, dk = 4, 3, 5, 3
    ma = bk.init_motion_attention(rng, D, J, Di, dk, "maa.0")
    ro_ma = _project(rng, (1, T, D))

    def motion(v):
        p = dict(ma, **{k: v[k] for k in ("maa.0.q.w", "maa.0.k.w")})
        m = bk.MotionRep(bk.explicit_motion(v["p3d"]), bk.implicit_motion(v["p3d"], v["img"], im))
        return ro_ma(bk.motion_aware_attention(v["f"], m, p, "maa.0"))
    im = bk.init_implicit_motion(rng, J, Di)
    cases["motion_aware_attention"] = GradCase(motion, {"f": rng.normal(size=(1, T, D)),
                                                "p3d": rng.normal(size=(1, T, J, 3)),
                                                "img": rng.normal(size=(1, T, Di)),
                                                "maa.0.q.w": ma["maa.0.q.w"], "maa.0.k.w": ma["maa.0.k.w"]}, 1e-4, 1e-4)

    lh = bk.init_lifting_head(rng, D)
    ro_lift = _project(rng, (1, T, J, 3))
    cases["lifting_head"] = GradCase(lambda v: ro_lift(bk.lifting_head(v["f"], dict(lh, **{"lift.h.w": v["lift.h.w"]}))),
                             {"f": rng.normal(size=(1, T, J, D)), "lift.h.w": lh["lift.h.w"]}, 1e-4, 1e-4)

    template = rng.normal(size=(6, 3))
    mh = bk.init_mesh_head(rng, D, J, 5, 6)
    ro_mesh = _project(rng, (1, T, 6, 3))
    cases["mesh_head"] = GradCase(
        lambda v: ro_mesh(bk.mesh_head(v["f"], v["p3d"], template, dict(mh, **{"mesh.out.w": v["mesh.out.w"]}))),
        {"f": rng.normal(size=(1, T, D)), "p3d": rng.normal(size=(1, T, J, 3)), "mesh.out.w": mh["mesh.out.w"]},
        1e-4, 1e-4)

    gt = rng.normal(scale=0.3, size=(1, 5, J, 3))
    g2 = gt[..., :2] + 0.01 * rng.normal(size=gt[..., :2].shape)
    cases["loss_pose"] = GradCase(lambda v: loss_pose(v["p3d"], gt, v["p2d"], g2),
                          {"p3d": gt + 0.05 * rng.normal(size=gt.shape), "p2d": g2 + 0.05 * rng.normal(size=g2.shape)},
                          1e-4, 1e-5)

    body = build_minibody()
    mgt = body.template_vertices[None, None] + 0.01 * rng.normal(size=(1, 1) + body.template_vertices.shape)
    pred = mgt + 0.01 * rng.normal(size=mgt.shape)
    coords = _smooth_mesh_coords(pred[0, 0], mgt[0, 0], body.faces, 1e-4, rng, n_coords)
    cases["loss_mesh"] = GradCase(lambda v: loss_mesh(v, mgt, body), pred, 1e-4, 1e-6, {"x": coords})
    return cases


def suite_gradients(rng: np.random.Generator, n_instances: int = 20, max_coords: int = 6) -> list[Failure]:
    out = []
    for inst in range(n_instances):
        for name, c in block_gradient_cases(rng, max_coords).items():
            rep = ad.grad_check(c.f, c.x, step=c.step, tol=c.tol, coords=c.coords, rng=rng, max_coords=max_coords)
            if not rep.passed:
                out.append(Failure("gradients", f"{name}#{inst}",
                                   f"max rel err {rep.max_rel_err:.3e} at {rep.worst} (tol {c.tol:g})"))
    return out


SUITES = {"ssm": suite_ssm, "autodiff": suite_autodiff, "kinematics": suite_kinematics,
          "metrics": suite_metrics, "losses": suite_losses, "gradients": suite_gradients}


def run_verify(only: list[str] | None = None, seed: int = 0) -> VerifyResult:
    names = list(SUITES) if not only else only
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suites {unknown}; choose from {sorted(SUITES)}")
    res = VerifyResult()
    for name in names:
        t = time.perf_counter()
        try:
            res.failures.extend(SUITES[name](np.random.default_rng(seed)))
        except Exception as e:
            res.failures.append(Failure(name, "crashed", f"{type(e).__name__}: {e}"))
        res.suites[name] = time.perf_counter() - t
    return res
