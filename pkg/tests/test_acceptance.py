"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or ``python3 tests/test_acceptance.py``. The desk-scale
training criterion takes about 12 minutes on one core; the rest finish in a
couple of minutes.
"""
import json
import sys
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from deskhmr import autodiff as ad
from deskhmr import container, ssm
from deskhmr import metrics as M
from deskhmr.body import build_minibody
from deskhmr.cli import EXIT_OK, main
from deskhmr.config import load_config
from deskhmr.kinematics import kinematic_scan_order, temporal_chain_order
from deskhmr.losses import loss_mesh, loss_pose
from deskhmr.model import Ablation, pipeline_forward
from deskhmr.synth import Dataset
from deskhmr.train import (METRIC_NAMES, VOLATILE_FIELDS, build_model, canonical_dumps, load_checkpoint, make_data,
                           run_train, save_checkpoint)
from deskhmr.verify import order_violations, random_tree, suite_gradients

sys.path.insert(0, str(Path(__file__).parent))
from test_losses import oracle_mesh_terms, oracle_pose_terms  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
DESK_CFG = ROOT / "configs" / "desk.cfg"
TINY_CFG = ROOT / "configs" / "tiny.cfg"

# pinned tolerances and budgets
SCAN_TOL, SCAN_BUDGET_S = 1e-10, 10.0
ZOH_TOL = 1e-12
GRAD_BUDGET_S = 120.0
PROCRUSTES_TOL = 1e-9
LOSS_TOL = 1e-12
LIFT_MPJPE_MM, LIFT_EPOCHS, LIFT_BUDGET_S = 15.0, 200, 600.0
MESH_MPVPE_MM, MESH_EPOCHS = 30.0, 100


# read by the terminal-summary hook in conftest.py
VERDICT_LINES: list[str] = []


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    VERDICT_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def body():
    return build_minibody()


# ----------------------------------------------------------------------------


def test_scan_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        N, L = int(rng.integers(1, 17)), int(rng.integers(1, 65))
        p = ssm.SsmParams(-np.exp(rng.normal(size=N)), rng.normal(size=N), rng.normal(size=N),
                          float(rng.uniform(0.01, 1.0)))
        d = ssm.discretize_zoh(p)
        x = rng.normal(size=L)
        rec = ssm.scan_recurrent(d, p.C, x)
        conv = ssm.scan_convolutional(ssm.build_conv_kernel(d, p.C, L), x)
        worst = max(worst, float(np.abs(rec - conv).max()))
    dt = time.perf_counter() - t0
    verdict("scan equivalence", worst < SCAN_TOL and dt < SCAN_BUDGET_S,
            f"1000 LTI instances, max abs diff {worst:.2e} (< {SCAN_TOL:g}), {dt:.2f} s (< {SCAN_BUDGET_S:g} s)")


def _series(z, shift: int) -> mpmath.mpf:
    """sum_k z^k / (k + shift)! summed term by term at 40 digits."""
    with mpmath.workdps(40):
        z = mpmath.mpf(z)
        term = 1 / mpmath.factorial(shift)
        total, k = mpmath.mpf(0), 0
        while abs(term) > mpmath.mpf(10) ** -45 or k < 5:
            total += term
            k += 1
            term = term * z / (k + shift)
        return total


def test_zoh_correctness():
    errs = {}
    B = np.array([0.7, -1.3, 2.0])
    d = ssm.discretize_zoh(ssm.SsmParams(np.zeros(3), B, B, 0.3))
    errs["A=0"] = max(np.abs(d.A_bar - 1).max(), np.abs(d.B_bar - 0.3 * B).max())
    d = ssm.discretize_zoh(ssm.SsmParams(-np.ones(3), B, B, float(np.log(2.0))))
    errs["A=-1, delta=ln 2"] = max(np.abs(d.A_bar - 0.5).max(), np.abs(d.B_bar - 0.5 * B).max())

    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        N = int(rng.integers(1, 17))
        A = -np.exp(rng.uniform(-3, 2, size=N))
        Bv = rng.normal(size=N)
        delta = float(np.exp(rng.uniform(np.log(1e-3), np.log(2.0))))
        dd = ssm.discretize_zoh(ssm.SsmParams(A, Bv, Bv, delta))
        for n in range(N):
            z = A[n] * delta
            a_ref = float(_series(z, 0))
            b_ref = float(_series(z, 1) * delta * Bv[n])
            worst = max(worst, abs(dd.A_bar[n] - a_ref), abs(dd.B_bar[n] - b_ref))
    errs["series oracle"] = worst

    A = -np.exp(rng.normal(size=8))
    d = ssm.discretize_zoh(ssm.SsmParams(A, np.ones(8), np.ones(8), 1e-8))
    z = 1e-8 * A
    errs["delta=1e-8 A_bar"] = np.abs(d.A_bar - (1 + z + z * z / 2)).max()
    errs["delta=1e-8 B_bar"] = np.abs(d.B_bar - 1e-8 * (1 + z / 2)).max() / 1e-8
    ok = all(v <= ZOH_TOL for v in errs.values())
    verdict("ZOH correctness", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f" (all <= {ZOH_TOL:g})")


def test_gradient_suite():
    t0 = time.perf_counter()
    failures = suite_gradients(np.random.default_rng(0), n_instances=20)
    dt = time.perf_counter() - t0
    detail = "7 blocks x 20 instances, rel err < 1e-4 (offset path < 1e-3)"
    if failures:
        detail += "; " + "; ".join(f"{f.check}: {f.detail}" for f in failures[:3])
    verdict("gradient suite", not failures and dt < GRAD_BUDGET_S, f"{detail}, {dt:.1f} s (< {GRAD_BUDGET_S:g} s)")


def test_kinematic_scan_validity(body):
    rng = np.random.default_rng(11)
    trees = [body.tree] + [random_tree(rng, int(rng.integers(1, 33))) for _ in range(100)]
    bad = []
    for i, tree in enumerate(trees):
        if order_violations(tree, kinematic_scan_order(tree)):
            bad.append(f"tree {i} scan order")
        T = int(rng.integers(1, 9))
        perm = temporal_chain_order(tree, T).perm
        if sorted(perm.tolist()) != list(range(T * tree.n_joints)):
            bad.append(f"tree {i} temporal order")
    verdict("kinematic scan validity", not bad,
            f"MiniBody + 100 random trees (J <= 32): {len(bad)} violations" + (f" {bad[:3]}" if bad else ""))


def test_metric_oracles(body):
    rng = np.random.default_rng(3)
    pa_bad = sum(M.pa_mpjpe(P, G) > M.mpjpe(P, G) + 1e-12
                 for P, G in ((rng.normal(size=(17, 3)), rng.normal(size=(17, 3))) for _ in range(1000)))
    worst = 0.0
    for _ in range(200):
        X = rng.normal(size=(17, 3))
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        R = q * np.sign(np.diag(r))
        R = R * np.sign(np.linalg.det(R))
        Y = rng.uniform(0.2, 5.0) * X @ R.T + rng.normal(size=3)
        worst = max(worst, float(np.abs(M.procrustes_align(X, Y) - Y).max()))
    t = np.arange(16.0)[:, None, None]
    lin = rng.normal(size=(1, 17, 3)) + t * rng.normal(size=(1, 17, 3))
    accel = M.accel_error(lin, np.zeros_like(lin))
    p = rng.normal(size=(2, 6, 17, 3))
    v = body.template_vertices + 0.01 * rng.normal(size=(2, 6) + body.template_vertices.shape)
    zeros = {"MPJPE": M.mpjpe(p, p), "PA-MPJPE": M.pa_mpjpe(p, p), "MPVPE": M.mpvpe(v, v, body.joint_regressor),
             "Accel": M.accel_error(p, p), "L_pose": loss_pose(ad.tensor(p), p, ad.tensor(p[..., :2]),
                                                               p[..., :2]).item(),
             "L_mesh": loss_mesh(ad.tensor(v), v, body).item()}
    ok = pa_bad == 0 and worst < PROCRUSTES_TOL and accel < 1e-9 and all(abs(z) < 1e-9 for z in zeros.values())
    verdict("metric oracles", ok,
            f"PA > MPJPE in {pa_bad}/1000, Procrustes err {worst:.1e} (< {PROCRUSTES_TOL:g}), "
            f"linear Accel {accel:.1e}, max metric/loss at gt {max(abs(z) for z in zeros.values()):.1e}")


def test_loss_weighting(body):
    rng = np.random.default_rng(7)
    gt = rng.normal(scale=0.3, size=(6, 17, 3))
    pred = gt + rng.normal(scale=0.02, size=gt.shape)
    p2, g2 = pred[..., :2], gt[..., :2] + 0.001
    l3d, lm, lt, l2d = oracle_pose_terms(pred, gt, p2, g2)
    pose_err = abs(loss_pose(ad.tensor(pred), gt, ad.tensor(p2), g2).item() - (l3d + 0.5 * lt + 20 * lm + 0.5 * l2d))
    mgt = body.template_vertices + rng.normal(scale=0.005, size=body.template_vertices.shape)
    mp = mgt + rng.normal(scale=0.01, size=mgt.shape)
    mesh, joint, normal, edge = oracle_mesh_terms(mp, mgt, body.faces, body.joint_regressor)
    mesh_err = abs(loss_mesh(ad.tensor(mp), mgt, body).item() - (mesh + joint + 0.1 * normal + 20 * edge))
    verdict("loss weighting", pose_err < LOSS_TOL and mesh_err < LOSS_TOL,
            f"pose (0.5, 20, 0.5) err {pose_err:.1e}, mesh (1, 1, 0.1, 20) err {mesh_err:.1e} (< {LOSS_TOL:g})")


@pytest.mark.slow
def test_desk_scale_learning(body, tmp_path):
    cfg = load_config(DESK_CFG)
    train, _ = make_data(cfg, body)
    lift_cfg = cfg.with_overrides(stage="lift")
    t0 = time.perf_counter()
    lift, model = run_train(lift_cfg, train, out_dir=tmp_path / "lift")
    lift_s = time.perf_counter() - t0
    mesh_cfg = cfg.with_overrides(stage="mesh")
    model, _ = load_checkpoint(tmp_path / "lift" / "model.ckpt", body, mesh_cfg)
    mesh, _ = run_train(mesh_cfg, train, model=model)

    # determinism: two short runs of both stages from the same seed
    short = cfg.with_overrides(epochs=3, epochs_mesh=2)
    curves = [run_train(short, train)[0].losses for _ in range(2)]

    ok_lift = lift.metrics["MPJPE"] < LIFT_MPJPE_MM and cfg.epochs <= LIFT_EPOCHS and lift_s < LIFT_BUDGET_S
    ok_mesh = mesh.metrics["MPVPE"] < MESH_MPVPE_MM and cfg.epochs_mesh == MESH_EPOCHS
    verdict("desk-scale learning", ok_lift and ok_mesh and curves[0] == curves[1],
            f"stage 1 train MPJPE {lift.metrics['MPJPE']:.2f} mm (< {LIFT_MPJPE_MM:g}) after {cfg.epochs} epochs "
            f"in {lift_s:.0f} s (< {LIFT_BUDGET_S:g} s); stage 2 train MPVPE {mesh.metrics['MPVPE']:.2f} mm "
            f"(< {MESH_MPVPE_MM:g}) after {cfg.epochs_mesh} epochs; repeat curves identical: "
            f"{curves[0] == curves[1]}")


def test_ablation_harness(body, tmp_path):
    assert main(["ablate", "--config", str(TINY_CFG), "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "ablation.csv").read_text().strip().split("\n")
    header, body_rows = rows[0].split(","), [r.split(",") for r in rows[1:]]
    flags = [tuple(map(int, r[:3])) for r in body_rows]
    shape_ok = (header[3:] == list(METRIC_NAMES) and len(body_rows) == 5
                and flags == [(1, 0, 0), (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1)])

    cfg = load_config(DESK_CFG)
    train, _ = make_data(cfg, body)
    model = build_model(cfg, body)
    b = train.subset([0, 1])
    plain = pipeline_forward(model, b.p2d, b.grid, b.f_img)
    flagged = pipeline_forward(model, b.p2d, b.grid, b.f_img, Ablation(ga=True, em=True, im=True))
    same = all(np.array_equal(x.data, y.data) for x, y in zip(plain, flagged))
    verdict("ablation harness", shape_ok and same,
            f"{len(body_rows)} rows x {len(header) - 3} metric columns {header[3:]}; "
            f"GA=on bit-identical to unflagged pipeline: {same}")


def test_determinism_and_serialization(body, tmp_path):
    hashes, stripped = [], []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(TINY_CFG), "--out", str(out)]) == EXIT_OK
        rep = json.loads((out / "report.json").read_text())
        hashes.append(rep["determinism_hash"])
        stripped.append(canonical_dumps({k: v for k, v in rep.items() if k not in VOLATILE_FIELDS}))
    reports_ok = hashes[0] == hashes[1] and stripped[0] == stripped[1]

    ckpt = tmp_path / "a" / "model.ckpt"
    cfg = load_config(TINY_CFG)
    model, meta = load_checkpoint(ckpt, body, cfg)
    save_checkpoint(tmp_path / "again.ckpt", model, cfg, meta["stage"], meta["epochs_done"])
    ckpt_ok = (tmp_path / "again.ckpt").read_bytes() == ckpt.read_bytes()

    train, _ = make_data(cfg, body)
    train.save(tmp_path / "train.dsk")
    again = Dataset.load(tmp_path / "train.dsk", body)
    data_ok = (again.to_bytes() == train.to_bytes()
               and all(np.array_equal(again.arrays()[k], v) for k, v in train.arrays().items()))
    _, arrays2 = container.loads(container.dumps("x", {"m": 1}, {"a": np.array(np.pi)}))
    data_ok = data_ok and arrays2["a"].tobytes() == np.array(np.pi).tobytes()
    verdict("determinism & serialization", reports_ok and ckpt_ok and data_ok,
            f"report hashes equal: {hashes[0] == hashes[1]}, checkpoint bytes round-trip: {ckpt_ok}, "
            f"dataset bytes round-trip: {data_ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
