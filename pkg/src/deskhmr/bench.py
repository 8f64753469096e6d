"""Parameter counts and scan timings."""
from __future__ import annotations

import time

import numpy as np

from . import blocks as bk
from .body import build_minibody
from .config import RunConfig
from .kinematics import ScanOrder
from .model import Model
from .ssm import SsmParams, build_conv_kernel, discretize_zoh, scan_convolutional, scan_recurrent


def _best_of(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def random_lti(rng: np.random.Generator, n_state: int) -> SsmParams:
    return SsmParams(A=-np.exp(rng.normal(size=n_state)), B=rng.normal(size=n_state),
                     C=rng.normal(size=n_state), delta=float(rng.uniform(0.01, 0.5)))


def bench_scans(sizes, n_state: int = 16, seed: int = 0, repeats: int = 3) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for L in sizes:
        p = random_lti(rng, n_state)
        d = discretize_zoh(p)
        x = rng.normal(size=L)
        y_rec = scan_recurrent(d, p.C, x)
        y_conv = scan_convolutional(build_conv_kernel(d, p.C, L), x)
        t_rec = _best_of(lambda: scan_recurrent(d, p.C, x), repeats)
        t_conv = _best_of(lambda: scan_convolutional(build_conv_kernel(d, p.C, L), x), repeats)
        rows.append({"kind": "lti", "L": int(L), "recurrent_s": t_rec, "convolutional_s": t_conv,
                     "tokens_per_s": L / t_rec, "max_abs_diff": float(np.abs(y_rec - y_conv).max())})
    return rows


def bench_block(sizes, dim: int = 64, n_state: int = 8, seed: int = 0, repeats: int = 3) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for L in sizes:
        perm = rng.permutation(L)
        cfg = bk.DualScanConfig(dim, n_state, 3, ScanOrder(perm))
        p = bk.init_dual_scan(rng, cfg, "b")
        x = rng.normal(size=(1, L, dim))
        t = _best_of(lambda: bk.dual_scan_block(x, cfg, p, "b"), repeats)
        rows.append({"kind": "dual_scan_block", "L": int(L), "seconds": t, "tokens_per_s": L / t})
    return rows


def run_bench(sizes=(16, 64, 256), cfg: RunConfig | None = None, seed: int = 0) -> dict:
    cfg = cfg or RunConfig()
    body = build_minibody()
    model = Model(cfg.model_config(body.n_joints, body.n_vertices), body, seed=cfg.seed)
    return {"n_params": model.n_params(), "lift_dim": cfg.lift_dim,
            "scans": bench_scans(sizes, seed=seed), "blocks": bench_block(sizes, dim=cfg.lift_dim, seed=seed)}
