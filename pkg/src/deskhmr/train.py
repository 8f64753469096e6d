"""Training, evaluation, ablation and the run report."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import container
from . import metrics as M
from .body import MiniBody, build_minibody
from .config import RunConfig
from .kinematics import project_orthographic
from .losses import MeshLossWeights, PoseLossWeights, loss_mesh, loss_pose
from .model import Ablation, Model, ModelConfig
from .optim import AdamW
from .synth import Dataset, MotionSpec, make_split

METRIC_NAMES = ("MPJPE", "PA-MPJPE", "MPVPE", "Accel")
ABLATION_ROWS = (Ablation(True, False, False), Ablation(True, True, False), Ablation(True, False, True),
                 Ablation(False, True, True), Ablation(True, True, True))
VOLATILE_FIELDS = ("timestamp", "wall_clock_s", "determinism_hash")


class TrainingError(RuntimeError):
    """Training aborted; ``checkpoint`` points at the last finite weights when one was written."""

    def __init__(self, msg: str, checkpoint: str | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


# ----------------------------------------------------------------------------
# reports


def source_revision() -> str:
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return "src-" + h.hexdigest()[:16]


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


@dataclass
class RunReport:
    command: str
    config: dict
    stage: str
    losses: dict[str, list[float]] = field(default_factory=dict)
    metrics: dict[str, float] | None = None
    eval_metrics: dict[str, float] | None = None
    extra: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    timestamp: str = ""

    @property
    def losses_monotone(self) -> dict[str, bool]:
        return {k: bool(np.all(np.diff(v) <= 0)) for k, v in self.losses.items()}

    def to_dict(self, with_hash: bool = True) -> dict:
        d = {"command": self.command, "config": self.config, "stage": self.stage, "losses": self.losses,
             "losses_monotone": self.losses_monotone, "extra": self.extra,
             "source_revision": source_revision(), "wall_clock_s": self.wall_clock_s,
             "timestamp": self.timestamp}
        if self.metrics is not None:
            d["metrics"] = self.metrics
        if self.eval_metrics is not None:
            d["eval_metrics"] = self.eval_metrics
        if with_hash:
            d["determinism_hash"] = determinism_hash(d)
        return d

    def to_json(self) -> str:
        return canonical_dumps(self.to_dict())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "metric", "value", "units"])
        for split, m in (("train", self.metrics), ("eval", self.eval_metrics)):
            for r in M.metric_records(m or {}):
                w.writerow([split, r["metric"], repr(r["value"]), r["units"]])
        return buf.getvalue()


def determinism_hash(report: dict) -> str:
    stable = {k: v for k, v in report.items() if k not in VOLATILE_FIELDS}
    return hashlib.sha256(canonical_dumps(stable).encode()).hexdigest()


def write_report(report: RunReport, out_dir, fmt: str = "json", name: str = "report") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(report.to_json(), encoding="utf-8")
    path = out / f"{name}.{fmt}"
    if fmt == "csv":
        path.write_text(report.to_csv(), encoding="utf-8")
    return path


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, cfg: RunConfig, stage: str, epochs_done: dict) -> None:
    state = model.state_dict()
    bad = [k for k, v in state.items() if not np.all(np.isfinite(v))]
    if bad:
        raise CheckpointError(f"refusing to write non-finite tensors {bad}")
    meta = {"run_config": cfg.to_dict(), "model_config": model.cfg.to_dict(), "stage": stage,
            "epochs_done": epochs_done, "body_hash": model.body.content_hash()}
    container.save(path, "checkpoint", meta, state)


def load_checkpoint(path, body: MiniBody | None = None, cfg: RunConfig | None = None) -> tuple[Model, dict]:
    """Model plus checkpoint metadata. A ``cfg`` whose model shape differs is a load error."""
    meta, state = container.load(path, kind="checkpoint")
    body = body or build_minibody()
    if meta.get("body_hash") != body.content_hash():
        raise CheckpointError("checkpoint was trained against a different body model")
    mcfg = ModelConfig(**meta["model_config"])
    if cfg is not None:
        want = cfg.model_config(body.n_joints, body.template_vertices.shape[0]).to_dict()
        diff = sorted(k for k in want if want[k] != mcfg.to_dict().get(k))
        if diff:
            raise CheckpointError(f"checkpoint model config differs from run config in {diff}")
    model = Model(mcfg, body, params=None, seed=0)
    try:
        model.load_state_dict(state)
    except ValueError as e:
        raise CheckpointError(str(e)) from None
    return model, meta


# ----------------------------------------------------------------------------
# training


def motion_spec(cfg: RunConfig) -> MotionSpec:
    return MotionSpec(T=cfg.T, stride=cfg.stride, amplitude=cfg.amplitude, occlusion_rate=cfg.occlusion_rate,
                      keypoint_noise_sigma=cfg.keypoint_noise_sigma)


def make_data(cfg: RunConfig, body: MiniBody) -> tuple[Dataset, Dataset]:
    return make_split(cfg.seed, cfg.n_train, cfg.n_eval, motion_spec(cfg), body, img_dim=ModelConfig.img_dim)


def lift_loss(model: Model, batch: Dataset, flags: Ablation, w: PoseLossWeights = PoseLossWeights()):
    p3d = model.lift(batch.p2d, batch.grid, batch.f_img, flags)
    return loss_pose(p3d, batch.p3d, project_orthographic(p3d), project_orthographic(batch.p3d), w)


def mesh_loss(model: Model, batch: Dataset, flags: Ablation, w: MeshLossWeights = MeshLossWeights()):
    _, mesh = model.forward(batch.p2d, batch.grid, batch.f_img, flags)
    return loss_mesh(mesh, batch.mesh, model.body, w)


def fit(model: Model, data: Dataset, loss_fn, *, epochs: int, batch: int, lr: float, weight_decay: float,
        lr_decay: float, seed: int, flags: Ablation, nan_checkpoint=None, save_fn=None,
        log=None) -> list[float]:
    """Minibatch AdamW. Returns the size-weighted mean loss of every epoch.

    Only parameters reached by the loss are updated. A non-finite loss or
    gradient aborts with :class:`TrainingError`, after ``save_fn`` has written
    the weights as they were before the failing step.
    """
    opt = AdamW(model.params, lr, weight_decay, lr_decay=lr_decay)
    rng = np.random.default_rng(seed)
    n = len(data)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch):
            idx = np.sort(perm[s:s + batch])
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = loss_fn(model, data.subset(idx), flags)
            value = loss.item()
            grads = tape.backward(loss) if np.isfinite(value) else {}
            bad = [t.name for t, g in grads.items() if not np.all(np.isfinite(g))]
            if not np.isfinite(value) or bad:
                where = f"epoch {epoch}, step {s // batch}"
                path = None
                if save_fn is not None and nan_checkpoint is not None:
                    save_fn(nan_checkpoint)
                    path = str(nan_checkpoint)
                what = f"loss={value}" if not np.isfinite(value) else f"non-finite gradients in {bad}"
                raise TrainingError(f"non-finite training signal at {where}: {what}", path)
            opt.step()
            total += value * len(idx)
        opt.end_epoch()
        history.append(total / n)
        if log is not None:
            log(epoch, history[-1])
    return history


def predict(model: Model, data: Dataset, flags: Ablation, chunk: int = 8) -> tuple[np.ndarray, np.ndarray]:
    p3d, mesh = [], []
    for s in range(0, len(data), chunk):
        b = data.subset(np.arange(s, min(s + chunk, len(data))))
        p, m = model.forward(b.p2d, b.grid, b.f_img, flags)
        p3d.append(p.data)
        mesh.append(m.data)
    return np.concatenate(p3d), np.concatenate(mesh)


def compute_metrics(p3d, gt3d, mesh, gt_mesh, regressor, fps: float, root: int = 0) -> dict[str, float]:
    pr, gr = M.root_align(p3d, root), M.root_align(gt3d, root)
    return {"MPJPE": M.mpjpe(pr, gr), "PA-MPJPE": M.pa_mpjpe(pr, gr),
            "MPVPE": M.mpvpe(mesh, gt_mesh, regressor, root), "Accel": M.accel_error(pr, gr, fps)}


def evaluate(model: Model, data: Dataset, flags: Ablation = Ablation(), fps: float = 25.0) -> dict[str, float]:
    p3d, mesh = predict(model, data, flags)
    return compute_metrics(p3d, data.p3d, mesh, data.mesh, model.body.joint_regressor, fps,
                           model.tree.root)


def build_model(cfg: RunConfig, body: MiniBody) -> Model:
    return Model(cfg.model_config(body.n_joints, body.template_vertices.shape[0]), body, seed=cfg.seed)


def run_train(cfg: RunConfig, train: Dataset, eval_data: Dataset | None = None, out_dir=None,
              model: Model | None = None, log=None) -> tuple[RunReport, Model]:
    """Run the configured stage(s). ``mesh`` needs ``model`` holding lifting weights."""
    t0 = time.time()
    body = model.body if model is not None else build_minibody()
    if cfg.stage == "mesh" and model is None:
        raise CheckpointError("stage 'mesh' starts from a lifting checkpoint (pass --checkpoint)")
    model = model or build_model(cfg, body)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    flags = cfg.flags
    report = RunReport("train", cfg.to_dict(), cfg.stage)
    done = {}

    def saver(path):
        save_checkpoint(path, model, cfg, cfg.stage, done)

    nan_ckpt = out / "last_good.ckpt" if out is not None else None
    stages = {"lift": ["lift"], "mesh": ["mesh"], "end2end": ["lift", "mesh"]}[cfg.stage]
    for i, stage in enumerate(stages):
        if stage == "lift":
            kw = dict(loss_fn=lift_loss, epochs=cfg.epochs, batch=cfg.batch, lr=cfg.lr)
        else:
            kw = dict(loss_fn=mesh_loss, epochs=cfg.epochs_mesh, batch=cfg.batch_mesh, lr=cfg.lr_mesh)
        stage_log = None if log is None else (lambda e, v, s=stage: log(s, e, v))
        report.losses[stage] = fit(model, train, weight_decay=cfg.weight_decay, lr_decay=cfg.lr_decay,
                                   seed=cfg.seed + 1000 * i, flags=flags, nan_checkpoint=nan_ckpt,
                                   save_fn=saver, log=stage_log, **kw)
        done[stage] = kw["epochs"]
    report.metrics = evaluate(model, train, flags, cfg.fps)
    if eval_data is not None:
        report.eval_metrics = evaluate(model, eval_data, flags, cfg.fps)
    report.extra = {"n_params": model.n_params(), "train_seeds": train.manifest.get("seeds", []),
                    "epochs_done": done}
    if out is not None:
        save_checkpoint(out / "model.ckpt", model, cfg, cfg.stage, done)
    report.wall_clock_s = time.time() - t0
    report.timestamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    return report, model


def run_eval(model: Model, data: Dataset, cfg: RunConfig) -> RunReport:
    t0 = time.time()
    report = RunReport("eval", cfg.to_dict(), "eval")
    report.metrics = evaluate(model, data, cfg.flags, cfg.fps)
    report.extra = {"n_params": model.n_params(), "seeds": data.manifest.get("seeds", [])}
    report.wall_clock_s = time.time() - t0
    report.timestamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    return report


def run_ablate(cfg: RunConfig, train: Dataset, log=None) -> RunReport:
    """Train and evaluate every ablation row from the same seed and data."""
    t0 = time.time()
    rows = []
    for flags in ABLATION_ROWS:
        rcfg = cfg.with_overrides(stage="end2end", ga=flags.ga, em=flags.em, im=flags.im)
        rep, _ = run_train(rcfg, train)
        rows.append({"GA": flags.ga, "EM": flags.em, "IM": flags.im, "label": flags.label, **rep.metrics})
        if log is not None:
            log(flags.label, rep.metrics)
    full = rows[-1]
    # soft check: the full model should not trail any single-ablation row (logged, not enforced)
    full_best = {m: all(full[m] <= r[m] for r in rows[:-1]) for m in METRIC_NAMES}
    report = RunReport("ablate", cfg.to_dict(), "end2end")
    report.extra = {"rows": rows, "columns": list(METRIC_NAMES), "full_model_best": full_best}
    report.wall_clock_s = time.time() - t0
    report.timestamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    return report


def ablation_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["GA", "EM", "IM", *METRIC_NAMES])
    for r in report.extra["rows"]:
        w.writerow([int(r["GA"]), int(r["EM"]), int(r["IM"]), *(repr(r[m]) for m in METRIC_NAMES)])
    return buf.getvalue()


def gt_fixture_metrics(data: Dataset, body: MiniBody, fps: float = 25.0) -> dict[str, float]:
    """Metrics with ground truth as prediction; all zero by construction."""
    return compute_metrics(data.p3d, data.p3d, data.mesh, data.mesh, body.joint_regressor, fps,
                           body.tree.root)

