"""Evaluation metrics in millimetres (Accel in mm/s^2). Inputs are metres."""
from __future__ import annotations

import numpy as np

METRIC_UNITS = {"MPJPE": "mm", "PA-MPJPE": "mm", "MPVPE": "mm", "Accel": "mm/s^2"}


class AlignmentError(ValueError):
    def __init__(self, frames):
        self.frames = list(frames)
        super().__init__(f"Procrustes alignment undefined (coincident joints) in frames {self.frames}")


class UndefinedMetricError(ValueError):
    pass


def _same(pred, gt, name):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"{name}: shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def root_align(joints, root: int = 0) -> np.ndarray:
    joints = np.asarray(joints, dtype=np.float64)
    return joints - joints[..., root:root + 1, :]


def mpjpe(pred, gt) -> float:
    pred, gt = _same(pred, gt, "mpjpe")
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def procrustes_align(pred, gt) -> np.ndarray:
    """Per-frame similarity transform (scale, rotation, translation) of ``pred`` onto ``gt``."""
    pred, gt = _same(pred, gt, "procrustes_align")
    shape = pred.shape
    X = pred.reshape(-1, shape[-2], 3)
    Y = gt.reshape(-1, shape[-2], 3)
    mx, my = X.mean(1, keepdims=True), Y.mean(1, keepdims=True)
    X0, Y0 = X - mx, Y - my
    var = (X0 ** 2).sum(axis=(1, 2))
    bad = np.flatnonzero(var <= 1e-20)
    if bad.size:
        raise AlignmentError(bad.tolist())
    H = np.swapaxes(X0, 1, 2) @ Y0
    U, S, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    sign = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    sign[sign == 0] = 1.0
    Z = np.tile(np.eye(3), (X.shape[0], 1, 1))
    Z[:, 2, 2] = sign
    R = V @ Z @ np.swapaxes(U, 1, 2)
    scale = (S * np.diagonal(Z, axis1=1, axis2=2)).sum(1) / var
    aligned = scale[:, None, None] * (X0 @ np.swapaxes(R, 1, 2)) + my
    return aligned.reshape(shape)


def pa_mpjpe(pred, gt) -> float:
    pred, gt = _same(pred, gt, "pa_mpjpe")
    return mpjpe(procrustes_align(pred, gt), gt)


def mpvpe(pred, gt, regressor, root: int = 0) -> float:
    """Vertex error after subtracting each mesh's own regressed root joint."""
    pred, gt = _same(pred, gt, "mpvpe")
    reg = np.asarray(regressor)[root]
    pa = pred - np.einsum("v,...va->...a", reg, pred)[..., None, :]
    ga = gt - np.einsum("v,...va->...a", reg, gt)[..., None, :]
    return float(np.linalg.norm(pa - ga, axis=-1).mean() * 1000.0)


def accel_error(pred, gt, fps: float = 25.0) -> float:
    pred, gt = _same(pred, gt, "accel_error")
    T = pred.shape[-3]
    if T < 3:
        raise UndefinedMetricError(f"accel_error needs at least 3 frames, got {T}")

    def accel(x):
        x = np.moveaxis(x, -3, 0)
        return (x[2:] - 2 * x[1:-1] + x[:-2]) * fps ** 2

    return float(np.linalg.norm(accel(pred) - accel(gt), axis=-1).mean() * 1000.0)


def metric_records(metrics: dict[str, float]) -> list[dict]:
    return [{"metric": k, "value": v, "units": METRIC_UNITS.get(k, "")} for k, v in metrics.items()]
