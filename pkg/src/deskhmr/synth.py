"""Procedural training data: harmonic joint-angle motions on MiniBody with
ground-truth joints and meshes, noisy/occluded 2D keypoints, and feature grids
that light up around the visible joints.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import container
from .body import MiniBody, skin_mesh
from .kinematics import bone_lengths, forward_kinematics, project_orthographic

# per-joint angle scale (x, y, z) relative to the motion amplitude
JOINT_LIMITS = np.array([
    [0.25, 0.5, 0.25],                                      # pelvis
    [1.0, 0.3, 0.4], [1.2, 0.1, 0.1], [0.4, 0.2, 0.2],      # right leg
    [1.0, 0.3, 0.4], [1.2, 0.1, 0.1], [0.4, 0.2, 0.2],      # left leg
    [0.4, 0.4, 0.3], [0.3, 0.3, 0.3], [0.5, 0.6, 0.4], [0.3, 0.3, 0.3],
    [0.6, 0.8, 1.0], [0.3, 1.2, 0.8], [0.3, 0.3, 0.3],      # left arm
    [0.6, 0.8, 1.0], [0.3, 1.2, 0.8], [0.3, 0.3, 0.3],      # right arm
])
GRID_SIGMA = 0.12
GRID_NOISE = 0.02
_CODE_SEED = 20240917
_PROJ_SEED = 7


@dataclass(frozen=True)
class MotionSpec:
    seed: int = 0
    T: int = 16
    amplitude: float = 0.6
    n_harmonics: int = 3
    occlusion_rate: float = 0.05
    keypoint_noise_sigma: float = 0.005
    stride: int = 4
    native_fps: float = 50.0
    grid_size: int = 16
    grid_channels: int = 8

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("MotionSpec: T must be >= 1")
        if not 0.0 <= self.amplitude <= np.pi:
            raise ValueError("MotionSpec: amplitude must lie in [0, pi]")
        if not 0.0 <= self.occlusion_rate < 1.0:
            raise ValueError("MotionSpec: occlusion_rate must lie in [0, 1)")
        if self.keypoint_noise_sigma < 0 or self.n_harmonics < 1 or self.stride < 1:
            raise ValueError("MotionSpec: invalid noise, harmonics or stride")
        if self.grid_size < 2 or self.grid_channels < 3:
            raise ValueError("MotionSpec: grid needs >= 2 cells and >= 3 channels")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MotionSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Sample:
    p2d_noisy: np.ndarray    # (T, J, 2)
    p3d_gt: np.ndarray       # (T, J, 3), root-relative
    mesh_gt: np.ndarray      # (T, N_v, 3)
    grid: np.ndarray         # (T, H, W, C)
    visibility: np.ndarray   # (T, J) bool
    angles: np.ndarray       # (T, J, 3)


def joint_codes(n_joints: int, channels: int) -> np.ndarray:
    return np.random.default_rng(_CODE_SEED).uniform(-1.0, 1.0, size=(n_joints, channels))


def motion_angles(spec: MotionSpec, n_joints: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(spec.T) * spec.stride / spec.native_fps
    h = np.arange(1, spec.n_harmonics + 1)
    base = rng.uniform(0.3, 0.8, size=(n_joints, 3, 1))
    phase = rng.uniform(0.0, 2 * np.pi, size=(n_joints, 3, spec.n_harmonics))
    weight = rng.uniform(0.5, 1.0, size=(n_joints, 3, spec.n_harmonics)) / h
    weight /= weight.sum(-1, keepdims=True)
    freq = base * h                                                   # Hz
    arg = 2 * np.pi * freq[..., None] * t + phase[..., None]          # (J, 3, H, T)
    wave = (weight[..., None] * np.sin(arg)).sum(2)                   # (J, 3, T)
    limits = JOINT_LIMITS if n_joints == JOINT_LIMITS.shape[0] else np.ones((n_joints, 3))
    return spec.amplitude * np.moveaxis(limits[..., None] * wave, -1, 0)


def feature_grid(p2d_clean: np.ndarray, p3d: np.ndarray, visibility: np.ndarray, spec: MotionSpec,
                 rng: np.random.Generator) -> np.ndarray:
    """Gaussian bumps at visible joints: identity codes, a depth channel, a presence channel."""
    T, J, _ = p2d_clean.shape
    S, C = spec.grid_size, spec.grid_channels
    axis = np.linspace(-1.0, 1.0, S)
    gy, gx = np.meshgrid(axis, axis, indexing="ij")
    d2 = (gx[None, None] - p2d_clean[..., 0, None, None]) ** 2 + (gy[None, None] - p2d_clean[..., 1, None, None]) ** 2
    bump = np.exp(-d2 / (2 * GRID_SIGMA ** 2)) * visibility[..., None, None]   # (T, J, S, S)
    codes = joint_codes(J, C - 2)
    grid = np.empty((T, S, S, C))
    grid[..., : C - 2] = np.einsum("tjyx,jc->tyxc", bump, codes)
    grid[..., C - 2] = np.einsum("tjyx,tj->tyx", bump, p3d[..., 2])
    grid[..., C - 1] = bump.sum(1)
    return grid + rng.normal(0.0, GRID_NOISE, size=grid.shape)


def generate_motion(spec: MotionSpec, body: MiniBody) -> Sample:
    rng = np.random.default_rng(spec.seed)
    J = body.n_joints
    angles = motion_angles(spec, J, rng)
    p3d = forward_kinematics(body.tree, angles)
    mesh = skin_mesh(body, angles)
    clean = project_orthographic(p3d)
    noisy = clean + rng.normal(0.0, 1.0, size=clean.shape) * spec.keypoint_noise_sigma
    visibility = rng.random((spec.T, J)) >= spec.occlusion_rate
    noisy = np.where(visibility[..., None], noisy, 0.0)
    grid = feature_grid(clean, p3d, visibility, spec, rng)
    return Sample(noisy, p3d, mesh, grid, visibility, angles)


def frame_features(grid: np.ndarray, dim: int, cells: int = 4) -> np.ndarray:
    """Frozen stand-in for an image backbone: pooled grid cells through a fixed projection."""
    grid = np.asarray(grid)
    lead = grid.shape[:-3]
    S, _, C = grid.shape[-3:]
    rows = np.array_split(np.arange(S), cells)
    pooled = np.stack([np.stack([grid[..., r[:, None], c[None, :], :].mean(axis=(-3, -2))
                                 for c in rows], -2) for r in rows], -3)
    flat = pooled.reshape(lead + (cells * cells * C,))
    proj = np.random.default_rng(_PROJ_SEED).normal(size=(flat.shape[-1], dim)) / np.sqrt(flat.shape[-1])
    return flat @ proj


# ----------------------------------------------------------------------------
# datasets

_ARRAYS = ("p2d", "p3d", "mesh", "grid", "visibility", "f_img")


@dataclass
class Dataset:
    manifest: dict
    p2d: np.ndarray          # (S, T, J, 2)
    p3d: np.ndarray          # (S, T, J, 3)
    mesh: np.ndarray         # (S, T, N_v, 3)
    grid: np.ndarray         # (S, T, H, W, C)
    visibility: np.ndarray   # (S, T, J)
    f_img: np.ndarray        # (S, T, D_img)

    def __len__(self) -> int:
        return int(self.p2d.shape[0])

    @property
    def spec(self) -> MotionSpec:
        return MotionSpec.from_dict(self.manifest["spec"])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.manifest, *(getattr(self, k)[idx] for k in _ARRAYS))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in _ARRAYS}

    def to_bytes(self) -> bytes:
        return container.dumps("dataset", self.manifest, self.arrays())

    def save(self, path) -> None:
        container.save(path, "dataset", self.manifest, self.arrays())

    @classmethod
    def load(cls, path, body: MiniBody | None = None) -> "Dataset":
        meta, arrays = container.load(path, kind="dataset")
        missing = [k for k in _ARRAYS if k not in arrays]
        if missing:
            raise container.ContainerError(f"dataset file lacks arrays {missing}")
        ds = cls(meta, *(arrays[k] for k in _ARRAYS))
        ds.validate(body)
        return ds

    def validate(self, body: MiniBody | None = None) -> None:
        S, T, J = self.p2d.shape[:3]
        checks = {
            "p3d": (S, T, J, 3), "visibility": (S, T, J),
        }
        for k, shape in checks.items():
            if getattr(self, k).shape != shape:
                raise container.ContainerError(f"{k} has shape {getattr(self, k).shape}, expected {shape}")
        for k in ("mesh", "grid", "f_img"):
            if getattr(self, k).shape[:2] != (S, T):
                raise container.ContainerError(f"{k} leading dims {getattr(self, k).shape[:2]} != {(S, T)}")
        if len(self.manifest.get("seeds", [])) != S:
            raise container.ContainerError("manifest seed list does not match sample count")
        for k in _ARRAYS:
            a = getattr(self, k)
            if a.dtype != np.bool_ and not np.all(np.isfinite(a)):
                raise container.ContainerError(f"{k} contains non-finite values")
        if np.any(self.p2d[~self.visibility] != 0.0):
            raise container.ContainerError("occluded joints must have zeroed 2D coordinates")
        if body is not None:
            lengths = bone_lengths(body.tree, self.p3d)
            if np.abs(lengths - lengths[:, :1]).max() > 1e-9:
                raise container.ContainerError("ground-truth bone lengths vary over time")


def build_dataset(seeds, spec: MotionSpec, body: MiniBody, img_dim: int, split: str) -> Dataset:
    samples = [generate_motion(replace(spec, seed=int(s)), body) for s in seeds]
    grid = np.stack([s.grid for s in samples])
    spec_d = spec.to_dict()
    spec_d.pop("seed")
    manifest = {"format_version": container.FORMAT_VERSION, "split": split, "seeds": [int(s) for s in seeds],
                "spec": spec_d, "img_dim": img_dim}
    return Dataset(manifest,
                   np.stack([s.p2d_noisy for s in samples]),
                   np.stack([s.p3d_gt for s in samples]),
                   np.stack([s.mesh_gt for s in samples]),
                   grid,
                   np.stack([s.visibility for s in samples]),
                   frame_features(grid, img_dim))


def split_seeds(seed: int, n_train: int, n_eval: int) -> tuple[list[int], list[int]]:
    if n_train < 1 or n_eval < 1:
        raise ValueError("make_split: n_train and n_eval must be >= 1")
    base = int(seed) * 1_000_000
    train = [base + i for i in range(n_train)]
    return train, [base + n_train + i for i in range(n_eval)]


def make_split(seed: int, n_train: int, n_eval: int, spec: MotionSpec, body: MiniBody,
               img_dim: int = 64) -> tuple[Dataset, Dataset]:
    train_seeds, eval_seeds = split_seeds(seed, n_train, n_eval)
    return (build_dataset(train_seeds, spec, body, img_dim, "train"),
            build_dataset(eval_seeds, spec, body, img_dim, "eval"))
