"""Kinematic trees, the scan orders that traverse them, and forward kinematics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .autodiff import Tensor, add, mul, slice as tslice


class StructureError(ValueError):
    """The parent array does not describe a single rooted tree."""


@dataclass
class KinematicTree:
    parent: np.ndarray
    bone_rest: np.ndarray            # (J, 3) offset from parent, meters; root row unused
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        J = self.parent.size
        self.bone_rest = (np.zeros((J, 3)) if self.bone_rest is None
                          else np.asarray(self.bone_rest, dtype=np.float64).reshape(J, 3))
        if not self.names:
            self.names = [f"j{j}" for j in range(J)]
        self.validate()

    @property
    def n_joints(self) -> int:
        return int(self.parent.size)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent == -1)[0])

    def children(self, j: int) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.parent == j)]

    def validate(self) -> None:
        J = self.parent.size
        roots = np.flatnonzero(self.parent == -1)
        if roots.size != 1:
            raise StructureError(f"expected exactly one root, found {roots.size}")
        bad = (self.parent < -1) | (self.parent >= J)
        if bad.any():
            raise StructureError(f"parent indices out of range at joints {np.flatnonzero(bad).tolist()}")
        for j in range(J):
            seen = set()
            k = j
            while k != -1:
                if k in seen:
                    raise StructureError(f"cycle through joint {k}")
                seen.add(k)
                k = int(self.parent[k])

    def leaves(self) -> list[int]:
        return [j for j in range(self.n_joints) if not self.children(j)]


@dataclass
class ScanOrder:
    """A permutation of token slots plus the segment each scanned position belongs to.

    ``perm[i]`` is the slot visited at scan position ``i``. Positions whose
    ``segments`` id differs from their predecessor start a fresh scan state.
    """
    perm: np.ndarray
    segments: np.ndarray | None = None

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        n = self.perm.size
        if self.segments is None:
            self.segments = np.zeros(n, dtype=np.int64)
        self.segments = np.asarray(self.segments, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(n)):
            raise StructureError("scan order is not a permutation")
        if self.segments.shape != (n,):
            raise StructureError("segments must align with perm")

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv

    @property
    def resets(self) -> np.ndarray:
        r = np.zeros(self.perm.size, dtype=bool)
        r[1:] = self.segments[1:] != self.segments[:-1]
        return r

    def __len__(self) -> int:
        return int(self.perm.size)

    @classmethod
    def identity(cls, n: int) -> "ScanOrder":
        return cls(np.arange(n))


def kinematic_scan_order(tree: KinematicTree) -> ScanOrder:
    """Depth-first preorder from the root; siblings in ascending joint index."""
    tree.validate()
    order: list[int] = []
    stack = [tree.root]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(tree.children(j)))
    return ScanOrder(np.array(order))


def kinematic_chains(tree: KinematicTree) -> list[list[int]]:
    """Root-to-leaf chains in scan order, each joint kept only in the first chain containing it."""
    order = kinematic_scan_order(tree).perm
    pos = {int(j): i for i, j in enumerate(order)}
    leaves = sorted(tree.leaves(), key=pos.__getitem__)
    taken: set[int] = set()
    chains = []
    for leaf in leaves:
        path = []
        k = leaf
        while k != -1:
            path.append(k)
            k = int(tree.parent[k])
        chain = [j for j in reversed(path) if j not in taken]
        taken.update(chain)
        chains.append(chain)
    return chains


def temporal_chain_order(tree: KinematicTree, T: int, frame_major: bool = True) -> ScanOrder:
    """Order over the T*J slots ``t*J + j``: chain by chain, frame-major within a chain.

    Each chain is its own segment, so the scan state does not carry from one
    chain's last frame into the next chain's first frame. ``frame_major=False``
    walks each joint of the chain through all frames before the next joint.
    """
    if T < 1:
        raise ValueError("temporal_chain_order: T must be >= 1")
    J = tree.n_joints
    perm, seg = [], []
    for c, chain in enumerate(kinematic_chains(tree)):
        if frame_major:
            slots = [t * J + j for t in range(T) for j in chain]
        else:
            slots = [t * J + j for j in chain for t in range(T)]
        perm.extend(slots)
        seg.extend([c] * len(slots))
    return ScanOrder(np.array(perm), np.array(seg))


def rotation_matrices(angles) -> np.ndarray:
    a = np.asarray(angles, dtype=np.float64)
    return Rotation.from_rotvec(a.reshape(-1, 3)).as_matrix().reshape(a.shape[:-1] + (3, 3))


def global_transforms(tree: KinematicTree, angles) -> tuple[np.ndarray, np.ndarray]:
    """Global rotations (T, J, 3, 3) and joint positions (T, J, 3) for axis-angle input."""
    angles = np.asarray(angles, dtype=np.float64)
    if angles.ndim == 2:
        angles = angles[None]
    T, J, _ = angles.shape
    if J != tree.n_joints:
        raise ValueError(f"angles have {J} joints, tree has {tree.n_joints}")
    local = rotation_matrices(angles)
    rot = np.empty_like(local)
    pos = np.zeros((T, J, 3))
    for j in kinematic_scan_order(tree).perm:
        p = tree.parent[j]
        if p < 0:
            rot[:, j] = local[:, j]
            continue
        rot[:, j] = rot[:, p] @ local[:, j]
        pos[:, j] = pos[:, p] + rot[:, p] @ tree.bone_rest[j]
    return rot, pos


def forward_kinematics(tree: KinematicTree, angles) -> np.ndarray:
    return global_transforms(tree, angles)[1]


def rest_joints(tree: KinematicTree) -> np.ndarray:
    return forward_kinematics(tree, np.zeros((1, tree.n_joints, 3)))[0]


def bone_lengths(tree: KinematicTree, joints) -> np.ndarray:
    """Per-frame bone lengths (T, J-1) for every non-root joint."""
    joints = np.asarray(joints)
    nonroot = np.flatnonzero(tree.parent >= 0)
    return np.linalg.norm(joints[..., nonroot, :] - joints[..., tree.parent[nonroot], :], axis=-1)


def project_orthographic(p, scale: float = 1.0, center=(0.0, 0.0)):
    """``(x, y) = scale * (X, Y) + center``; works on arrays and tape tensors."""
    if not scale > 0:
        raise ValueError("project_orthographic: scale must be > 0")
    center = np.asarray(center, dtype=np.float64)
    if isinstance(p, Tensor):
        return add(mul(tslice(p, -1, 0, 2), scale), center)
    p = np.asarray(p, dtype=np.float64)
    return scale * p[..., :2] + center
