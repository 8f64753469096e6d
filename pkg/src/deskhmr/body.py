"""MiniBody: a 17-joint skinned capsule body standing in for a full body model.

Every bone is a closed capsule of hexagonal rings plus two poles. Ring counts
are spread over bones in proportion to bone length so the whole template has
602 vertices. The joint regressor averages one ring centred on each joint,
which makes it exact both at rest and under blend skinning (ring weights are
uniform around the ring).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kinematics import KinematicTree, global_transforms, rest_joints

FORMAT_VERSION = 1
N_VERTICES = 602
RING_SIDES = 6

H36M_NAMES = [
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
]
H36M_PARENTS = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]
# +x is the body's left, +y up, +z forward
H36M_BONES = [
    (0.0, 0.0, 0.0),
    (-0.12, 0.0, 0.0), (0.0, -0.42, 0.0), (0.0, -0.40, 0.0),
    (0.12, 0.0, 0.0), (0.0, -0.42, 0.0), (0.0, -0.40, 0.0),
    (0.0, 0.22, 0.0), (0.0, 0.24, 0.0), (0.0, 0.10, 0.0), (0.0, 0.14, 0.0),
    (0.17, 0.0, 0.0), (0.27, 0.0, 0.0), (0.25, 0.0, 0.0),
    (-0.17, 0.0, 0.0), (-0.27, 0.0, 0.0), (-0.25, 0.0, 0.0),
]
BONE_RADIUS = {
    "r_hip": 0.07, "l_hip": 0.07, "r_knee": 0.065, "l_knee": 0.065,
    "r_ankle": 0.05, "l_ankle": 0.05, "spine": 0.12, "thorax": 0.13,
    "neck": 0.05, "head": 0.09, "l_shoulder": 0.05, "r_shoulder": 0.05,
    "l_elbow": 0.045, "r_elbow": 0.045, "l_wrist": 0.035, "r_wrist": 0.035,
}


def h36m_tree() -> KinematicTree:
    return KinematicTree(np.array(H36M_PARENTS), np.array(H36M_BONES), list(H36M_NAMES))


@dataclass
class MiniBody:
    tree: KinematicTree
    template_vertices: np.ndarray    # (N_v, 3)
    skin_weights: np.ndarray         # (N_v, J)
    joint_regressor: np.ndarray      # (J, N_v)
    faces: np.ndarray                # (F, 3) int
    vertex_bone: np.ndarray          # (N_v,) child joint of the bone each vertex belongs to

    @property
    def n_vertices(self) -> int:
        return int(self.template_vertices.shape[0])

    @property
    def n_joints(self) -> int:
        return self.tree.n_joints

    def edges(self) -> np.ndarray:
        return mesh_edges(self.faces)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "names": list(self.tree.names),
            "parents": self.tree.parent.tolist(),
            "bone_rest": self.tree.bone_rest.tolist(),
            "template_vertices": self.template_vertices.tolist(),
            "skin_weights": self.skin_weights.tolist(),
            "joint_regressor": self.joint_regressor.tolist(),
            "faces": self.faces.tolist(),
            "vertex_bone": self.vertex_bone.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MiniBody":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported MiniBody format_version {d.get('format_version')!r}")
        tree = KinematicTree(np.array(d["parents"]), np.array(d["bone_rest"]), list(d["names"]))
        return cls(tree, np.array(d["template_vertices"], dtype=np.float64),
                   np.array(d["skin_weights"], dtype=np.float64),
                   np.array(d["joint_regressor"], dtype=np.float64),
                   np.array(d["faces"], dtype=np.int64), np.array(d["vertex_bone"], dtype=np.int64))

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json_bytes()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_json_bytes())

    @classmethod
    def load(cls, path) -> "MiniBody":
        return cls.from_dict(json.loads(Path(path).read_bytes()))


def _ring_counts(lengths: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder split of ``total`` rings over bones, at least 2 each."""
    n = lengths.size
    spare = total - 2 * n
    share = lengths / lengths.sum() * spare
    base = np.floor(share).astype(int)
    order = np.argsort(-(share - base), kind="stable")
    base[order[: spare - base.sum()]] += 1
    return base + 2


def _frame(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def build_minibody() -> MiniBody:
    tree = h36m_tree()
    J = tree.n_joints
    rest = rest_joints(tree)
    bones = [j for j in range(J) if tree.parent[j] >= 0]
    lengths = np.array([np.linalg.norm(tree.bone_rest[j]) for j in bones])
    n_rings_total = (N_VERTICES - 2 * len(bones)) // RING_SIDES
    rings = _ring_counts(lengths, n_rings_total)

    verts, weights, faces, owner = [], [], [], []
    ring_index: dict[tuple[int, str], list[int]] = {}
    theta = 2 * np.pi * np.arange(RING_SIDES) / RING_SIDES
    for c, n_ring in zip(bones, rings):
        p = int(tree.parent[c])
        pp = int(tree.parent[p])
        a, b = rest[p], rest[c]
        u = (b - a) / np.linalg.norm(b - a)
        e1, e2 = _frame(u)
        r = BONE_RADIUS[tree.names[c]]
        base = len(verts)

        def w_row(s: float) -> np.ndarray:
            w = np.zeros(J)
            wc = 0.5 * _smoothstep((s - 0.6) / 0.4)
            wpp = 0.5 * _smoothstep((0.4 - s) / 0.4) if pp >= 0 else 0.0
            w[c] += wc
            if pp >= 0:
                w[pp] += wpp
            w[p] += 1.0 - wc - wpp
            return w

        for i in range(n_ring):
            s = i / (n_ring - 1)
            centre = a + s * (b - a)
            for th in theta:
                verts.append(centre + r * (np.cos(th) * e1 + np.sin(th) * e2))
                weights.append(w_row(s))
                owner.append(c)
        verts.append(a - r * u)
        weights.append(w_row(0.0))
        owner.append(c)
        verts.append(b + r * u)
        weights.append(w_row(1.0))
        owner.append(c)
        pole0, pole1 = base + n_ring * RING_SIDES, base + n_ring * RING_SIDES + 1
        ring_index[(c, "start")] = list(range(base, base + RING_SIDES))
        ring_index[(c, "end")] = list(range(base + (n_ring - 1) * RING_SIDES, base + n_ring * RING_SIDES))

        bone_faces = []
        for i in range(n_ring - 1):
            for k in range(RING_SIDES):
                k1 = (k + 1) % RING_SIDES
                v00, v01 = base + i * RING_SIDES + k, base + i * RING_SIDES + k1
                v10, v11 = v00 + RING_SIDES, v01 + RING_SIDES
                bone_faces += [[v00, v01, v11], [v00, v11, v10]]
        last = base + (n_ring - 1) * RING_SIDES
        for k in range(RING_SIDES):
            k1 = (k + 1) % RING_SIDES
            bone_faces.append([pole0, base + k1, base + k])
            bone_faces.append([pole1, last + k, last + k1])
        mid = 0.5 * (a + b)
        V = np.array(verts)
        for f in bone_faces:
            n = np.cross(V[f[1]] - V[f[0]], V[f[2]] - V[f[0]])
            if n @ (V[f].mean(0) - mid) < 0:
                f[1], f[2] = f[2], f[1]
        faces += bone_faces

    V = np.array(verts)
    W = np.array(weights)
    reg = np.zeros((J, V.shape[0]))
    for j in range(J):
        kids = tree.children(j)
        ring = ring_index[(kids[0], "start")] if kids else ring_index[(j, "end")]
        reg[j, ring] = 1.0 / RING_SIDES
    return MiniBody(tree, V, W, reg, np.array(faces, dtype=np.int64), np.array(owner, dtype=np.int64))


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges (E, 2), lower index first, sorted."""
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def skin_mesh(body: MiniBody, angles) -> np.ndarray:
    """Linear blend skinning of the template for axis-angle ``angles`` (T, J, 3) -> (T, N_v, 3)."""
    angles = np.asarray(angles, dtype=np.float64)
    if angles.ndim == 2:
        angles = angles[None]
    rot, pos = global_transforms(body.tree, angles)
    rest = rest_joints(body.tree)
    V = body.template_vertices
    # written as a displacement so the zero pose returns the template bit-for-bit
    rel = V[None, :, :] - rest[:, None, :]                              # (J, N_v, 3)
    moved = np.einsum("tjab,jvb->tjva", rot - np.eye(3), rel) + (pos - rest)[:, :, None, :]
    return V[None] + np.einsum("vj,tjva->tva", body.skin_weights, moved)


def regress_joints(body: MiniBody, vertices) -> np.ndarray:
    return np.einsum("jv,...va->...ja", body.joint_regressor, np.asarray(vertices))
