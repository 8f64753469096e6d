import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deskhmr.body import H36M_PARENTS, h36m_tree
from deskhmr.kinematics import (KinematicTree, ScanOrder, StructureError, bone_lengths, forward_kinematics,
                                kinematic_chains, kinematic_scan_order, project_orthographic,
                                rotation_matrices, temporal_chain_order)
from deskhmr.verify import order_violations, random_tree


def rodrigues(v):
    theta = np.linalg.norm(v)
    if theta == 0:
        return np.eye(3)
    k = v / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


def fk_oracle(tree, angles):
    """Recursive homogeneous-transform composition, one frame."""
    J = tree.n_joints
    out = np.zeros((J, 3))

    def world(j):
        M = np.eye(4)
        M[:3, :3] = rodrigues(angles[j])
        if tree.parent[j] >= 0:
            M[:3, 3] = tree.bone_rest[j]
            return world(tree.parent[j]) @ M
        return M

    for j in range(J):
        out[j] = world(j)[:3, 3]
    return out


def test_h36m_scan_order_is_index_order():
    order = kinematic_scan_order(h36m_tree())
    assert order.perm.tolist() == list(range(17))


def test_h36m_chains():
    assert kinematic_chains(h36m_tree()) == [[0, 1, 2, 3], [4, 5, 6], [7, 8, 9, 10], [11, 12, 13], [14, 15, 16]]


def test_siblings_visited_in_ascending_index():
    tree = KinematicTree(np.array([-1, 0, 0, 1, 0]), None)
    assert kinematic_scan_order(tree).perm.tolist() == [0, 1, 3, 2, 4]


@given(st.integers(1, 32), st.integers(0, 2**31 - 1))
def test_random_tree_orders_are_valid(J, seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, J)
    assert order_violations(tree, kinematic_scan_order(tree)) == []
    chains = kinematic_chains(tree)
    assert sorted(j for c in chains for j in c) == list(range(J))
    T = int(rng.integers(1, 6))
    for fm in (True, False):
        tp = temporal_chain_order(tree, T, frame_major=fm)
        assert sorted(tp.perm.tolist()) == list(range(T * J))


def test_temporal_chain_order_is_causal_within_each_joint():
    T = 4
    order = temporal_chain_order(h36m_tree(), T)
    pos = order.inverse
    for j in range(17):
        slots = [pos[t * 17 + j] for t in range(T)]
        assert slots == sorted(slots)
    # one segment per chain
    assert order.resets.sum() == len(kinematic_chains(h36m_tree())) - 1


@pytest.mark.parametrize("parents", [[0, 0, 1], [-1, -1, 0], [-1, 2, 1], [-1, 5, 0]])
def test_malformed_trees_are_rejected(parents):
    with pytest.raises(StructureError):
        KinematicTree(np.array(parents), None)


def test_scan_order_rejects_non_permutation():
    with pytest.raises(StructureError):
        ScanOrder(np.array([0, 0, 1]))


def test_rotation_matrices_match_rodrigues(rng):
    v = rng.normal(size=(5, 3))
    R = rotation_matrices(v)
    for i in range(5):
        np.testing.assert_allclose(R[i], rodrigues(v[i]), atol=1e-14)


def test_fk_matches_recursive_oracle(rng):
    tree = h36m_tree()
    angles = rng.normal(scale=0.5, size=(3, 17, 3))
    p = forward_kinematics(tree, angles)
    for t in range(3):
        np.testing.assert_allclose(p[t], fk_oracle(tree, angles[t]), atol=1e-14)


def test_fk_preserves_bone_lengths(rng):
    tree = h36m_tree()
    p = forward_kinematics(tree, rng.normal(size=(6, 17, 3)))
    rest = np.linalg.norm(np.array(tree.bone_rest)[np.array(H36M_PARENTS) >= 0], axis=-1)
    np.testing.assert_allclose(bone_lengths(tree, p), np.broadcast_to(rest, (6, 16)), atol=1e-14)


def test_projection_drops_depth():
    p = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(project_orthographic(p), [[1.0, 2.0]])
    np.testing.assert_allclose(project_orthographic(p, 2.0, (1.0, -1.0)), [[3.0, 3.0]])
    with pytest.raises(ValueError):
        project_orthographic(p, 0.0)
