"""Rotations, forward kinematics, skinning, rigid alignment."""

import numpy as np
import pytest

from handavatar import kin, synth, tape
from handavatar.kin import (IDENT6, Pose, dof6_mask, forward_kinematics,
                            linear_blend_skin, matrix_to_rot6d,
                            pose_rotations, rigid_align, rot6d_to_matrix,
                            squared_rotation_angle)
from handavatar.tape import Params, Tensor, finite_diff_check


def _random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


def _random_tree(rng, nj):
    parent = np.full(nj, -1, dtype=np.int64)
    for j in range(1, nj):
        parent[j] = rng.integers(0, j)
    return parent


def _fk_oracle(rest_joints, parent, rots, g=None, gt=None):
    """Brute-force matrix-chain reference: per joint, multiply the 4x4
    rest-relative transforms from the root down."""
    nj = len(parent)

    def local(j):
        m = np.eye(4)
        m[:3, :3] = rots[j]
        m[:3, 3] = rest_joints[j] - rots[j] @ rest_joints[j]
        return m

    def chain(j):
        m = local(j)
        p = parent[j]
        while p >= 0:
            m = local(p) @ m
            p = parent[p]
        if g is not None:
            root = int(np.flatnonzero(parent < 0)[0])
            og = np.eye(4)
            og[:3, :3] = g
            og[:3, 3] = rest_joints[root] - g @ rest_joints[root] + \
                (gt if gt is not None else 0.0)
            m = og @ m
        return m

    out = np.zeros((nj, 3))
    for j in range(nj):
        m = chain(j)
        out[j] = m[:3, :3] @ rest_joints[j] + m[:3, 3]
    return out


class TestRot6d:
    def test_identity_roundtrip(self):
        r = rot6d_to_matrix(IDENT6)
        assert np.allclose(r.data, np.eye(3))

    def test_orthonormal_and_det_one(self):
        rng = np.random.default_rng(0)
        r6 = rng.standard_normal((10, 6))
        r = rot6d_to_matrix(r6).data
        eye = np.einsum("jab,jcb->jac", r, r)
        assert np.abs(eye - np.eye(3)).max() < 1e-12
        assert np.allclose(np.linalg.det(r), 1.0)

    def test_matrix_roundtrip(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = _random_rotation(rng)
            back = rot6d_to_matrix(matrix_to_rot6d(m)).data
            assert np.abs(back - m).max() < 1e-12

    def test_degenerate_input_rejected(self):
        r6 = np.array([1.0, 0, 0, 2.0, 0, 0])   # parallel vectors
        with pytest.raises(ValueError, match="degenerate"):
            rot6d_to_matrix(r6)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        p = Params()
        p.add("r6", rng.standard_normal(6))
        tgt = _random_rotation(rng)

        def build():
            r = rot6d_to_matrix(p["r6"])
            return tape.tsum((r - tgt) ** 2)

        err, name = finite_diff_check(build, p)
        assert err < 1e-6


class TestDofMask:
    def test_locked_joint_fully_masked(self):
        m = dof6_mask(np.array([[False, False, False]]))
        assert np.array_equal(m[0], np.zeros(6))

    def test_flex_only_frees_two_entries(self):
        m = dof6_mask(np.array([[True, False, False]]))
        assert np.array_equal(m[0], [0, 0, 0, 0, 1, 1])

    def test_free_joint_unmasked(self):
        m = dof6_mask(np.array([[True, True, True]]))
        assert np.array_equal(m[0], np.ones(6))


class TestForwardKinematics:
    def test_identity_pose_is_noop(self):
        mesh, _ = synth.build_template("mini")
        rots = np.broadcast_to(np.eye(3), (mesh.num_joints, 3, 3)).copy()
        tf = forward_kinematics(mesh.rest_joints, mesh.parent, Tensor(rots))
        assert np.abs(tf.joints.data - mesh.rest_joints).max() < 1e-12

    def test_matches_matrix_chain_oracle_random_trees(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            nj = int(rng.integers(2, 12))
            parent = _random_tree(rng, nj)
            rest = rng.uniform(-50, 50, size=(nj, 3))
            rots = np.stack([_random_rotation(rng) for _ in range(nj)])
            g = _random_rotation(rng)
            gt = rng.uniform(-20, 20, size=3)
            tf = forward_kinematics(rest, parent, Tensor(rots), Tensor(g),
                                    Tensor(gt))
            oracle = _fk_oracle(rest, parent, rots, g, gt)
            assert np.abs(tf.joints.data - oracle).max() < 1e-8

    def test_global_transform_pivots_at_root(self):
        mesh, _ = synth.build_template("mini")
        nj = mesh.num_joints
        rots = np.broadcast_to(np.eye(3), (nj, 3, 3)).copy()
        g = _random_rotation(np.random.default_rng(4))
        tf = forward_kinematics(mesh.rest_joints, mesh.parent, Tensor(rots),
                                Tensor(g), Tensor(np.zeros(3)))
        root = int(np.flatnonzero(mesh.parent < 0)[0])
        assert np.abs(tf.joints.data[root] - mesh.rest_joints[root]).max() < 1e-9

    def test_invalid_tree_rejected(self):
        parent = np.array([1, 0])   # two-node cycle
        rots = Tensor(np.broadcast_to(np.eye(3), (2, 3, 3)).copy())
        with pytest.raises(ValueError):
            forward_kinematics(np.zeros((2, 3)), parent, rots)


class TestSkinning:
    def test_identity_transforms_reproduce_vertices(self):
        mesh, _ = synth.build_template("mini")
        rots = np.broadcast_to(np.eye(3), (mesh.num_joints, 3, 3)).copy()
        tf = forward_kinematics(mesh.rest_joints, mesh.parent, Tensor(rots))
        v = linear_blend_skin(mesh.rest_vertices, mesh.skin_weights, tf)
        assert np.abs(v.data - mesh.rest_vertices).max() < 1e-9

    def test_single_weight_follows_joint_rigidly(self):
        rng = np.random.default_rng(5)
        rest_j = np.array([[0.0, 0, 0], [10.0, 0, 0]])
        parent = np.array([-1, 0])
        rots = np.stack([np.eye(3), _random_rotation(rng)])
        tf = forward_kinematics(rest_j, parent, Tensor(rots))
        v = np.array([[12.0, 3.0, -2.0]])
        w = np.array([[0.0, 1.0]])
        out = linear_blend_skin(v, w, tf).data[0]
        expect = rots[1] @ (v[0] - rest_j[1]) + rest_j[1]
        assert np.abs(out - expect).max() < 1e-9

    def test_unnormalized_weights_rejected(self):
        mesh, _ = synth.build_template("mini")
        rots = np.broadcast_to(np.eye(3), (mesh.num_joints, 3, 3)).copy()
        tf = forward_kinematics(mesh.rest_joints, mesh.parent, Tensor(rots))
        with pytest.raises(ValueError):
            linear_blend_skin(mesh.rest_vertices, mesh.skin_weights * 0.5, tf)


class TestSquaredRotationAngle:
    def test_known_angle(self):
        ang = 0.73
        c, s = np.cos(ang), np.sin(ang)
        r = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        out = squared_rotation_angle(Tensor(r[None]))
        assert np.allclose(out.data, [ang * ang])

    def test_gradient_finite_at_identity(self):
        p = Params()
        p.add("r6", np.zeros(6))

        def build():
            r = rot6d_to_matrix(p["r6"] + IDENT6)
            return tape.tsum(squared_rotation_angle(tape.reshape(r, (1, 3, 3))))

        loss = build()
        loss.backward()
        assert np.isfinite(p["r6"].grad).all()


class TestRigidAlign:
    def test_recovers_known_transform(self):
        rng = np.random.default_rng(6)
        src = rng.uniform(-30, 30, size=(12, 3))
        r = _random_rotation(rng)
        t = rng.uniform(-10, 10, size=3)
        dst = src @ r.T + t
        r2, t2 = rigid_align(src, dst)
        assert np.abs(r2 - r).max() < 1e-9
        assert np.abs(t2 - t).max() < 1e-9

    def test_reflection_not_allowed(self):
        rng = np.random.default_rng(7)
        src = rng.uniform(-30, 30, size=(20, 3))
        dst = src * np.array([-1.0, 1.0, 1.0])   # mirrored cloud
        r, t = rigid_align(src, dst)
        assert np.linalg.det(r) > 0.999


class TestPoseSerialization:
    def test_json_roundtrip(self):
        rng = np.random.default_rng(8)
        p = Pose(rng.standard_normal((21, 6)), rng.standard_normal(6),
                 rng.standard_normal(3))
        q = Pose.from_json(p.to_json())
        assert np.array_equal(p.theta, q.theta)
        assert np.array_equal(p.global_rot, q.global_rot)
        assert np.array_equal(p.global_trans, q.global_trans)

    def test_pose_file_roundtrip(self, tmp_path):
        poses = [Pose.identity(21), Pose(np.ones((21, 6)) * 0.1,
                                         np.zeros(6), np.array([1.0, 2, 3]))]
        kin.save_poses(tmp_path / "p.json", poses)
        back = kin.load_poses(tmp_path / "p.json")
        assert len(back) == 2
        assert np.allclose(back[1].global_trans, [1.0, 2, 3])


class TestPoseRotationsGradient:
    def test_fk_lbs_end_to_end_gradient(self):
        mesh, _ = synth.build_template("mini")
        rng = np.random.default_rng(9)
        p = Params()
        p.add("theta", 0.1 * rng.standard_normal((mesh.num_joints, 6)))
        p.add("grot", 0.1 * rng.standard_normal(6))
        p.add("gtrans", rng.standard_normal(3))
        tgt = mesh.rest_vertices + rng.standard_normal(mesh.rest_vertices.shape)

        def build():
            rots = pose_rotations(p["theta"], mesh.joint_frame)
            g = rot6d_to_matrix(p["grot"] + IDENT6)
            tf = forward_kinematics(mesh.rest_joints, mesh.parent, rots, g,
                                    p["gtrans"])
            v = linear_blend_skin(mesh.rest_vertices, mesh.skin_weights, tf)
            return tape.tmean((v - tgt) ** 2)

        err, name = finite_diff_check(build, p, max_coords_per_param=12)
        assert err < 1e-5, f"worst {err:.2e} at {name}"
