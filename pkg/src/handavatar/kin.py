"""Rotation representations, forward kinematics, rigid alignment, LBS.

Pose convention: each joint carries a continuous 6D rotation parameter stored
as a *delta from the identity* in the joint's local anatomical frame, so the
all-zero pose is exactly the rest pose and invalid degrees of freedom can be
masked to zero elementwise. Decoding adds the identity 6D ``(1,0,0,0,1,0)``
and runs Gram-Schmidt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .tape import Tensor, astensor, custom_op

IDENT6 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def dof6_mask(dof_mask):
    """Expand a (J, 3) allowed-axis mask into the (J, 6) mask of 6D entries
    that can move under rotations about those axes (local frame:
    axis 0 = flexion, 1 = twist, 2 = abduction)."""
    dof_mask = np.asarray(dof_mask, dtype=bool)
    out = np.zeros((dof_mask.shape[0], 6))
    for j, (fx, tw, ab) in enumerate(dof_mask):
        s = {i for i, on in enumerate((fx, tw, ab)) if on}
        if s == set():
            row = [0, 0, 0, 0, 0, 0]
        elif s == {0}:
            row = [0, 0, 0, 0, 1, 1]
        elif s == {0, 2}:
            row = [1, 1, 0, 1, 1, 1]
        else:
            row = [1, 1, 1, 1, 1, 1]
        out[j] = row
    return out


@dataclass
class Pose:
    """Per-frame articulation: joint 6D deltas plus a global rigid transform."""

    theta: np.ndarray          # (J, 6) delta-6D, masked entries exactly zero
    global_rot: np.ndarray     # (6,) delta-6D
    global_trans: np.ndarray   # (3,) mm

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.global_rot = np.asarray(self.global_rot, dtype=np.float64)
        self.global_trans = np.asarray(self.global_trans, dtype=np.float64)

    @classmethod
    def identity(cls, num_joints):
        return cls(np.zeros((num_joints, 6)), np.zeros(6), np.zeros(3))

    def to_json(self):
        return {"theta": self.theta.tolist(),
                "global_rot": self.global_rot.tolist(),
                "global_trans": self.global_trans.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(np.array(d["theta"]), np.array(d["global_rot"]),
                   np.array(d["global_trans"]))


def save_poses(path, poses):
    with open(path, "w") as f:
        json.dump([p.to_json() for p in poses], f)


def load_poses(path):
    with open(path) as f:
        return [Pose.from_json(d) for d in json.load(f)]


@dataclass
class JointTransforms:
    """Rest-relative rigid transforms per joint plus posed joint positions.

    Fields are Tensors when built on the tape; ``.data`` gives the arrays.
    """

    rot: Tensor     # (J, 3, 3)
    trans: Tensor   # (J, 3)
    joints: Tensor  # (J, 3) posed joint positions


def rot6d_to_matrix(r6):
    """Gram-Schmidt 6D -> rotation matrix. Accepts (..., 6); columns of the
    result are the orthonormalized vectors. Raises on degenerate input."""
    r6 = astensor(r6)
    d = r6.data
    a, b = d[..., 0:3], d[..., 3:6]
    cr = np.cross(a, b)
    if (np.linalg.norm(cr, axis=-1) <= 1e-9).any():
        raise ValueError("degenerate 6D rotation input (first two vectors parallel)")

    at = r6[..., 0:3]
    bt = r6[..., 3:6]
    c1 = _unit(at)
    proj = _sum_keep(c1 * bt)
    c2 = _unit(bt - proj * c1)
    c3 = tape.cross3(c1, c2)
    return tape.stack([c1, c2, c3], axis=-1)


def _sum_keep(t):
    """Sum over the last axis, keeping it as size 1."""
    s = tape.tsum(t, axis=t.ndim - 1)
    return tape.reshape(s, s.shape + (1,))


def _unit(t):
    n = tape.sqrt(_sum_keep(t * t))
    return t / n


def matrix_to_rot6d(r):
    """First two columns of a rotation matrix, numpy convenience."""
    r = np.asarray(r, dtype=np.float64)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def pose_rotations(pose_theta, joint_frame):
    """Decode per-joint delta-6D (tape) into world-frame rotation matrices,
    conjugating by the constant anatomical frames."""
    theta = astensor(pose_theta)
    r6 = theta + IDENT6
    r_local = rot6d_to_matrix(r6)  # (J, 3, 3)
    f = Tensor(np.asarray(joint_frame, dtype=np.float64))
    return tape.matmul(tape.matmul(f, r_local), tape.transpose(f, (0, 2, 1)))


def forward_kinematics(rest_joints, parent, rotations, global_rot_mat=None,
                       global_trans=None):
    """Chain rest-relative transforms down the joint tree.

    rest_joints : (J, 3) Tensor or array (corrected rest joints)
    rotations   : (J, 3, 3) Tensor, per-joint rotation about its rest position
    global_rot_mat / global_trans: outermost rigid transform, applied about the
    root's rest position. Identity pose with zero global maps rest joints to
    themselves exactly.
    """
    rest_joints = astensor(rest_joints)
    rotations = astensor(rotations)
    parent = np.asarray(parent, dtype=np.int64)
    nj = parent.shape[0]
    order = _topo_order(parent)

    rot_list = [None] * nj
    trans_list = [None] * nj
    for j in order:
        rj = rotations[j]
        jj = rest_joints[j]
        local_t = jj - tape.matmul(rj, tape.reshape(jj, (3, 1)))[:, 0]
        p = parent[j]
        if p < 0:
            rot_list[j] = rj
            trans_list[j] = local_t
        else:
            rot_list[j] = tape.matmul(rot_list[p], rj)
            trans_list[j] = tape.matmul(rot_list[p], tape.reshape(local_t, (3, 1)))[:, 0] \
                + trans_list[p]

    rot = tape.stack(rot_list, axis=0)
    trans = tape.stack(trans_list, axis=0)

    if global_rot_mat is not None:
        g = astensor(global_rot_mat)
        t = astensor(global_trans) if global_trans is not None else Tensor(np.zeros(3))
        root = int(np.flatnonzero(parent < 0)[0])
        pivot = rest_joints[root]
        # G(x) = g (x - pivot) + pivot + t composed outside every joint transform
        rot = tape.matmul(g, rot)
        shift = tape.matmul(g, tape.reshape(trans - pivot, (nj, 3, 1)))[:, :, 0] \
            + pivot + t
        trans = shift

    posed = tape.matmul(rot, tape.reshape(rest_joints, (nj, 3, 1)))[:, :, 0] + trans
    return JointTransforms(rot=rot, trans=trans, joints=posed)


def _topo_order(parent):
    order = []
    pending = list(range(len(parent)))
    placed = set()
    while pending:
        rest = []
        for j in pending:
            if parent[j] < 0 or parent[j] in placed:
                order.append(j)
                placed.add(j)
            else:
                rest.append(j)
        if len(rest) == len(pending):
            raise ValueError("parent array is not a tree")
        pending = rest
    return order


def linear_blend_skin(vertices, skin_weights, transforms):
    """v' = sum_j W[v, j] * (R_j v + t_j) with rest-relative transforms."""
    v = astensor(vertices)
    w = np.asarray(skin_weights, dtype=np.float64)
    if np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("skin weight rows must sum to 1")
    nj = w.shape[1]
    out = None
    for j in range(nj):
        col = w[:, j]
        if not col.any():
            continue
        rj = transforms.rot[j]
        tj = transforms.trans[j]
        moved = tape.matmul(v, tape.transpose(rj)) + tj
        term = moved * col[:, None]
        out = term if out is None else out + term
    return out


def pose_mesh(rest_vertices, rest_joints, parent, skin_weights, pose, joint_frame):
    """Convenience: full pose -> posed (vertices, transforms) on the tape."""
    rots = pose_rotations(pose.theta, joint_frame)
    g = rot6d_to_matrix(astensor(pose.global_rot) + IDENT6)
    tf = forward_kinematics(rest_joints, parent, rots, g, astensor(pose.global_trans))
    v = linear_blend_skin(rest_vertices, skin_weights, tf)
    return v, tf


def squared_rotation_angle(rot):
    """theta^2 for a batch of rotation matrices (..., 3, 3), with a gradient
    that stays finite at the identity (theta/sin(theta) -> 1)."""
    rot = astensor(rot)
    r = rot.data
    tr = np.trace(r, axis1=-2, axis2=-1)
    c = np.clip((tr - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(c)
    out = theta * theta

    def bw(g):
        s = np.sin(theta)
        ratio = np.where(np.abs(s) > 1e-6, theta / np.where(s == 0, 1.0, s),
                         1.0 + theta * theta / 6.0)
        coeff = -g * ratio  # d(theta^2)/dR = -theta/sin(theta) * I on the diagonal
        gr = np.zeros_like(r)
        idx = np.arange(3)
        gr[..., idx, idx] = coeff[..., None]
        return (gr,)

    return custom_op(out, (rot,), bw)


def rigid_align(src, dst):
    """Least-squares rigid Procrustes: returns (R, t) with dst ~= R src + t,
    det(R) = +1 enforced. Requires >= 3 non-collinear points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape[0] < 3 or src.shape != dst.shape:
        raise ValueError("need K >= 3 matched points")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a = src - cs
    b = dst - cd
    # collinearity: second singular value of the centered cloud vanishes
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise ValueError("source points are collinear or degenerate")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    diag = np.diag([1.0, 1.0, d])
    r = vt.T @ diag @ u.T
    t = cd - r @ cs
    return r, t
