"""Latent-identity hand model.

Three learned correctives ride on top of the rigged template:
- a skeleton corrective (per-joint rest-joint offset, decoded from the
  identity code; constrained joints may only slide along their bone axis),
- an identity vertex corrective (rest-shape offset from the identity code),
- a pose vertex corrective (per-joint-cluster offsets gated by a learnable
  non-negative vertex mask, with the zero-pose evaluation subtracted so the
  rest pose is exactly neutral).

The identity code lives in a variational latent space: a small conv+MLP
encoder over two-view neutral depth maps and neutral joints produces a
posterior (mu, log-variance); training samples via reparameterization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn, tape
from .kin import (IDENT6, dof6_mask, forward_kinematics, linear_blend_skin,
                  pose_rotations, rot6d_to_matrix)
from .tape import Params, Tensor, astensor

D_ID = 32
ENC_RES = 64          # encoder depth-map resolution
_DEPTH_SCALE = 1.0 / 300.0   # mm -> encoder input units
_JOINT_SCALE = 1.0 / 100.0
_ALIGN_TOL_MM = 1.0


@dataclass
class IdCode:
    """Identity latent; mu/log_var present when produced by the encoder."""

    z: Tensor
    mu: Optional[Tensor] = None
    log_var: Optional[Tensor] = None


@dataclass
class Correctives:
    skel: Tensor        # (J, 3) mm
    vert_id: Tensor     # (Nv, 3) mm
    vert_pose: Optional[Tensor] = None  # (Nv, 3) mm


def child_table(parent, canonical_child=None):
    """Representative child per joint: the only child where unique, -1 at
    leaves, and the lowest-index child (or an explicit override) where a
    joint has several children."""
    parent = np.asarray(parent, dtype=np.int64)
    nj = len(parent)
    kids = [[] for _ in range(nj)]
    for j, p in enumerate(parent):
        if p >= 0:
            kids[p].append(j)
    out = np.full(nj, -1, dtype=np.int64)
    for j, ks in enumerate(kids):
        if not ks:
            continue
        if len(ks) == 1:
            out[j] = ks[0]
        else:
            out[j] = canonical_child[j] if canonical_child and j in canonical_child \
                else min(ks)
    return out


class HandModel:
    """Model weights + template, with encode/decode/forward methods.

    All learnable arrays live in ``self.params`` so one optimizer (and the
    checkpoint format) covers everything.
    """

    def __init__(self, template, rng, hidden=64, d_id=D_ID, params=None,
                 canonical_child=None):
        self.template = template
        self.d_id = d_id
        self.params = params if params is not None else Params()
        p = self.params
        nv = template.num_vertices
        nj = template.num_joints

        self.root = int(np.flatnonzero(template.parent < 0)[0])
        self.child = child_table(template.parent, canonical_child)
        # joints allowed a full 3-vector skeleton corrective: children of the
        # root; everything else (except the root, which gets none) slides
        # along its bone axis only
        self.free_skel = np.flatnonzero(template.parent == self.root)
        self.constrained_skel = np.array(
            [j for j in range(nj)
             if j != self.root and j not in set(self.free_skel)], dtype=np.int64)

        # (J, 6) mask of pose entries that may move; root rotation always 0
        m6 = dof6_mask(template.dof_mask)
        m6[self.root] = 0.0
        self.theta_mask = m6

        skel_dim = len(self.constrained_skel) + 3 * len(self.free_skel)
        self.id_decoder = nn.Mlp(p, "id_decoder", [d_id, hidden, skel_dim + nv * 3],
                                 ["silu", None], rng, zero_last=True)
        self.pose_decoder = nn.Mlp(p, "pose_decoder", [18 + d_id, hidden, nv * 3],
                                   ["silu", None], rng, zero_last=True)
        # vertex gating mask, consumed through ReLU; small positive init so
        # the L1(ReLU) regularizer and the data terms both see gradients
        self.phi = p.add("phi", np.full((nv, nj), 0.01))

        # encoder: strided convs over two-view depth maps + a joint branch
        self.enc_w1 = p.add("id_encoder.c1w", nn.he_init(rng, 2 * 9, (8, 2, 3, 3)))
        self.enc_b1 = p.add("id_encoder.c1b", np.zeros(8))
        self.enc_w2 = p.add("id_encoder.c2w", nn.he_init(rng, 8 * 9, (16, 8, 3, 3)))
        self.enc_b2 = p.add("id_encoder.c2b", np.zeros(16))
        self.enc_w3 = p.add("id_encoder.c3w", nn.he_init(rng, 16 * 9, (32, 16, 3, 3)))
        self.enc_b3 = p.add("id_encoder.c3b", np.zeros(32))
        feat = 32 * (ENC_RES // 8) * (ENC_RES // 8)
        self.enc_img = nn.Mlp(p, "id_encoder.img", [feat, hidden], [None], rng)
        self.enc_joint = nn.Mlp(p, "id_encoder.joint", [nj * 3, hidden, hidden],
                                ["silu", None], rng)
        self.enc_head = nn.Mlp(p, "id_encoder.head", [2 * hidden, 2 * d_id],
                               [None], rng, zero_last=True)

    # -- encoder -------------------------------------------------------

    def encode_id(self, neutral_depths, neutral_joints, eps=None):
        """Two-view (2, R, R) depth maps + (J, 3) rigid-aligned neutral
        joints -> IdCode. ``eps`` standard-normal sample enables training
        mode; eps=None evaluates at the posterior mean."""
        d = np.asarray(neutral_depths, dtype=np.float64)
        j = np.asarray(neutral_joints, dtype=np.float64)
        if d.shape != (2, ENC_RES, ENC_RES):
            raise ValueError(f"encoder expects (2, {ENC_RES}, {ENC_RES}) depth maps")
        if np.linalg.norm(j[self.root]) > _ALIGN_TOL_MM:
            raise ValueError("neutral joints must be rigid-aligned (root at origin)")
        x = Tensor(d[None] * _DEPTH_SCALE)
        x = tape.silu(nn.conv2d(x, self.enc_w1, self.enc_b1, stride=2, pad=1))
        x = tape.silu(nn.conv2d(x, self.enc_w2, self.enc_b2, stride=2, pad=1))
        x = tape.silu(nn.conv2d(x, self.enc_w3, self.enc_b3, stride=2, pad=1))
        x = self.enc_img(tape.reshape(x, (-1,)))
        jb = self.enc_joint(Tensor(j.ravel() * _JOINT_SCALE))
        h = tape.silu(tape.concat([x, jb], axis=0))
        out = self.enc_head(h)
        mu = out[:self.d_id]
        log_var = out[self.d_id:]
        if eps is None:
            z = mu
        else:
            eps = np.asarray(eps, dtype=np.float64)
            z = mu + tape.exp(log_var * 0.5) * eps
        return IdCode(z=z, mu=mu, log_var=log_var)

    # -- decoders ------------------------------------------------------

    def decode_id(self, z):
        """Identity code -> (skeleton corrective (J, 3), vertex corrective
        (Nv, 3)). Constrained joints move along their bone axis only."""
        z = z.z if isinstance(z, IdCode) else astensor(z)
        nv = self.template.num_vertices
        nj = self.template.num_joints
        out = self.id_decoder(z)
        nc = len(self.constrained_skel)
        nf = len(self.free_skel)
        scalars = out[:nc]
        free = tape.reshape(out[nc:nc + 3 * nf], (nf, 3))
        vert = tape.reshape(out[nc + 3 * nf:], (nv, 3))

        axis = self.template.bone_axis[self.constrained_skel]     # (nc, 3)
        # scatter scalar * axis and free 3-vectors into (J, 3)
        sc_mat = np.zeros((nj, nc))
        sc_mat[self.constrained_skel, np.arange(nc)] = 1.0
        fr_mat = np.zeros((nj, nf))
        fr_mat[self.free_skel, np.arange(nf)] = 1.0
        skel = tape.matmul(Tensor(sc_mat), tape.reshape(scalars, (nc, 1)) * axis) \
            + tape.matmul(Tensor(fr_mat), free)
        return skel, vert

    def decode_pose_corrective(self, theta, z):
        """Masked pose (J, 6) + identity code -> (Nv, 3) vertex corrective.
        Per-joint cluster input is (theta_j, theta_parent, theta_child, z);
        one shared perceptron serves every cluster; the zero-pose output is
        subtracted so the corrective vanishes identically at rest."""
        z = z.z if isinstance(z, IdCode) else astensor(z)
        theta = astensor(theta) * self.theta_mask
        nj = self.template.num_joints
        nv = self.template.num_vertices
        parent = self.template.parent

        rows = []
        zero6 = Tensor(np.zeros(6))
        for j in range(nj):
            tp = theta[parent[j]] if parent[j] >= 0 else zero6
            tc = theta[self.child[j]] if self.child[j] >= 0 else zero6
            rows.append(tape.concat([theta[j], tp, tc, z], axis=0))
        rows.append(tape.concat([zero6, zero6, zero6, z], axis=0))
        inp = tape.stack(rows, axis=0)                  # (J+1, 18+d_id)
        f = self.pose_decoder(inp)                      # (J+1, Nv*3)
        diff = tape.reshape(f[:nj] - f[nj], (nj, nv, 3))
        gate = tape.transpose(tape.relu(self.phi))      # (J, Nv)
        gate = tape.reshape(gate, (nj, nv, 1))
        return tape.tsum(gate * diff, axis=0)

    # -- composed forward ---------------------------------------------

    def masked_theta(self, theta):
        return astensor(theta) * self.theta_mask

    def forward(self, z, pose_theta, global_rot=None, global_trans=None,
                with_pose_corrective=True):
        """Full model: correctives -> FK -> LBS.

        Returns (vertices (Nv, 3), joints (J, 3), transforms). All inputs may
        be Tensors; gradients flow to z, pose, and every model weight."""
        t = self.template
        skel, vert_id = self.decode_id(z)
        theta = self.masked_theta(pose_theta)
        rest_joints = Tensor(t.rest_joints) + skel
        rest_verts = Tensor(t.rest_vertices) + vert_id
        if with_pose_corrective:
            rest_verts = rest_verts + self.decode_pose_corrective(theta, z)

        rots = pose_rotations(theta, t.joint_frame)
        g = None
        gt = None
        if global_rot is not None:
            g = rot6d_to_matrix(astensor(global_rot) + IDENT6)
            gt = astensor(global_trans) if global_trans is not None \
                else Tensor(np.zeros(3))
        tf = forward_kinematics(rest_joints, t.parent, rots, g, gt)
        verts = linear_blend_skin(rest_verts, t.skin_weights, tf)
        return verts, tf.joints, tf

    def forward_pose(self, z, pose, with_pose_corrective=True):
        """Same as forward() but takes a kin.Pose."""
        return self.forward(z, pose.theta, pose.global_rot, pose.global_trans,
                            with_pose_corrective=with_pose_corrective)


def kl_divergence(id_code):
    """KL(q || N(0, I)) = 0.5 * sum(exp(lv) + mu^2 - 1 - lv)."""
    mu, lv = id_code.mu, id_code.log_var
    return 0.5 * tape.tsum(tape.exp(lv) + mu * mu - 1.0 - lv)
