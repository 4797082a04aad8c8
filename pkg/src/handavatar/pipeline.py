"""Multi-stage procedures built on the model, renderer and loss suite.

Two entry points:

- ``train_tracking_and_modeling``: learn the model weights while tracking
  every training frame (per-frame pose + per-subject identity code optimized
  jointly with the decoders). Runs in two phases: the image-matching term is
  disabled until reference textures can be unwrapped from the tracked frames,
  then enabled for fine-tuning.
- the adaptation chain for a new capture: ``fit_geometry`` (frozen model,
  optimize pose/identity inputs) -> ``estimate_shadow`` (base color +
  shadow network) -> ``optimize_texture`` (shadow-divided unwrap, hole fill,
  refinement). The result is packaged as an ``AvatarBundle``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint, imgio, loss as lss, nn, render, tape
from .geom import vertex_normals
from .kin import (IDENT6, Pose, forward_kinematics, linear_blend_skin,
                  pose_rotations, rot6d_to_matrix)
from .model import HandModel, kl_divergence
from .optim import Adam
from .render import UvMap
from .tape import Params, Tensor


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass
class SubjectData:
    """One training subject: frame sequence + the fixed identity-encoder
    inputs (two-view neutral depth maps, rigid-aligned neutral joints)."""

    frames: list
    neutral_depths: np.ndarray   # (2, R, R)
    neutral_joints: np.ndarray   # (J, 3)


def desk_training_weights():
    """Loss weights retuned for the coarse desk template: the sum-reduced
    smoothness/tangential regularizers scale with vertex count and edge
    length, so their canonical weights (set for a far denser mesh) would
    freeze the shape at desk resolution."""
    w = dict(lss.TERM_WEIGHTS)
    w["laplacian"] = 1.0
    w["tangential_id"] = 0.5
    w["tangential_pose"] = 0.5
    return w


@dataclass
class TrainConfig:
    steps_phase1: int = 300
    steps_phase2: int = 100
    frames_per_step: int = 2
    lr_model: float = 1e-3
    lr_pose: float = 1e-2
    seed: int = 0
    mask_sigma: float = 1.0
    texture_res: int = 64
    reference_frames: tuple = (0,)
    weights: dict = field(default_factory=desk_training_weights)
    log_path: Optional[str] = None


@dataclass
class TrainResult:
    model: HandModel
    pose_params: Params
    poses: list              # per subject: list of Pose (final values)
    id_codes: list           # per subject: posterior-mean z (np)
    reference_textures: Optional[list]
    log: list
    diverged: bool = False


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _pose_names(si, t):
    return (f"s{si}.f{t}.theta", f"s{si}.f{t}.grot", f"s{si}.f{t}.gtrans")


def _frame_pose_tensors(pose_params, si, t):
    n_th, n_gr, n_gt = _pose_names(si, t)
    return pose_params[n_th], pose_params[n_gr], pose_params[n_gt]


class _TemplateCaches:
    """Per-template constants shared across loss evaluations."""

    def __init__(self, template):
        self.lap = lss.laplacian_matrix(template)
        self.normals = vertex_normals(template.rest_vertices, template.faces)
        self.segments = lss.finger_segments(template)
        self.edge_faces = render.edge_face_map(template.faces)


def _tracked_forward(model, z, theta_t, grot_t, gtrans_t):
    """Forward pass returning both mesh variants (with and without the pose
    corrective) plus the intermediates the regularizers need."""
    t = model.template
    skel, vert_id = model.decode_id(z)
    theta = model.masked_theta(theta_t)
    rest_id = Tensor(t.rest_vertices) + vert_id
    corr = model.decode_pose_corrective(theta, z)
    rest_full = rest_id + corr
    rots = pose_rotations(theta, t.joint_frame)
    g = rot6d_to_matrix(tape.astensor(grot_t) + IDENT6)
    tf = forward_kinematics(Tensor(t.rest_joints) + skel, t.parent, rots,
                            g, tape.astensor(gtrans_t))
    verts_full = linear_blend_skin(rest_full, t.skin_weights, tf)
    verts_zero = linear_blend_skin(rest_id, t.skin_weights, tf)
    return dict(verts_full=verts_full, verts_zero=verts_zero, joints=tf.joints,
                rest_id=rest_id, rest_full=rest_full, corr=corr,
                vert_id=vert_id, rest_joints=Tensor(t.rest_joints) + skel)


def _frame_terms(model, z, pose_tensors, frame, cfg, caches, ref_texture):
    """Loss terms for one tracked frame. Data terms supervise both mesh
    variants so the articulated base keeps tracking even without its
    pose-dependent corrective."""
    t = model.template
    theta_t, grot_t, gtrans_t = pose_tensors
    fw = _tracked_forward(model, z, theta_t, grot_t, gtrans_t)

    terms = {}
    terms["pose"] = lss.loss_pose(fw["joints"], frame.joints3d)
    terms["p2p"] = lss.loss_p2p(fw["verts_full"], frame.scan) \
        + lss.loss_p2p(fw["verts_zero"], frame.scan)
    soft = render.render_mask_soft(fw["verts_full"], t.faces, frame.camera,
                                   sigma=cfg.mask_sigma,
                                   edge_faces=caches.edge_faces)
    terms["mask"] = lss.loss_mask(soft, frame.mask)

    if ref_texture is not None:
        img, v2d, frag = render.render_textured(
            fw["verts_full"], t.faces, t.uv_coords, frame.camera, ref_texture)
        flow = lss.compute_flow(img.data, frame.image)
        visible = lss.visible_vertex_mask(frag)
        terms["img"] = lss.loss_image_matching(v2d, visible, flow)

    terms["theta"] = lss.reg_pose_magnitude(model.masked_theta(theta_t))
    terms["tangential_id"] = lss.reg_tangential(fw["vert_id"], caches.normals)
    terms["tangential_pose"] = lss.reg_tangential(fw["corr"], caches.normals)
    terms["laplacian"] = lss.reg_laplacian(fw["rest_full"], fw["rest_id"],
                                           caches.lap, t.rest_vertices)
    radii = lss.segment_radii(fw["rest_id"].data, fw["rest_joints"].data,
                              caches.segments)
    terms["volume"] = lss.reg_volume(fw["verts_full"], fw["joints"],
                                     caches.segments, radii)
    terms["cut"] = lss.reg_flat_cut(fw["rest_id"][t.cut_ring])
    return terms, fw


def _accumulate(acc, terms, scale=1.0):
    for k, v in terms.items():
        v = v * scale if scale != 1.0 else v
        acc[k] = v if k not in acc else acc[k] + v


def train_tracking_and_modeling(subjects, template, config=None):
    """Joint tracking + model learning over a multi-subject capture set.

    ``subjects``: list of SubjectData. Deterministic for a fixed config."""
    cfg = config or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    model = HandModel(template, rng)
    caches = _TemplateCaches(template)

    pose_params = Params()
    for si, subj in enumerate(subjects):
        for t in range(len(subj.frames)):
            n_th, n_gr, n_gt = _pose_names(si, t)
            pose_params.add(n_th, np.zeros((template.num_joints, 6)))
            pose_params.add(n_gr, np.zeros(6))
            pose_params.add(n_gt, np.zeros(3))
    theta_update_mask = {
        _pose_names(si, t)[0]: model.theta_mask
        for si in range(len(subjects))
        for t in range(len(subjects[si].frames))}

    opt_model = Adam(model.params, lr=cfg.lr_model)
    opt_pose = Adam(pose_params, lr=cfg.lr_pose)

    log = []
    ref_textures = None
    diverged = False
    total_steps = cfg.steps_phase1 + cfg.steps_phase2
    snapshot = (model.params.state(), pose_params.state())

    for step in range(total_steps):
        phase2 = step >= cfg.steps_phase1
        if phase2 and ref_textures is None:
            ref_textures = build_reference_textures(
                model, subjects, _final_poses(subjects, pose_params),
                res=cfg.texture_res, frame_ids=cfg.reference_frames)

        acc = {}
        n_evals = 0
        for si, subj in enumerate(subjects):
            eps = rng.standard_normal(model.d_id)
            idc = model.encode_id(subj.neutral_depths, subj.neutral_joints,
                                  eps=eps)
            _accumulate(acc, {"kl": kl_divergence(idc)})
            nf = len(subj.frames)
            picks = [(step * cfg.frames_per_step + k) % nf
                     for k in range(min(cfg.frames_per_step, nf))]
            for t in picks:
                terms, _ = _frame_terms(
                    model, idc.z, _frame_pose_tensors(pose_params, si, t),
                    subj.frames[t], cfg, caches,
                    ref_textures[si].values if phase2 else None)
                _accumulate(acc, terms)
                n_evals += 1
        for k in list(acc):
            if k == "kl":
                acc[k] = acc[k] * (1.0 / len(subjects))
            else:
                acc[k] = acc[k] * (1.0 / n_evals)
        acc["phi"] = lss.reg_phi(model.phi)

        bd = lss.total_training_loss(acc, weights=cfg.weights)
        if not np.isfinite(bd.total.data):
            diverged = True
            model.params.load_state(snapshot[0])
            pose_params.load_state(snapshot[1])
            break
        snapshot = (model.params.state(), pose_params.state())
        model.params.zero_grad()
        pose_params.zero_grad()
        bd.total.backward()
        try:
            opt_model.step()
            opt_pose.step(mask=theta_update_mask)
        except FloatingPointError:
            diverged = True
            model.params.load_state(snapshot[0])
            pose_params.load_state(snapshot[1])
            break
        log.append({"step": step, "phase": 2 if phase2 else 1} | bd.values())

    if cfg.log_path:
        with open(cfg.log_path, "w") as f:
            for entry in log:
                f.write(json.dumps(entry) + "\n")

    id_codes = []
    for subj in subjects:
        idc = model.encode_id(subj.neutral_depths, subj.neutral_joints)
        id_codes.append(idc.z.data.copy())
    if ref_textures is None and not diverged and cfg.steps_phase2 == 0:
        ref_textures = build_reference_textures(
            model, subjects, _final_poses(subjects, pose_params),
            res=cfg.texture_res, frame_ids=cfg.reference_frames)
    return TrainResult(model=model, pose_params=pose_params,
                       poses=_final_poses(subjects, pose_params),
                       id_codes=id_codes, reference_textures=ref_textures,
                       log=log, diverged=diverged)


def _final_poses(subjects, pose_params):
    out = []
    for si, subj in enumerate(subjects):
        seq = []
        for t in range(len(subj.frames)):
            th, gr, gt = _frame_pose_tensors(pose_params, si, t)
            seq.append(Pose(th.data.copy(), gr.data.copy(), gt.data.copy()))
        out.append(seq)
    return out


def build_reference_textures(model, subjects, poses, res=64, frame_ids=(0,)):
    """Unwrap the tracked frames of each subject into a merged texture.
    These are static targets for the image-matching term; holes are
    diffusion-filled so rendering never samples uncovered texels."""
    t = model.template
    uv_cache = render.uv_rasterize(t.uv_coords, t.faces, res)
    textures = []
    for si, subj in enumerate(subjects):
        idc = model.encode_id(subj.neutral_depths, subj.neutral_joints)
        maps = []
        for fid in frame_ids:
            fid = min(fid, len(subj.frames) - 1)
            p = poses[si][fid]
            v, _, _ = model.forward(idc.z, p.theta, p.global_rot,
                                    p.global_trans)
            maps.append(render.unwrap_to_uv(
                subj.frames[fid].image, v.data, t.faces, t.uv_coords,
                subj.frames[fid].camera, res, uv_cache=uv_cache))
        merged = render.merge_unwraps(maps)
        filled, _ = diffusion_fill(merged.values, merged.weight > 0)
        textures.append(UvMap(filled, merged.weight))
    return textures


def diffusion_fill(values, known, iters=400):
    """Fill unknown texels by iterated 4-neighbor averaging (Jacobi heat
    diffusion with known texels clamped). Returns (filled, inpainted_mask)."""
    v = np.array(values, dtype=np.float64)
    known = np.asarray(known, dtype=bool)
    hole = ~known
    if not hole.any() or not known.any():
        return v, hole
    if v.ndim == 3:
        v[hole] = v[known].mean(axis=0)
    else:
        v[hole] = v[known].mean()
    for _ in range(iters):
        acc = np.zeros_like(v)
        cnt = np.zeros(v.shape[:2])
        for src, dst in (((slice(1, None),), (slice(None, -1),)),
                         ((slice(None, -1),), (slice(1, None),))):
            acc[dst] += v[src]
            cnt[dst] += 1.0
            acc[:, dst[0]] += v[:, src[0]]
            cnt[:, dst[0]] += 1.0
        avg = acc / (cnt[..., None] if v.ndim == 3 else cnt)
        v[hole] = avg[hole]
    return v, hole


# ---------------------------------------------------------------------------
# adaptation stage 1: geometry fitting
# ---------------------------------------------------------------------------


@dataclass
class FitConfig:
    iters: int = 300
    warmup_iters: int = 400    # joints-only iterations before the image terms
    warmup_lr: float = 3e-2
    lr: float = 2e-2
    lr_decay: float = 0.2          # multiplier applied at each decay point
    lr_decay_at: tuple = (0.5, 0.8)  # fractions of the iteration budget
    mask_sigma: float = 1.0
    fragment_refresh: int = 10   # recompute hard depth correspondences every N iters
    l2_weight: float = 1e-3
    w_joint2d: float = 1.0
    w_mask: float = 10.0
    w_depth: float = 10.0
    w_joint3d: float = 1.0
    flag_threshold: float = 100.0
    log_path: Optional[str] = None


@dataclass
class FitResult:
    z: np.ndarray
    poses: list
    flags: list          # per-frame: True when the frame failed to converge
    per_frame_loss: list
    log: list


def fit_geometry(frames, model, config=None):
    """Fit per-frame pose + one shared identity code to a capture, with the
    model weights frozen. Supervision: 2D/3D joints, silhouette, depth."""
    cfg = config or FitConfig()
    t = model.template
    edge_faces = render.edge_face_map(t.faces)

    fitp = Params()
    zt = fitp.add("z", np.zeros(model.d_id))
    for i in range(len(frames)):
        fitp.add(f"f{i}.theta", np.zeros((t.num_joints, 6)))
        fitp.add(f"f{i}.grot", np.zeros(6))
        fitp.add(f"f{i}.gtrans", np.zeros(3))
    upd_mask = {f"f{i}.theta": model.theta_mask for i in range(len(frames))}
    opt = Adam(fitp, lr=cfg.lr)

    frag_cache = [None] * len(frames)
    log = []
    per_frame = [0.0] * len(frames)

    def frame_loss(i, it, joints_only=False):
        fr = frames[i]
        verts, joints, _ = model.forward(
            zt, fitp[f"f{i}.theta"], fitp[f"f{i}.grot"], fitp[f"f{i}.gtrans"])
        j2d, _ = render.project_points(joints, fr.camera)
        l_j2 = tape.tmean(tape.tabs(j2d - fr.joints2d))
        l_j3 = lss.loss_pose(joints, fr.joints3d)
        if joints_only:
            return cfg.w_joint2d * l_j2 + cfg.w_joint3d * l_j3
        soft = render.render_mask_soft(verts, t.faces, fr.camera,
                                       sigma=cfg.mask_sigma,
                                       edge_faces=edge_faces)
        l_m = lss.loss_mask(soft, fr.mask)
        if frag_cache[i] is None or it % cfg.fragment_refresh == 0:
            frag_cache[i] = render.rasterize(verts.data, t.faces, fr.camera)
        frag = frag_cache[i]
        rows, cols = np.nonzero((frag.depth > 0) & (fr.depth > 0))
        total = cfg.w_joint2d * l_j2 + cfg.w_mask * l_m + cfg.w_joint3d * l_j3
        if len(rows):
            _, zcam = render.project_points(verts, fr.camera)
            fidx = frag.face_index[rows, cols]
            bary = frag.bary[rows, cols]
            d_pred = tape.tsum(zcam[t.faces[fidx]] * bary, axis=1)
            l_d = tape.tmean(tape.tabs(d_pred - fr.depth[rows, cols]))
            total = total + cfg.w_depth * l_d
        return total

    opt.lr = cfg.warmup_lr
    for it in range(cfg.warmup_iters):
        if it == int(0.7 * cfg.warmup_iters):
            opt.lr *= cfg.lr_decay
        total = None
        for i in range(len(frames)):
            fl = frame_loss(i, it, joints_only=True)
            total = fl if total is None else total + fl
        total = total * (1.0 / len(frames))
        fitp.zero_grad()
        total.backward()
        opt.step(mask=upd_mask)

    opt.lr = cfg.lr
    decay_points = {int(f * cfg.iters) for f in cfg.lr_decay_at}
    for it in range(cfg.iters):
        if it in decay_points:
            opt.lr *= cfg.lr_decay
        total = None
        for i in range(len(frames)):
            fl = frame_loss(i, it)
            per_frame[i] = float(fl.data)
            total = fl if total is None else total + fl
        total = total * (1.0 / len(frames))
        reg = None
        for _, p in fitp:
            term = tape.tsum(p * p)
            reg = term if reg is None else reg + term
        total = total + cfg.l2_weight * reg
        fitp.zero_grad()
        total.backward()
        opt.step(mask=upd_mask)
        log.append({"iter": it, "total": float(total.data)})

    if cfg.log_path:
        with open(cfg.log_path, "w") as f:
            for entry in log:
                f.write(json.dumps(entry) + "\n")
    poses = [Pose(fitp[f"f{i}.theta"].data.copy(),
                  fitp[f"f{i}.grot"].data.copy(),
                  fitp[f"f{i}.gtrans"].data.copy())
             for i in range(len(frames))]
    flags = [fl > cfg.flag_threshold for fl in per_frame]
    return FitResult(z=zt.data.copy(), poses=poses, flags=flags,
                     per_frame_loss=per_frame, log=log)


# ---------------------------------------------------------------------------
# adaptation stage 2: shadow decomposition
# ---------------------------------------------------------------------------


class ShadowNet:
    """Texture-space shadow regressor.

    A coarse grid (resolution S/32) of tiled conditioning inputs — global
    rotation, pose, identity code — plus a learnable positional encoding and
    a pooled per-texel view feature runs through three conv / group-norm /
    SiLU / nearest-x2 stages, a zero-initialized head conv, a bilinear x4
    upsample to full resolution, and a sigmoid. The view feature (world-space
    vertex normal plus its dot with the view direction, warped to texture
    space) is re-injected at every scale; carrying the full normal lets the
    network form arbitrary directional-shading terms with one linear
    combination instead of having to infer them from a single scalar."""

    def __init__(self, res, cond_dim, rng, width=32, pos_ch=8, view_ch=4):
        if res % 32:
            raise ValueError("shadow resolution must be a multiple of 32")
        self.res = res
        self.base = res // 32
        self.cond_dim = cond_dim
        self.width = width
        self.pos_ch = pos_ch
        self.view_ch = view_ch
        p = self.params = Params()
        in_ch = cond_dim + pos_ch + view_ch
        self.pos = p.add("pos", 0.01 * rng.standard_normal(
            (pos_ch, self.base, self.base)))
        # per-texel positional encoding: a full-resolution learnable logit
        # offset (zero-init keeps the initial output at 0.5); it carries the
        # static spatial detail the coarse conv stack cannot resolve
        self.pos_full = p.add("pos_full", np.zeros((res, res)))
        dims = [in_ch, width + view_ch, width + view_ch]
        self.convs = []
        for i, ci in enumerate(dims):
            w = p.add(f"c{i}.w", nn.he_init(rng, ci * 9, (width, ci, 3, 3)))
            b = p.add(f"c{i}.b", np.zeros(width))
            g = p.add(f"c{i}.gamma", np.ones(width))
            bt = p.add(f"c{i}.beta", np.zeros(width))
            self.convs.append((w, b, g, bt))
        self.head_w = p.add("head.w", np.zeros((1, width + view_ch, 3, 3)))
        self.head_b = p.add("head.b", np.zeros(1))
        # full-resolution view branch: a per-texel two-layer perceptron over
        # the view feature, added to the logits. The conv stack tops out at a
        # quarter of the output resolution, so without this branch any
        # shading detail finer than that would have to be static
        vh = 8
        self.view_w1 = p.add("view.w1", nn.he_init(rng, view_ch, (vh, view_ch)))
        self.view_b1 = p.add("view.b1", np.zeros(vh))
        self.view_w2 = p.add("view.w2", np.zeros((vh, 1)))

    def forward(self, global_rot, theta, z, view_feature_uv):
        cond = np.concatenate([np.asarray(global_rot, dtype=np.float64).ravel(),
                               np.asarray(theta, dtype=np.float64).ravel(),
                               np.asarray(z, dtype=np.float64).ravel()])
        if cond.size != self.cond_dim:
            raise ValueError(f"conditioning size {cond.size}, "
                             f"expected {self.cond_dim}")
        view = np.asarray(view_feature_uv, dtype=np.float64)
        if view.shape != (self.res, self.res, self.view_ch):
            raise ValueError("view feature resolution mismatch")
        pools = {}
        r = self.base
        for _ in range(4):
            pools[r] = _pool_to(view, r).transpose(2, 0, 1)
            r *= 2

        b = self.base
        tiled = Tensor(np.broadcast_to(cond[:, None, None],
                                       (cond.size, b, b)).copy())
        x = tape.concat([tiled, self.pos, Tensor(pools[b])], axis=0)
        x = tape.reshape(x, (1,) + x.shape)
        r = b
        for w, bias, gamma, beta in self.convs:
            x = nn.conv2d(x, w, bias, stride=1, pad=1)
            x = nn.group_norm(x, 4, gamma, beta)
            x = tape.silu(x)
            x = nn.upsample_nearest2(x)
            r *= 2
            x = tape.concat([x, Tensor(pools[r][None])], axis=1)
        x = nn.conv2d(x, self.head_w, self.head_b, stride=1, pad=1)
        x = nn.upsample_bilinear(x, 4)
        h = tape.silu(tape.matmul(Tensor(view.reshape(-1, self.view_ch)),
                                  tape.transpose(self.view_w1)) + self.view_b1)
        fine = tape.reshape(tape.matmul(h, self.view_w2),
                            (self.res, self.res))
        logits = tape.reshape(x, (self.res, self.res)) + self.pos_full + fine
        return tape.sigmoid(logits)


def _pool_to(img, size):
    v = np.asarray(img, dtype=np.float64)
    while v.shape[0] > size:
        h, w = v.shape[:2]
        v = v.reshape((h // 2, 2, w // 2, 2) + v.shape[2:]).mean(axis=(1, 3))
    return v


def shadownet_forward(state, global_rot, theta, z, view_feature_uv):
    """Shadow map in (0, 1) for one frame's conditioning inputs."""
    return state.forward(global_rot, theta, z, view_feature_uv)


def _vertex_to_uv(values, faces, uv_cache, res):
    """Warp per-vertex values (Nv,) or (Nv, C) into texture space via the
    UV coverage."""
    fidx, bary = uv_cache
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((res, res) + values.shape[1:])
    ti, tj = np.nonzero(fidx >= 0)
    f = fidx[ti, tj]
    corner = values[np.asarray(faces)[f]]            # (K, 3, ...)
    b = bary[ti, tj]
    if values.ndim > 1:
        b = b[..., None]
    out[ti, tj] = (b * corner).sum(axis=1)
    return out


def _view_feature(verts, faces, camera):
    """Per-vertex (Nv, 4) shading feature: world-space normal and its dot
    with the unit view direction."""
    vn = vertex_normals(verts, faces)
    view = camera.center - verts
    view /= np.maximum(np.linalg.norm(view, axis=1, keepdims=True), 1e-12)
    return np.concatenate([vn, (vn * view).sum(axis=1, keepdims=True)], axis=1)


def posed_frame_cache(frames, geometry, model, uv_res):
    """Frozen per-frame geometry for the shadow/texture stages: posed
    vertices, rasterization, screen-pixel UVs, and the view feature map."""
    t = model.template
    uv_cache = render.uv_rasterize(t.uv_coords, t.faces, uv_res)
    out = []
    for fr, pose in zip(frames, geometry.poses):
        v, _, _ = model.forward(geometry.z, pose.theta, pose.global_rot,
                                pose.global_trans)
        v = v.data
        frag = render.rasterize(v, t.faces, fr.camera)
        feat = _view_feature(v, t.faces, fr.camera)
        uv_pix, (rows, cols) = render.fragment_uvs(frag, t.faces, t.uv_coords)
        out.append({"verts": v, "frag": frag, "pose": pose,
                    "view_uv": _vertex_to_uv(feat, t.faces, uv_cache, uv_res),
                    "uv_pix": uv_pix, "rows": rows, "cols": cols,
                    "camera": fr.camera, "image": fr.image})
    return out, uv_cache


@dataclass
class ShadowConfig:
    iters: int = 250
    lr: float = 1e-2
    tv_weight: float = 0.1
    calib_weight: float = 0.05
    bright_weight: float = 0.01
    base_color_damping: float = 0.0
    grad_levels: int = 3
    uv_res: int = 64
    width: int = 32
    seed: int = 0
    log_path: Optional[str] = None


@dataclass
class ShadowResult:
    net: ShadowNet
    base_color: np.ndarray
    log: list


def _shadow_frame_loss(net, cache_entry, base_color, tv_weight, grad_levels,
                       calib_weight, bright_weight):
    fr = cache_entry
    h, w = fr["image"].shape[:2]
    sh_uv = net.forward(fr["pose"].global_rot, fr["pose"].theta,
                        net._z, fr["view_uv"])
    rows, cols = fr["rows"], fr["cols"]
    idx = rows * w + cols
    k = len(rows)
    sh = render.sample_texture(sh_uv, fr["uv_pix"])
    sh = tape.reshape(sh, (k, 1))
    alb = base_color * np.ones((k, 1))
    img_cal = tape.reshape(
        tape.scatter_rows(alb, idx, h * w, channels=3), (h, w, 3))
    img_sh = tape.reshape(
        tape.scatter_rows(alb * sh, idx, h * w, channels=3), (h, w, 3))
    cap = fr["image"]
    # the calibration pair is down-weighted: the shadowed pair must carry the
    # scale (shadow < 1 forces the base color up to the unshadowed albedo),
    # otherwise the base color collapses to the mean captured brightness
    total = calib_weight * (
        tape.tmean(tape.tabs(img_cal - cap))
        + lss.loss_multiscale_gradient(img_cal, cap, levels=grad_levels)) \
        + tape.tmean(tape.tabs(img_sh - cap)) \
        + lss.loss_multiscale_gradient(img_sh, cap, levels=grad_levels)
    # minimal-darkening prior: of all (base color, shadow) pairs whose
    # product matches the capture, prefer the brightest shadow — this pins
    # the scale that the multiplicative decomposition leaves free
    total = total + bright_weight * tape.tmean(1.0 - sh)
    if tv_weight > 0:
        shadow_img = tape.reshape(
            tape.scatter_rows(sh, idx, h * w, channels=1), (h, w))
        total = total + tv_weight * lss.loss_tv_masked(
            shadow_img, fr["frag"].mask)
    return total


def estimate_shadow(frames, geometry, model, config=None, cache=None):
    """Decompose the capture into a single calibrated base color and a
    pose/view-conditioned shadow map, leaving geometry frozen."""
    cfg = config or ShadowConfig()
    if cache is None:
        cache, _ = posed_frame_cache(frames, geometry, model, cfg.uv_res)
    if not cache:
        raise ValueError("no frames to decompose")
    rng = np.random.default_rng(cfg.seed)
    nj = model.template.num_joints
    net = ShadowNet(cfg.uv_res, cond_dim=6 + nj * 6 + model.d_id, rng=rng,
                    width=cfg.width)
    net._z = np.asarray(geometry.z, dtype=np.float64)

    # a fully lit surface point shows the unshadowed base color, so the
    # brightest captured pixels anchor the multiplicative scale; the color
    # stays frozen at the anchor by default (damping 0) because the data
    # terms and priors otherwise drag it off and the shadow field silently
    # absorbs the difference
    fg = np.concatenate([c["image"][c["frag"].mask].reshape(-1, 3)
                         for c in cache], axis=0)
    init = np.clip(np.quantile(fg, 0.995, axis=0) / 0.98, 0.05, 1.0)
    base_color = net.params.add("base_color", init)

    opt = Adam(net.params, lr=cfg.lr)
    upd_mask = {"base_color": np.full(3, cfg.base_color_damping)}
    log = []
    for it in range(cfg.iters):
        total = None
        for entry in cache:
            fl = _shadow_frame_loss(net, entry, base_color, cfg.tv_weight,
                                    cfg.grad_levels, cfg.calib_weight,
                                    cfg.bright_weight)
            total = fl if total is None else total + fl
        total = total * (1.0 / len(cache))
        net.params.zero_grad()
        total.backward()
        opt.step(mask=upd_mask)
        log.append({"iter": it, "total": float(total.data)})
    if cfg.log_path:
        with open(cfg.log_path, "w") as f:
            for entry in log:
                f.write(json.dumps(entry) + "\n")
    return ShadowResult(net=net, base_color=base_color.data.copy(), log=log)


# ---------------------------------------------------------------------------
# adaptation stage 3: texture optimization
# ---------------------------------------------------------------------------


@dataclass
class TextureConfig:
    res: int = 64
    refine_iters: int = 120
    lr: float = 1e-2
    shadow_lr: float = 1e-3
    tv_weight: float = 0.5
    shadow_floor: float = 0.05
    fill_iters: int = 400
    grad_levels: int = 3
    # joint shadow fine-tuning during texture refinement re-opens the
    # albedo/shadow scale ambiguity the decomposition stage resolved, so it
    # stays off unless explicitly requested
    finetune_shadow: bool = False
    log_path: Optional[str] = None


@dataclass
class TextureResult:
    albedo: UvMap
    inpainted: np.ndarray
    log: list


def optimize_texture(frames, geometry, model, shadow, config=None, cache=None):
    """Recover the albedo texture: divide each frame by its predicted shadow,
    unwrap and merge, diffusion-fill holes, then jointly refine texels and
    fine-tune the shadow network against the captured images."""
    cfg = config or TextureConfig()
    t = model.template
    net = shadow.net
    if cache is None or cfg.res != net.res:
        cache, uv_cache = posed_frame_cache(frames, geometry, model, cfg.res)
    else:
        uv_cache = render.uv_rasterize(t.uv_coords, t.faces, cfg.res)

    maps = []
    for entry in cache:
        h, w = entry["image"].shape[:2]
        sh_uv = net.forward(entry["pose"].global_rot, entry["pose"].theta,
                            net._z, _pool_to(entry["view_uv"], net.res)).data
        sh_px = render.sample_texture(
            np.clip(sh_uv, cfg.shadow_floor, 1.0), entry["uv_pix"]).data
        divided = np.array(entry["image"], dtype=np.float64)
        divided[entry["rows"], entry["cols"]] /= sh_px[:, None]
        maps.append(render.unwrap_to_uv(
            np.clip(divided, 0.0, 1.5), entry["verts"], t.faces, t.uv_coords,
            entry["camera"], cfg.res, uv_cache=uv_cache))
    merged = render.merge_unwraps(maps)
    filled, inpainted = diffusion_fill(merged.values, merged.weight > 0,
                                       iters=cfg.fill_iters)

    texp = Params()
    tex = texp.add("texture", np.clip(filled, 0.0, 1.0))
    opt_t = Adam(texp, lr=cfg.lr)
    opt_s = Adam(net.params, lr=cfg.shadow_lr) if cfg.finetune_shadow else None

    log = []
    for it in range(cfg.refine_iters):
        total = None
        for entry in cache:
            h, w = entry["image"].shape[:2]
            sh_uv = net.forward(entry["pose"].global_rot,
                                entry["pose"].theta, net._z,
                                _pool_to(entry["view_uv"], net.res))
            img, _ = render.render_shadowed(
                entry["verts"], t.faces, t.uv_coords, entry["camera"],
                tex, sh_uv, fragments=entry["frag"])
            cap = entry["image"]
            fl = tape.tmean(tape.tabs(img - cap)) \
                + lss.loss_multiscale_gradient(img, cap,
                                               levels=cfg.grad_levels)
            total = fl if total is None else total + fl
        total = total * (1.0 / len(cache))
        if inpainted.any():
            total = total + cfg.tv_weight * lss.loss_tv_masked(tex, inpainted)
        texp.zero_grad()
        net.params.zero_grad()
        total.backward()
        opt_t.step()
        if opt_s is not None:
            opt_s.step()
        tex.data = np.clip(tex.data, 0.0, 1.0)
        log.append({"iter": it, "total": float(total.data)})
    if cfg.log_path:
        with open(cfg.log_path, "w") as f:
            for entry in log:
                f.write(json.dumps(entry) + "\n")
    return TextureResult(albedo=UvMap(tex.data.copy(), merged.weight),
                         inpainted=inpainted, log=log)


# ---------------------------------------------------------------------------
# bundle: the packaged adaptation output
# ---------------------------------------------------------------------------


@dataclass
class AvatarBundle:
    z: np.ndarray
    poses: list
    albedo: UvMap
    shadow: ShadowNet
    base_color: np.ndarray
    meta: dict = field(default_factory=dict)

    def render_frame(self, model, camera, pose_index=None, pose=None):
        """Re-render one capture frame (albedo x predicted shadow)."""
        t = model.template
        p = pose if pose is not None else self.poses[pose_index]
        v, _, _ = model.forward(self.z, p.theta, p.global_rot, p.global_trans)
        v = v.data
        uv_cache = render.uv_rasterize(t.uv_coords, t.faces, self.shadow.res)
        feat = _vertex_to_uv(_view_feature(v, t.faces, camera), t.faces,
                             uv_cache, self.shadow.res)
        sh_uv = self.shadow.forward(p.global_rot, p.theta, self.z, feat).data
        img, _ = render.render_shadowed(v, t.faces, t.uv_coords, camera,
                                        self.albedo.values, sh_uv)
        return img.data, v


def adapt_avatar(frames, model, fit_config=None, shadow_config=None,
                 texture_config=None):
    """Full adaptation chain: geometry fit -> shadow decomposition ->
    texture optimization, packaged as an AvatarBundle."""
    geo = fit_geometry(frames, model, fit_config)
    good = [fr for fr, flag in zip(frames, geo.flags) if not flag]
    if not good:
        raise RuntimeError("all frames flagged as non-converged")
    scfg = shadow_config or ShadowConfig()
    cache, _ = posed_frame_cache(frames, geo, model, scfg.uv_res)
    cache = [c for c, flag in zip(cache, geo.flags) if not flag]
    sh = estimate_shadow(good, geo, model, scfg, cache=cache)
    tcfg = texture_config or TextureConfig()
    if tcfg.res == scfg.uv_res:
        tex = optimize_texture(good, geo, model, sh, tcfg, cache=cache)
    else:
        tex = optimize_texture(good, geo, model, sh, tcfg)
    meta = {"per_frame_loss": geo.per_frame_loss,
            "flags": [bool(f) for f in geo.flags]}
    return AvatarBundle(z=geo.z, poses=geo.poses, albedo=tex.albedo,
                        shadow=sh.net, base_color=sh.base_color, meta=meta)


def save_bundle(path, bundle):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    imgio.save_png(path / "albedo.png", bundle.albedo.values)
    if bundle.albedo.weight is not None:
        imgio.save_pfm(path / "albedo_weight.pfm", bundle.albedo.weight)
    checkpoint.save_checkpoint(path / "shadownet.ckpt",
                               bundle.shadow.params.state())
    with open(path / "poses.json", "w") as f:
        json.dump({"z": bundle.z.tolist(),
                   "poses": [p.to_json() for p in bundle.poses]}, f)
    with open(path / "basecolor.json", "w") as f:
        json.dump({"rgb": bundle.base_color.tolist()}, f)
    with open(path / "manifest.json", "w") as f:
        json.dump({"shadow": {"res": bundle.shadow.res,
                              "cond_dim": bundle.shadow.cond_dim,
                              "width": bundle.shadow.width,
                              "pos_ch": bundle.shadow.pos_ch,
                              "view_ch": bundle.shadow.view_ch},
                   "texture_res": bundle.albedo.resolution,
                   "meta": bundle.meta}, f, indent=1)


def load_bundle(path):
    path = Path(path)
    with open(path / "manifest.json") as f:
        manifest = json.load(f)
    sd = manifest["shadow"]
    net = ShadowNet(sd["res"], sd["cond_dim"], np.random.default_rng(0),
                    width=sd["width"], pos_ch=sd["pos_ch"],
                    view_ch=sd.get("view_ch", 4))
    state = checkpoint.load_checkpoint(path / "shadownet.ckpt")
    net.params.add("base_color", np.zeros(3))
    net.params.load_state(state)
    with open(path / "poses.json") as f:
        pj = json.load(f)
    with open(path / "basecolor.json") as f:
        bc = np.array(json.load(f)["rgb"])
    albedo = imgio.load_png(path / "albedo.png")
    wpath = path / "albedo_weight.pfm"
    weight = imgio.load_pfm(wpath) if wpath.exists() else None
    z = np.array(pj["z"])
    net._z = z
    return AvatarBundle(z=z, poses=[Pose.from_json(p) for p in pj["poses"]],
                        albedo=UvMap(albedo, weight), shadow=net,
                        base_color=bc, meta=manifest.get("meta", {}))
