"""Training objective: data terms, regularizers, the weighted total, the
optical-flow abstraction for the image-matching term, and the adaptation-stage
image losses (total variation, multiscale gradient difference).

Conventions that tests rely on:
- loss_pose / loss_mask are means per coordinate/pixel;
- loss_p2p is the mean over scan points of the per-point L1 distance to the
  L2-nearest mesh vertex, with correspondences frozen (stop-gradient);
- regularizer reductions are sums unless stated otherwise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import tape
from .kin import IDENT6, rot6d_to_matrix, squared_rotation_angle
from .tape import Tensor, astensor

TERM_WEIGHTS = {
    "pose": 1.0,
    "p2p": 10.0,
    "mask": 0.1,
    "img": 0.1,
    "theta": 0.01,
    "kl": 0.001,
    "tangential_id": 1000.0,
    "tangential_pose": 10.0,
    "laplacian": 75000.0,
    "phi": 0.001,
    "volume": 0.1,
    "cut": 0.1,
}


@dataclass
class LossBreakdown:
    terms: dict            # name -> scalar Tensor
    total: Tensor

    def values(self):
        return {k: float(v.data) for k, v in self.terms.items()} | \
            {"total": float(self.total.data)}


@dataclass
class FlowField:
    flow: np.ndarray    # (H, W, 2) pixel displacement (dx, dy), source->target
    valid: np.ndarray   # (H, W) bool


# -- data terms --------------------------------------------------------------


def loss_pose(joints, joints_target):
    """Mean absolute joint-coordinate error (mm)."""
    j = astensor(joints)
    t = np.asarray(joints_target, dtype=np.float64)
    if j.shape != t.shape:
        raise ValueError("joint arrays must have the same shape")
    return tape.tmean(tape.tabs(j - t))


def loss_p2p(vertices, scan):
    """Mean over scan points of the L1 distance to the nearest (by L2) mesh
    vertex. Correspondences are found on the current values and frozen."""
    v = astensor(vertices)
    s = np.asarray(scan, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty scan")
    idx = cKDTree(v.data).query(s)[1]
    diff = tape.tabs(v[idx] - s)
    return tape.tsum(diff) * (1.0 / s.shape[0])


def loss_mask(soft_mask, target_mask):
    m = astensor(soft_mask)
    t = np.asarray(target_mask, dtype=np.float64)
    if m.shape != t.shape:
        raise ValueError("mask shapes differ")
    return tape.tmean(tape.tabs(m - t))


def visible_vertex_mask(fragments, depth_tol_mm=2.0):
    """Vertices whose projection lands on a filled pixel at matching depth."""
    h, w = fragments.depth.shape
    p = fragments.vertex_2d
    z = fragments.vertex_depth
    px = np.clip(np.floor(p[:, 0]).astype(np.int64), 0, w - 1)
    py = np.clip(np.floor(p[:, 1]).astype(np.int64), 0, h - 1)
    inside = (p[:, 0] >= 0) & (p[:, 0] < w) & (p[:, 1] >= 0) & (p[:, 1] < h)
    buf = fragments.depth[py, px]
    return inside & (buf > 0) & (np.abs(buf - z) < depth_tol_mm) & (z > 0)


def loss_image_matching(vertex_2d, visible, flow_field, lookup_positions=None):
    """Mean per-coordinate L1 between visible vertices' 2D positions and
    their flow-displaced targets. Flow and visibility are stop-gradient;
    gradients reach only vertex_2d. ``lookup_positions`` pins the positions
    used to build the targets (by default the current vertex positions), so
    the correspondence can be held fixed while vertex_2d varies — e.g. for
    numeric gradient verification of the differentiable path."""
    v2d = astensor(vertex_2d)
    visible = np.asarray(visible, dtype=bool)
    h, w = flow_field.valid.shape
    p = v2d.data if lookup_positions is None else np.asarray(lookup_positions)
    px = np.clip(np.floor(p[:, 0]).astype(np.int64), 0, w - 1)
    py = np.clip(np.floor(p[:, 1]).astype(np.int64), 0, h - 1)
    use = visible & flow_field.valid[py, px]
    if not use.any():
        warnings.warn("image-matching loss: no visible vertices with valid flow")
        return Tensor(np.array(0.0))
    target = p[use] + flow_field.flow[py[use], px[use]]
    return tape.tmean(tape.tabs(v2d[use] - target))


# -- optical flow ------------------------------------------------------------


def _to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def _downsample2(img):
    h, w = img.shape
    return img[:h - h % 2, :w - w % 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _ncc_match(src, dst, flow_init, patch, search, ncc_threshold):
    """Per-pixel integer refinement of flow by patch NCC over a small window."""
    h, w = src.shape
    r = patch // 2
    pad_s = np.pad(src, r, mode="edge")
    best_flow = flow_init.copy()
    best_ncc = np.full((h, w), -np.inf)
    ys, xs = np.mgrid[0:h, 0:w]
    # source patches, centered
    patches = np.lib.stride_tricks.sliding_window_view(pad_s, (patch, patch))
    sp = patches.reshape(h, w, -1)
    sp_mean = sp.mean(axis=2, keepdims=True)
    sp_c = sp - sp_mean
    sp_norm = np.sqrt((sp_c ** 2).sum(axis=2))
    textured = sp_norm > 1e-6

    pad_d = np.pad(dst, r, mode="edge")
    dpatches = np.lib.stride_tricks.sliding_window_view(pad_d, (patch, patch))
    dp = dpatches.reshape(h, w, -1)
    dp_c = dp - dp.mean(axis=2, keepdims=True)
    dp_norm = np.sqrt((dp_c ** 2).sum(axis=2))

    for dy in range(-search, search + 1):
        for dx in range(-search, search + 1):
            tx = np.clip(np.round(xs + flow_init[..., 0]).astype(int) + dx, 0, w - 1)
            ty = np.clip(np.round(ys + flow_init[..., 1]).astype(int) + dy, 0, h - 1)
            num = (sp_c * dp_c[ty, tx]).sum(axis=2)
            den = sp_norm * dp_norm[ty, tx]
            ncc = np.where(den > 1e-12, num / np.where(den == 0, 1.0, den), -1.0)
            better = ncc > best_ncc
            best_ncc = np.where(better, ncc, best_ncc)
            best_flow[..., 0] = np.where(better, tx - xs, best_flow[..., 0])
            best_flow[..., 1] = np.where(better, ty - ys, best_flow[..., 1])
    valid = textured & (best_ncc > ncc_threshold)
    return best_flow.astype(np.float64), valid


def compute_flow(src_img, dst_img, levels=3, patch=5, search=2,
                 ncc_threshold=0.6):
    """Coarse-to-fine pyramid block matching with NCC patch scoring.

    Returns a FlowField mapping source pixels to target positions; pixels
    with low texture or poor correlation are marked invalid.
    """
    src = _to_gray(src_img)
    dst = _to_gray(dst_img)
    if src.shape != dst.shape:
        raise ValueError("flow inputs must share a resolution")
    pyr_s, pyr_d = [src], [dst]
    for _ in range(levels - 1):
        pyr_s.append(_downsample2(pyr_s[-1]))
        pyr_d.append(_downsample2(pyr_d[-1]))

    flow = np.zeros(pyr_s[-1].shape + (2,))
    valid = None
    for lv in range(levels - 1, -1, -1):
        s, d = pyr_s[lv], pyr_d[lv]
        if flow.shape[:2] != s.shape:
            flow = 2.0 * np.repeat(np.repeat(flow, 2, axis=0), 2, axis=1)
            flow = flow[:s.shape[0], :s.shape[1]]
        sr = search if lv < levels - 1 else max(search, 3)
        flow, valid = _ncc_match(s, d, flow, patch, sr, ncc_threshold)
    return FlowField(flow=flow, valid=valid)


def ground_truth_flow(src_positions, dst_positions, mask):
    """Flow field from known per-pixel correspondences (synthetic data):
    both inputs are (H, W, 2) pixel positions of the same surface point."""
    flow = np.asarray(dst_positions, dtype=np.float64) - src_positions
    return FlowField(flow=flow, valid=np.asarray(mask, dtype=bool))


# -- regularizers ------------------------------------------------------------


def reg_pose_magnitude(theta):
    """Sum of squared rotation angles (axis-angle magnitude) over joints."""
    r6 = astensor(theta) + IDENT6
    rots = rot6d_to_matrix(r6)
    return tape.tsum(squared_rotation_angle(rots))


def reg_kl(mu, log_var):
    mu = astensor(mu)
    lv = astensor(log_var)
    return 0.5 * tape.tsum(tape.exp(lv) + mu * mu - 1.0 - lv)


def reg_tangential(corrective, normals):
    """Sum of squared tangential components (normals are stop-gradient)."""
    c = astensor(corrective)
    n = np.asarray(normals, dtype=np.float64)
    along = tape.tsum(c * n, axis=1)
    tangent = c - tape.reshape(along, (along.shape[0], 1)) * n
    return tape.tsum(tangent * tangent)


def reg_laplacian(v_full, v_zeroed, lap_matrix, v_template):
    """Change of Laplacian (differential) coordinates relative to the
    template, squared and summed over both mesh variants."""
    lm = np.asarray(lap_matrix)
    base = lm @ np.asarray(v_template, dtype=np.float64)
    total = None
    for v in (v_full, v_zeroed):
        if v is None:
            continue
        d = tape.matmul(Tensor(lm), astensor(v)) - base
        term = tape.tsum(d * d)
        total = term if total is None else total + term
    return total


def laplacian_matrix(mesh):
    """Dense I - D^{-1} A for the mesh's vertex graph."""
    from .geom import laplacian_rows

    rows, cols, deg = laplacian_rows(mesh)
    nv = mesh.num_vertices
    m = np.eye(nv)
    np.add.at(m, (rows, cols), -1.0 / deg[rows])
    return m


def reg_phi(phi):
    return tape.tsum(tape.relu(astensor(phi)))


def finger_segments(template):
    """Bone segments below the finger roots: list of (joint_a, joint_b,
    vertex indices) with vertices assigned by dominant skin weight."""
    parent = template.parent
    root = int(np.flatnonzero(parent < 0)[0])
    segs = []
    dominant = template.skin_weights.argmax(axis=1)
    for j in range(len(parent)):
        p = parent[j]
        if p < 0 or p == root:
            continue
        verts = np.flatnonzero(dominant == j)
        if len(verts):
            segs.append((int(p), int(j), verts))
    return segs


def segment_radii(vertices, joints, segments):
    """Mean radial distance of each segment's vertices to its bone axis,
    on the identity-corrected rest mesh."""
    v = np.asarray(vertices, dtype=np.float64)
    j = np.asarray(joints, dtype=np.float64)
    radii = []
    for a, b, idx in segments:
        radii.append(_radial_dist_np(v[idx], j[a], j[b]).mean())
    return np.array(radii)


def _radial_dist_np(p, a, b):
    u = b - a
    u = u / max(np.linalg.norm(u), 1e-12)
    rel = p - a
    perp = rel - np.outer(rel @ u, u)
    return np.linalg.norm(perp, axis=1)


def reg_volume(v_posed, joints_posed, segments, radii):
    """Hinge on radial collapse: sum over finger vertices of
    max(0, rest_radius - posed radial distance to the bone axis)."""
    v = astensor(v_posed)
    j = astensor(joints_posed)
    total = None
    for (a, b, idx), r in zip(segments, radii):
        axis = j[b] - j[a]
        inv_len = 1.0 / max(np.linalg.norm(axis.data), 1e-12)  # stop-gradient scale
        u = axis * inv_len
        rel = v[idx] - j[a]
        along = tape.tsum(rel * tape.reshape(u, (1, 3)), axis=1)
        perp = rel - tape.reshape(along, (-1, 1)) * tape.reshape(u, (1, 3))
        d = tape.sqrt(tape.tsum(perp * perp, axis=1) + 1e-12)
        term = tape.tsum(tape.relu(r - d))
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.array(0.0))


def reg_flat_cut(ring_vertices):
    """Flatness of the forearm-cut boundary: fan the ring from its centroid
    and penalize mean |n_k . n_k+1 - 1| over consecutive fan-triangle
    normals."""
    v = astensor(ring_vertices)
    k = v.shape[0]
    if k < 3:
        raise ValueError("cut ring needs at least 3 vertices")
    c = tape.tmean(v, axis=0)
    rel = v - tape.reshape(c, (1, 3))
    nxt = v[np.roll(np.arange(k), -1)] - tape.reshape(c, (1, 3))
    n = tape.cross3(rel, nxt)
    norm = tape.sqrt(tape.tsum(n * n, axis=1) + 1e-12)
    n = n / tape.reshape(norm, (k, 1))
    n2 = n[np.roll(np.arange(k), -1)]
    dots = tape.tsum(n * n2, axis=1)
    return tape.tmean(tape.tabs(dots - 1.0))


def total_training_loss(terms, weights=None):
    """Weighted sum of the named terms. Missing terms count as zero;
    ``weights`` overrides the default per-term weights."""
    if weights is None:
        weights = TERM_WEIGHTS
    total = None
    out = {}
    for name, w in weights.items():
        t = terms.get(name)
        if t is None:
            t = Tensor(np.array(0.0))
        t = astensor(t)
        out[name] = t
        wt = t * w
        total = wt if total is None else total + wt
    return LossBreakdown(terms=out, total=total)


# -- adaptation-stage image losses -------------------------------------------


def loss_tv(img):
    """Mean absolute horizontal plus vertical neighbor difference."""
    x = astensor(img)
    dh = x[:, 1:] - x[:, :-1]
    dv = x[1:, :] - x[:-1, :]
    return tape.tmean(tape.tabs(dh)) + tape.tmean(tape.tabs(dv))


def loss_tv_masked(img, mask):
    """TV restricted to differences where both texels are in the mask."""
    x = astensor(img)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:2]:
        raise ValueError("mask shape mismatch")
    mh = m[:, 1:] & m[:, :-1]
    mv = m[1:, :] & m[:-1, :]
    total = Tensor(np.array(0.0))
    cnt = 0
    if mh.any():
        dh = x[:, 1:] - x[:, :-1]
        total = total + tape.tmean(tape.tabs(dh[mh]))
        cnt += 1
    if mv.any():
        dv = x[1:, :] - x[:-1, :]
        total = total + tape.tmean(tape.tabs(dv[mv]))
        cnt += 1
    return total


def _avg_pool_img(x):
    h, w = x.shape[0], x.shape[1]
    rest = x.shape[2:]
    xr = tape.reshape(x, (h // 2, 2, w // 2, 2) + rest)
    return tape.tmean(tape.tmean(xr, axis=3), axis=1)


def loss_multiscale_gradient(img_a, img_b, levels=3):
    """L1 difference of image gradients over a pyramid: an edge-structure
    match that stands in for a perceptual loss."""
    a = astensor(img_a)
    b = astensor(img_b)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    total = None
    for lv in range(levels):
        gh = (a[:, 1:] - a[:, :-1]) - (b[:, 1:] - b[:, :-1])
        gv = (a[1:, :] - a[:-1, :]) - (b[1:, :] - b[:-1, :])
        term = tape.tmean(tape.tabs(gh)) + tape.tmean(tape.tabs(gv))
        total = term if total is None else total + term
        if lv < levels - 1:
            if a.shape[0] < 4 or a.shape[1] < 4:
                break
            a = _avg_pool_img(a)
            b = _avg_pool_img(b)
    return total
