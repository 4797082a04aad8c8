"""Procedural synthetic-hand data generator and evaluation metrics.

The generator is the ground-truth oracle for every pipeline claim: subjects
are parametric variations of one comb-shaped pillow hand (a 2D palm+finger
domain extruded into top/bottom height fields), so every subject shares the
template topology and exact vertex correspondence by construction. Captures
render the ground-truth mesh with a procedural albedo times a two-light
Lambert shadow, and emit per-frame depth, masks, joints, scans, cameras,
ground-truth flow, and ground-truth UV shadow maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imgio, render
from .geom import TemplateMesh, face_normals, save_obj, vertex_normals
from .kin import Pose, matrix_to_rot6d, IDENT6, pose_mesh
from .render import Camera, UvMap

NUM_FINGERS = 5
JOINTS_PER_FINGER = 4      # root, mid, distal, tip
NUM_JOINTS = 1 + NUM_FINGERS * JOINTS_PER_FINGER

_QUALITY = {
    # nw: quads across a finger; gap: quads between fingers and at margins;
    # palm_rows: quads along the palm; seg_rows: quads per finger segment
    # (proximal, middle, distal, tip cap)
    "desk": {"nw": 4, "gap": 2, "palm_rows": 10, "seg_rows": (4, 3, 3, 2)},
    "mini": {"nw": 2, "gap": 1, "palm_rows": 3, "seg_rows": (1, 1, 1, 1)},
}


@dataclass
class HandDims:
    """Continuous hand dimensions (mm); topology is shared across values."""

    palm_len: float = 80.0
    palm_width_margin: float = 6.0
    thickness: float = 24.0
    finger_lengths: np.ndarray = field(
        default_factory=lambda: np.array([[28.0, 20.0, 16.0],
                                          [35.0, 24.0, 18.0],
                                          [38.0, 26.0, 20.0],
                                          [34.0, 23.0, 18.0],
                                          [26.0, 18.0, 14.0]]))
    finger_radii: np.ndarray = field(
        default_factory=lambda: np.array([9.0, 7.5, 7.5, 7.0, 6.5]))
    finger_gap: float = 6.0
    weight_falloff: float = 10.0

    def to_json(self):
        return {"palm_len": self.palm_len,
                "palm_width_margin": self.palm_width_margin,
                "thickness": self.thickness,
                "finger_lengths": self.finger_lengths.tolist(),
                "finger_radii": self.finger_radii.tolist(),
                "finger_gap": self.finger_gap,
                "weight_falloff": self.weight_falloff}

    @classmethod
    def from_json(cls, d):
        return cls(palm_len=d["palm_len"],
                   palm_width_margin=d["palm_width_margin"],
                   thickness=d["thickness"],
                   finger_lengths=np.array(d["finger_lengths"]),
                   finger_radii=np.array(d["finger_radii"]),
                   finger_gap=d["finger_gap"],
                   weight_falloff=d["weight_falloff"])


def sample_dims(seed):
    """Per-subject dimensions, deterministic from the seed, inside
    anatomical bounds (segments 14-60 mm, radii 5-12 mm)."""
    rng = np.random.default_rng(seed)
    base = HandDims()
    d = HandDims(
        palm_len=base.palm_len * rng.uniform(0.85, 1.15),
        palm_width_margin=base.palm_width_margin,
        thickness=base.thickness * rng.uniform(0.85, 1.15),
        finger_lengths=np.clip(
            base.finger_lengths * rng.uniform(0.8, 1.25, size=(5, 3)), 14.0, 60.0),
        finger_radii=np.clip(
            base.finger_radii * rng.uniform(0.85, 1.2, size=5), 5.0, 12.0),
        finger_gap=base.finger_gap,
        weight_falloff=base.weight_falloff * rng.uniform(0.8, 1.2),
    )
    return d


# -- mesh construction -------------------------------------------------------


def _domain(dims, q):
    """2D comb domain: vertex grid, triangles, and bookkeeping."""
    nw, gap = q["nw"], q["gap"]
    palm_rows = q["palm_rows"]
    seg_rows = q["seg_rows"]
    r = dims.finger_radii

    # y columns: margin | finger 0 | gap | finger 1 | ... | finger 4 | margin
    ys = []
    finger_cols = []
    y = 0.0
    ys.extend(np.linspace(-dims.palm_width_margin, 0.0, gap, endpoint=False))
    for k in range(NUM_FINGERS):
        c0 = len(ys)
        ys.extend(np.linspace(y, y + 2 * r[k], nw, endpoint=False))
        finger_cols.append((c0, c0 + nw))
        y += 2 * r[k]
        if k < NUM_FINGERS - 1:
            ys.extend(np.linspace(y, y + dims.finger_gap, gap, endpoint=False))
            y += dims.finger_gap
    ys.extend(np.linspace(y, y + dims.palm_width_margin, gap + 1))
    ys = np.array(ys)
    ys -= ys.mean()                      # center the hand on y = 0
    ncol = len(ys) - 1

    verts = []
    quads = []        # (a, b, c, d) = (i,j), (i,j+1), (i+1,j+1), (i+1,j)
    vid = {}

    def add(i, j, x, yy):
        key = (i, j)
        if key not in vid:
            vid[key] = len(verts)
            verts.append((x, yy))
        return vid[key]

    L = dims.palm_len
    px = np.linspace(0.0, L, palm_rows + 1)
    for i in range(palm_rows + 1):
        for j in range(ncol + 1):
            add(i, j, px[i], ys[j])
    for i in range(palm_rows):
        for j in range(ncol):
            quads.append((vid[(i, j)], vid[(i, j + 1)],
                          vid[(i + 1, j + 1)], vid[(i + 1, j)]))

    finger_rows = sum(seg_rows)
    finger_vids = []      # per finger: (rows+1) x (nw+1) vertex ids
    for k in range(NUM_FINGERS):
        c0, c1 = finger_cols[k]
        l1, l2, l3 = dims.finger_lengths[k]
        cap = r[k]
        stops = [0.0, l1, l1 + l2, l1 + l2 + l3, l1 + l2 + l3 + cap]
        xs = [L]
        for s in range(4):
            seg = np.linspace(stops[s], stops[s + 1], seg_rows[s] + 1)[1:]
            xs.extend(L + seg)
        rows = [[vid[(palm_rows, j)] for j in range(c0, c1 + 1)]]
        for i in range(1, finger_rows + 1):
            row = []
            for j in range(c0, c1 + 1):
                row.append(add(palm_rows + 1000 * (k + 1) + i, j, xs[i], ys[j]))
            rows.append(row)
        for i in range(finger_rows):
            for j in range(nw):
                quads.append((rows[i][j], rows[i][j + 1],
                              rows[i + 1][j + 1], rows[i + 1][j]))
        finger_vids.append(rows)

    verts = np.array(verts)
    quads = np.array(quads, dtype=np.int64)
    wrist_row = [vid[(0, j)] for j in range(ncol + 1)]
    palm_vids = np.array([[vid[(i, j)] for j in range(ncol + 1)]
                          for i in range(palm_rows + 1)], dtype=np.int64)
    knuckle_x = L
    centers = np.array([0.5 * (ys[c0] + ys[c1]) for c0, c1 in finger_cols])
    return {
        "verts": verts, "quads": quads, "wrist_row": wrist_row,
        "palm_vids": palm_vids, "finger_vids": finger_vids,
        "finger_centers": centers, "knuckle_x": knuckle_x,
        "seg_rows": seg_rows, "nw": nw, "finger_cols": finger_cols, "ys": ys,
    }


def _boundary_edges(quads):
    count = {}
    for a, b, c, d in quads:
        for e in ((a, b), (b, c), (c, d), (d, a)):
            key = (min(e), max(e))
            count[key] = count.get(key, 0) + 1
    return {e for e, n in count.items() if n == 1}


def _triangulate(quads, glued):
    """Split quads into counterclockwise triangles, choosing the diagonal
    that avoids triangles whose vertices all lie on the glued outline (those
    would become degenerate zero-thickness flaps in the pillow)."""
    tris = []
    for a, b, c, d in quads:
        # (a, d, c) + (a, c, b) is the counterclockwise split on diagonal a-c
        for t1, t2 in (((a, d, c), (a, c, b)), ((a, d, b), (d, c, b))):
            if not (all(glued[v] for v in t1) or all(glued[v] for v in t2)):
                tris.append(t1)
                tris.append(t2)
                break
        else:
            raise ValueError("quad with all four corners on the glued outline")
    return np.array(tris, dtype=np.int64)


def _dist_to_segments(points, segs_a, segs_b):
    """Min distance from each 2D point to a set of 2D segments."""
    p = points[:, None, :]
    a = segs_a[None]
    b = segs_b[None]
    ab = b - a
    denom = np.maximum((ab ** 2).sum(-1), 1e-12)
    t = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
    c = a + t[..., None] * ab
    return np.sqrt(((p - c) ** 2).sum(-1)).min(axis=1)


def build_hand_mesh(dims, quality="desk"):
    """Dims -> watertight-except-wrist pillow mesh with rig and UVs.

    Returns (TemplateMesh, layout) where layout records the UV chart
    geometry (finger circles etc.) used by the albedo generator.
    """
    q = _QUALITY[quality]
    dom = _domain(dims, q)
    dv = dom["verts"]
    nd = len(dv)

    bedges = _boundary_edges(dom["quads"])
    boundary = np.zeros(nd, dtype=bool)
    for a, b in bedges:
        boundary[a] = boundary[b] = True
    wrist_set = set(dom["wrist_row"])
    corners = {dom["wrist_row"][0], dom["wrist_row"][-1]}
    # glued: boundary vertices except the open wrist edge (corners stay glued
    # so the cut ring closes through them)
    glued = np.array([boundary[i] and (i not in wrist_set or i in corners)
                      for i in range(nd)])

    # distance to the glued outline drives the pillow height
    gsegs = [(a, b) for a, b in bedges
             if glued[a] and glued[b]
             and not (a in wrist_set and b in wrist_set)]
    sa = dv[np.array([e[0] for e in gsegs])]
    sb = dv[np.array([e[1] for e in gsegs])]
    d = _dist_to_segments(dv, sa, sb)

    # local half-thickness: finger radius beyond the knuckle, palm elsewhere
    rho = np.full(nd, dims.thickness * 0.5)
    finger_of = np.full(nd, -1, dtype=np.int64)
    for k, rows in enumerate(dom["finger_vids"]):
        for row in rows:
            for v in row:
                rho[v] = dims.finger_radii[k]
                finger_of[v] = k
    dc = np.minimum(d, rho)
    h = np.sqrt(np.maximum(dc * (2.0 * rho - dc), 0.0))

    dt = _triangulate(dom["quads"], glued)

    # pillow: top copy + bottom copy, glued on the outline
    top = np.arange(nd)
    bottom = np.full(nd, -1, dtype=np.int64)
    verts3 = [np.array([x, y, hz]) for (x, y), hz in zip(dv, h)]
    for i in range(nd):
        if glued[i]:
            bottom[i] = i
        else:
            bottom[i] = len(verts3)
            verts3.append(np.array([dv[i, 0], dv[i, 1], -h[i]]))
    verts3 = np.array(verts3)
    faces = [tuple(t) for t in dt]
    faces += [(bottom[c], bottom[b], bottom[a]) for a, b, c in dt]
    faces = np.array(faces, dtype=np.int64)

    wr = dom["wrist_row"]
    cut_ring = list(wr) + [int(bottom[i]) for i in wr[-2:0:-1]]
    cut_ring = np.array(cut_ring, dtype=np.int64)

    joints, parent, dof_mask, bone_axis, joint_frame = _rig(dims, dom)
    skin = _skin_weights(dims, dom, verts3, finger_of, top, bottom)
    uv, layout = _uv_layout(dom, verts3, top, bottom, cut_ring)

    mesh = TemplateMesh(
        rest_vertices=verts3, faces=faces, uv_coords=uv, skin_weights=skin,
        rest_joints=joints, parent=parent, dof_mask=dof_mask,
        cut_ring=cut_ring, bone_axis=bone_axis, joint_frame=joint_frame)
    layout["finger_of_domain"] = finger_of
    layout["bottom_map"] = bottom
    return mesh, layout


def _rig(dims, dom):
    L = dom["knuckle_x"]
    centers = dom["finger_centers"]
    joints = [np.zeros(3)]
    parent = [-1]
    dof = [[0, 0, 0]]
    for k in range(NUM_FINGERS):
        l1, l2, l3 = dims.finger_lengths[k]
        xs = [L, L + l1, L + l1 + l2, L + l1 + l2 + l3]
        base = len(joints)
        for i, x in enumerate(xs):
            joints.append(np.array([x, centers[k], 0.0]))
            parent.append(0 if i == 0 else base + i - 1)
        dof += [[1, 0, 1], [1, 0, 0], [1, 0, 0], [0, 0, 0]]
    joints = np.array(joints)
    parent = np.array(parent, dtype=np.int64)
    axis = np.zeros((NUM_JOINTS, 3))
    for j in range(1, NUM_JOINTS):
        v = joints[j] - joints[parent[j]]
        axis[j] = v / np.linalg.norm(v)
    # columns: flexion, twist, abduction; right-handed
    frame = np.zeros((NUM_JOINTS, 3, 3))
    frame[:] = np.stack([[0, -1, 0], [1, 0, 0], [0, 0, 1]], axis=1)
    frame[0] = np.eye(3)
    return joints, parent, np.array(dof, dtype=bool), axis, frame


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _skin_weights(dims, dom, verts3, finger_of, top, bottom):
    nd = len(dom["verts"])
    nv = len(verts3)
    w = np.zeros((nv, NUM_JOINTS))
    L = dom["knuckle_x"]
    centers = dom["finger_centers"]
    tw = dims.weight_falloff

    for i in range(nd):
        x, y = dom["verts"][i]
        k = finger_of[i]
        if k < 0:
            k = int(np.argmin(np.abs(centers - y)))
        l1, l2, l3 = dims.finger_lengths[k]
        base = 1 + k * JOINTS_PER_FINGER
        stations = [L, L + l1, L + l1 + l2, L + l1 + l2 + l3]
        jids = [0, base, base + 1, base + 2, base + 3]
        # cumulative ramps: s_m = share of joints >= m
        s = [1.0]
        for st in stations:
            s.append(_smoothstep((x - (st - tw / 2)) / tw))
        row = np.zeros(NUM_JOINTS)
        for m, j in enumerate(jids):
            row[j] = s[m] - (s[m + 1] if m + 1 < len(s) else 0.0)
        row = np.maximum(row, 0.0)
        row /= row.sum()
        w[top[i]] = row
        w[bottom[i]] = row
    return w


def _grow_bump(w, c, rho):
    """Inverse Joukowski map: conformally grows a semicircular bump of
    radius rho at real position c out of the real axis. Maps the upper half
    plane injectively onto the upper half plane minus the bump; the real
    segment [c - 2 rho, c + 2 rho] lands on the bump circle and the rest of
    the axis stays on the axis."""
    z = w - c
    s = np.sqrt(z * z - 4.0 * rho * rho + 0j)
    s = np.where(np.real(np.conj(z) * s) < 0, -s, s)
    return c + 0.5 * (z + s)


def _flatten_bump(w, c, rho):
    """Forward Joukowski map, the inverse of _grow_bump: squashes the bump
    at c back onto the real axis."""
    z = w - c
    z = np.where(np.abs(z) < 1e-12, 1e-12 + 0j, z)
    return c + z + rho * rho / z


def _uv_layout(dom, verts3, top, bottom, cut_ring):
    """Per-vertex injective UV chart, built entirely in closed form.

    The chart is mirror-symmetric about the horizontal axis (top surface
    above, bottom below, glued outline exactly on it). The palm grid is
    first mapped by a ruled interpolation from the wrist semicircle to the
    axis -- injective because both boundary parameterizations are monotone
    -- then one conformal bump per finger is grown out of the axis, which
    preserves injectivity. Finger strips fill their bump by radial scaling
    of the resulting knuckle ring."""
    nv = len(verts3)
    uv = np.full((nv, 2), np.nan)
    nw = dom["nw"]
    pv = dom["palm_vids"]
    fcols = dom["finger_cols"]
    ys = dom["ys"]
    palm_rows = pv.shape[0] - 1
    ncol = pv.shape[1] - 1

    rho = 0.038
    r0 = 0.44
    cxs = np.linspace(0.16, 0.84, NUM_FINGERS) - 0.5   # bump centers, axis=0

    def grow_all(w):
        for c in cxs:
            w = _grow_bump(w, c, rho)
        return w

    def pull_back_real(x, upto=NUM_FINGERS):
        # exact inverse on the real axis through the first `upto` bumps
        w = np.asarray(x, dtype=complex)
        for c in cxs[:upto][::-1]:
            w = _flatten_bump(w, c, rho)
        return w.real

    # knuckle-row axis targets b_j, all real. Finger columns are placed on
    # their bump footprint as seen at the step their bump is grown (pulled
    # back exactly through the earlier bumps); margin and gap columns are
    # stated between the final bumps and pulled back through the full chain.
    # Real-axis pullbacks are exact, so the ordering of the targets along
    # the axis is preserved and the ruled map below cannot fold.
    b = np.empty(ncol + 1)
    for k, (c0, c1) in enumerate(fcols):
        phi = np.pi * (1.0 - np.arange(nw + 1) / nw)
        b[c0:c1 + 1] = pull_back_real(cxs[k] + 2.0 * rho * np.cos(phi), upto=k)

    def fill_axis(j0, j1, u0, u1):
        span = max(ys[j1] - ys[j0], 1e-12)
        frac = np.array([(ys[j] - ys[j0]) / span for j in range(j0 + 1, j1)])
        b[j0 + 1:j1] = pull_back_real(u0 + (u1 - u0) * frac)

    corner_l = float(np.real(grow_all(np.array(-r0 + 0j))))
    corner_r = float(np.real(grow_all(np.array(r0 + 0j))))
    left_len = dom["knuckle_x"] + (ys[fcols[0][0]] - ys[0])
    left_end = corner_l + (cxs[0] - rho - corner_l) \
        * dom["knuckle_x"] / left_len
    b[0] = float(pull_back_real(np.array(left_end)))
    fill_axis(0, fcols[0][0], left_end, cxs[0] - rho)
    for k in range(NUM_FINGERS - 1):
        fill_axis(fcols[k][1], fcols[k + 1][0],
                  cxs[k] + rho, cxs[k + 1] - rho)
    right_len = dom["knuckle_x"] + (ys[ncol] - ys[fcols[-1][1]])
    right_end = corner_r - (corner_r - cxs[-1] - rho) \
        * dom["knuckle_x"] / right_len
    b[ncol] = float(pull_back_real(np.array(right_end)))
    fill_axis(fcols[-1][1], ncol, cxs[-1] + rho, right_end)

    # ruled interpolation: wrist semicircle at t=0 down to the axis at t=1
    alpha = np.pi * (1.0 - np.arange(ncol + 1) / ncol)
    ring = r0 * np.exp(1j * alpha)
    ring[0] = -r0
    ring[-1] = r0
    t = (np.arange(palm_rows + 1) / palm_rows)[:, None]
    grid = (1.0 - t) * ring[None, :] + t * b[None, :]   # (rows+1, cols+1)

    # grow one conformal bump per finger (injectivity preserved)
    grid = grow_all(grid)

    for i in range(palm_rows + 1):
        for j in range(ncol + 1):
            dvid = pv[i, j]
            w = grid[i, j]
            if bottom[dvid] == top[dvid]:
                uv[top[dvid]] = [0.5 + w.real, 0.5]   # glued: exactly on axis
            else:
                uv[top[dvid]] = [0.5 + w.real, 0.5 + w.imag]
                uv[bottom[dvid]] = [0.5 + w.real, 0.5 - w.imag]

    # finger strips: radial scaling of the (slightly distorted) knuckle ring
    fcenters = []
    fradii = []
    for k, rows in enumerate(dom["finger_vids"]):
        c0, c1 = fcols[k]
        knuckle = grid[palm_rows, c0:c1 + 1]            # complex, upper arc
        center = 0.5 * (knuckle[0].real + knuckle[-1].real)
        fcenters.append(np.array([0.5 + center, 0.5]))
        fradii.append(float(np.abs(knuckle - center).mean()))
        nrows = len(rows)
        for i, row in enumerate(rows[1:], start=1):
            q = 1.0 - 0.9 * i / (nrows - 1)
            arm = knuckle - center
            if i == nrows - 1:
                arm = arm.real + 0j   # glued tip edge: on the axis
            pts = center + q * arm
            for j, dvid in enumerate(row):
                w = pts[j]
                uv[top[dvid]] = [0.5 + w.real, 0.5 + w.imag]
                if bottom[dvid] != top[dvid]:
                    uv[bottom[dvid]] = [0.5 + w.real, 0.5 - w.imag]

    layout = {"wrist_center": np.array([0.5, 0.5]), "wrist_radius": r0,
              "finger_centers": fcenters, "finger_radius": float(np.mean(fradii))}
    return uv, layout


# -- subjects and template ---------------------------------------------------


@dataclass
class SyntheticSubject:
    seed: int
    dims: HandDims
    mesh: TemplateMesh
    layout: dict
    albedo: np.ndarray       # (S, S, 3)
    marks_mask: np.ndarray   # (S, S) bool: nail/crease texels

    @property
    def hand_length(self):
        """Wrist to middle-finger tip (mm)."""
        tip = 1 + 2 * JOINTS_PER_FINGER + 3
        return float(np.linalg.norm(self.mesh.rest_joints[tip]))


def build_template(quality="desk"):
    """The shared rig template: the mean-dimension hand."""
    mesh, layout = build_hand_mesh(HandDims(), quality)
    return mesh, layout


def generate_subject(seed, quality="desk", albedo_res=128):
    dims = sample_dims(seed)
    mesh, layout = build_hand_mesh(dims, quality)
    albedo, marks = generate_albedo(seed, layout, albedo_res)
    return SyntheticSubject(seed=seed, dims=dims, mesh=mesh, layout=layout,
                            albedo=albedo, marks_mask=marks)


def generate_albedo(seed, layout, res):
    """Skin-tone base + per-subject noise + nail patches + palm creases.
    Returns (albedo (S, S, 3), mark mask)."""
    rng = np.random.default_rng(seed + 991)
    s = res
    base = np.array([0.78, 0.58, 0.47]) + rng.uniform(-0.06, 0.06, size=3)
    img = np.tile(base, (s, s, 1))
    noise = gaussian_filter(rng.normal(size=(s, s)), sigma=2.0, mode="wrap")
    img += 0.10 * noise[..., None] * np.array([1.0, 0.8, 0.7])

    yy, xx = np.mgrid[0:s, 0:s]
    u = (xx + 0.5) / s
    v = (yy + 0.5) / s
    marks = np.zeros((s, s), dtype=bool)

    # nails: light patch near each fingertip (the center of the finger chart)
    nr = 0.4 * layout["finger_radius"]
    for c in layout["finger_centers"]:
        r2 = (u - c[0]) ** 2 + (v - (c[1] + nr)) ** 2
        m = r2 < nr ** 2
        img[m] = np.array([0.93, 0.88, 0.80])
        marks |= m

    # palm creases: dark arcs around the wrist-chart center
    wc = layout["wrist_center"]
    du, dv_ = u - wc[0], v - wc[1]
    rad = np.sqrt(du ** 2 + dv_ ** 2)
    theta = np.arctan2(dv_, du)
    for arc_r, a0, a1 in ((0.18, -2.6, -0.6), (0.26, -2.9, -0.3),
                          (0.12, -2.2, -1.0)):
        m = (np.abs(rad - arc_r) < 0.008) & (theta > a0) & (theta < a1)
        img[m] *= 0.55
        marks |= m

    return np.clip(img, 0.02, 0.98), marks


# -- poses, lights, capture --------------------------------------------------


def _axis_rot(axis, angle):
    c, s_ = np.cos(angle), np.sin(angle)
    x, y, z = axis
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + s_ * k + (1 - c) * (k @ k)


def pose_from_angles(template, flex, abduct):
    """Per-joint flexion/abduction angles (rad) -> delta-6D Pose. Rotations
    compose as abduction-about-z after flexion-about-frame-x, which is
    exactly the family the masked 6D parameters can represent."""
    nj = template.num_joints
    theta = np.zeros((nj, 6))
    for j in range(nj):
        if not template.dof_mask[j].any():
            continue
        fx = flex[j] if template.dof_mask[j][0] else 0.0
        ab = abduct[j] if template.dof_mask[j][2] else 0.0
        r = _axis_rot(np.array([0.0, 0.0, 1.0]), ab) @ \
            _axis_rot(np.array([1.0, 0.0, 0.0]), fx)
        theta[j] = matrix_to_rot6d(r) - IDENT6
    return theta


def sample_pose_sequence(template, num_frames, seed, max_flex=0.9,
                         max_abduct=0.2, global_amp=0.25):
    """Smooth deterministic pose trajectory; frame 0 is the neutral pose."""
    rng = np.random.default_rng(seed)
    nj = template.num_joints
    amp_f = rng.uniform(0.3, 1.0, size=nj) * max_flex
    amp_a = rng.uniform(-1.0, 1.0, size=nj) * max_abduct
    ph = rng.uniform(0, 2 * np.pi, size=nj)
    freq = rng.uniform(0.5, 1.5, size=nj)
    g_amp = rng.uniform(-1.0, 1.0, size=3) * global_amp
    g_tr = rng.uniform(-1.0, 1.0, size=3) * 8.0
    poses = []
    for t in range(num_frames):
        tau = t / max(num_frames - 1, 1)
        ramp = _smoothstep(tau * 2.0)
        flex = amp_f * ramp * 0.5 * (1 + np.sin(2 * np.pi * freq * tau + ph))
        flex = np.clip(flex, 0.0, max_flex)
        abduct = amp_a * ramp * np.sin(2 * np.pi * freq * tau)
        theta = pose_from_angles(template, flex, abduct)
        ang = g_amp * np.sin(2 * np.pi * tau + 0.7)
        g = _axis_rot(np.array([0, 0, 1.0]), ang[2]) @ \
            _axis_rot(np.array([0, 1.0, 0]), ang[1]) @ \
            _axis_rot(np.array([1.0, 0, 0]), ang[0])
        grot = (matrix_to_rot6d(g) - IDENT6) * ramp
        gtr = g_tr * np.sin(np.pi * tau) * ramp
        if t == 0:
            theta[:] = 0.0
            grot[:] = 0.0
            gtr = np.zeros(3)
        poses.append(Pose(theta, grot, gtr))
    return poses


@dataclass
class LightRig:
    """Two directional Lambert lights + ambient; light 0 passes a soft
    planar occluder so frames carry a cast-shadow-like gradient."""

    dirs: np.ndarray = field(default_factory=lambda: np.array(
        [[0.3, -0.4, 0.85], [-0.5, 0.3, 0.8]]))
    intensities: np.ndarray = field(default_factory=lambda: np.array([0.55, 0.35]))
    ambient: float = 0.25
    occluder_normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    occluder_offset: float = 10.0
    occluder_softness: float = 25.0

    def __post_init__(self):
        self.dirs = np.asarray(self.dirs, dtype=np.float64)
        self.dirs /= np.linalg.norm(self.dirs, axis=1, keepdims=True)

    def shade(self, points, normals):
        """Multiplicative shadow value in (0, 1) at surface points."""
        occ = 1.0 / (1.0 + np.exp(
            (points @ self.occluder_normal - self.occluder_offset)
            / self.occluder_softness))
        lam0 = np.maximum(-(normals @ self.dirs[0]), 0.0)
        lam1 = np.maximum(-(normals @ self.dirs[1]), 0.0)
        val = self.ambient + self.intensities[0] * occ * lam0 \
            + self.intensities[1] * lam1
        return np.clip(val, 0.02, 0.98)


def default_cameras(image_size=64, dist=420.0):
    """Front camera + side camera, both aimed at the hand centroid."""
    target = [90.0, 0.0, 0.0]
    front = Camera.look_at([90.0, 0.0, -dist], target, [0, -1, 0],
                           fov_deg=32.0, width=image_size, height=image_size)
    side = Camera.look_at([90.0, -dist * 0.8, -dist * 0.6], target, [0, -1, 0],
                          fov_deg=32.0, width=image_size, height=image_size)
    return [front, side]


@dataclass
class SyntheticFrame:
    image: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    joints3d: np.ndarray
    joints2d: np.ndarray
    scan: np.ndarray
    camera: Camera
    shadow_image: np.ndarray   # (H, W) per-pixel GT shadow
    shadow_uv: np.ndarray      # (S, S) GT shadow in texture space
    pose: Pose
    posed_vertices: np.ndarray
    fragments: object


def _posed(subject, pose):
    m = subject.mesh
    v, tf = pose_mesh(m.rest_vertices, m.rest_joints, m.parent,
                      m.skin_weights, pose, m.joint_frame)
    return v.data, tf.joints.data


def render_frame(subject, pose, camera, lights, scan_points=800,
                 scan_seed=0, shadow_res=64, uv_cache=None):
    m = subject.mesh
    v, joints = _posed(subject, pose)
    frag = render.rasterize(v, m.faces, camera)
    vn = vertex_normals(v, m.faces)

    h, w = camera.height, camera.width
    uvpix, (rows, cols) = render.fragment_uvs(frag, m.faces, m.uv_coords)
    fidx = frag.face_index[rows, cols]
    bary = frag.bary[rows, cols]
    pts = (bary[:, :, None] * v[m.faces[fidx]]).sum(axis=1)
    nrm = (bary[:, :, None] * vn[m.faces[fidx]]).sum(axis=1)
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
    shade = lights.shade(pts, nrm)
    alb = render.sample_texture(subject.albedo, uvpix).data

    image = np.zeros((h, w, 3))
    image[rows, cols] = alb * shade[:, None]
    shadow_img = np.zeros((h, w))
    shadow_img[rows, cols] = shade
    mask = frag.mask.astype(np.float64)

    # GT shadow in UV space, from the posed surface
    if uv_cache is None:
        uv_cache = render.uv_rasterize(m.uv_coords, m.faces, shadow_res)
    tfi, tba = uv_cache
    ti, tj = np.nonzero(tfi >= 0)
    f2 = tfi[ti, tj]
    b2 = tba[ti, tj]
    p2 = (b2[:, :, None] * v[m.faces[f2]]).sum(axis=1)
    n2 = (b2[:, :, None] * vn[m.faces[f2]]).sum(axis=1)
    n2 /= np.maximum(np.linalg.norm(n2, axis=1, keepdims=True), 1e-12)
    shadow_uv = np.full((shadow_res, shadow_res), 0.5)
    shadow_uv[ti, tj] = lights.shade(p2, n2)

    scan = sample_surface_points(v, m.faces, scan_points, scan_seed)
    j2d, _ = render.project_points(joints, camera)
    return SyntheticFrame(
        image=image, depth=frag.depth, mask=mask, joints3d=joints,
        joints2d=j2d, scan=scan, camera=camera, shadow_image=shadow_img,
        shadow_uv=shadow_uv, pose=pose, posed_vertices=v, fragments=frag)


def sample_surface_points(vertices, faces, n, seed):
    """Area-weighted random points exactly on the mesh surface."""
    rng = np.random.default_rng(seed)
    _, areas = face_normals(vertices, faces)
    probs = areas / areas.sum()
    fidx = rng.choice(len(faces), size=n, p=probs)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    b = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    tri = np.asarray(vertices)[np.asarray(faces)[fidx]]
    return (b[:, :, None] * tri).sum(axis=1)


def gt_flow_between(frame_a, frame_b, faces):
    """Ground-truth optical flow from frame_a pixels to frame_b positions,
    via the shared surface correspondence; invalid where occluded."""
    frag = frame_a.fragments
    h, w = frag.depth.shape
    rows, cols = np.nonzero(frag.face_index >= 0)
    f = frag.face_index[rows, cols]
    b = frag.bary[rows, cols]
    pts_b = (b[:, :, None] * frame_b.posed_vertices[np.asarray(faces)[f]]).sum(axis=1)
    p2d, z = render.project_points(pts_b, frame_b.camera)
    px = np.clip(np.round(p2d[:, 0] - 0.5).astype(int), 0, w - 1)
    py = np.clip(np.round(p2d[:, 1] - 0.5).astype(int), 0, h - 1)
    buf = frame_b.depth[py, px]
    vis = (buf > 0) & (np.abs(buf - z) < 2.0) & (z > 0) \
        & (p2d[:, 0] >= 0) & (p2d[:, 0] <= w) & (p2d[:, 1] >= 0) & (p2d[:, 1] <= h)
    flow = np.zeros((h, w, 2))
    valid = np.zeros((h, w), dtype=bool)
    src = np.stack([cols + 0.5, rows + 0.5], axis=1)
    flow[rows, cols] = p2d - src
    valid[rows, cols] = vis
    return flow, valid


def generate_capture(subject, poses, cameras, lights, scan_points=800,
                     shadow_res=64, camera_index=0):
    """Render a frame sequence from one camera, plus GT flow between
    consecutive frames."""
    m = subject.mesh
    uv_cache = render.uv_rasterize(m.uv_coords, m.faces, shadow_res)
    frames = []
    for t, pose in enumerate(poses):
        frames.append(render_frame(
            subject, pose, cameras[camera_index], lights,
            scan_points=scan_points, scan_seed=subject.seed * 10007 + t,
            shadow_res=shadow_res, uv_cache=uv_cache))
    flows = []
    for t in range(len(frames) - 1):
        flows.append(gt_flow_between(frames[t], frames[t + 1], m.faces))
    return frames, flows


def neutral_encoder_inputs(subject, enc_res=64):
    """Two-view depth maps of the neutral (rest) mesh + rest joints, the
    fixed per-subject identity-encoder input."""
    cams = default_cameras(image_size=enc_res)
    m = subject.mesh
    d0 = render.render_depth(m.rest_vertices, m.faces, cams[0])
    d1 = render.render_depth(m.rest_vertices, m.faces, cams[1])
    return np.stack([d0, d1]), m.rest_joints.copy()


# -- dataset I/O -------------------------------------------------------------


def save_subject_dataset(root, subject, frames, flows, quality="desk"):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    m = subject.mesh
    save_obj(root / "gt_mesh.obj", m.rest_vertices, m.faces, m.uv_coords)
    imgio.save_png(root / "albedo.png", subject.albedo)
    imgio.save_png(root / "marks_mask.png", subject.marks_mask.astype(np.float64))
    depths, joints = neutral_encoder_inputs(subject)
    imgio.save_pfm(root / "neutral_depth_0.pfm", depths[0])
    imgio.save_pfm(root / "neutral_depth_1.pfm", depths[1])
    meta = {"seed": subject.seed, "dims": subject.dims.to_json(),
            "quality": quality, "hand_length": subject.hand_length,
            "num_frames": len(frames),
            "neutral_joints": joints.tolist()}
    with open(root / "meta.json", "w") as f:
        json.dump(meta, f, indent=1)
    for t, fr in enumerate(frames):
        d = root / f"frame_{t:04d}"
        d.mkdir(exist_ok=True)
        imgio.save_png(d / "image.png", fr.image)
        imgio.save_pfm(d / "depth.pfm", fr.depth)
        imgio.save_png(d / "mask.png", fr.mask)
        imgio.save_png(d / "shadow_gt.png", fr.shadow_uv)
        imgio.save_pfm(d / "shadow_image.pfm", fr.shadow_image)
        imgio.save_ply(d / "scan.ply", fr.scan)
        render.save_camera(d / "camera.json", fr.camera)
        with open(d / "joints.json", "w") as f:
            json.dump({"joints3d": fr.joints3d.tolist(),
                       "joints2d": fr.joints2d.tolist(),
                       "pose": fr.pose.to_json()}, f)
        if t < len(flows):
            flow, valid = flows[t]
            packed = np.concatenate([flow, valid[..., None]], axis=2)
            imgio.save_pfm(d / "flow_to_next.pfm", packed)


@dataclass
class LoadedFrame:
    image: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    joints3d: np.ndarray
    joints2d: np.ndarray
    scan: np.ndarray
    camera: Camera
    shadow_uv: np.ndarray
    shadow_image: np.ndarray
    pose: Pose
    flow_to_next: Optional[tuple]


def load_subject_dataset(root):
    root = Path(root)
    with open(root / "meta.json") as f:
        meta = json.load(f)
    frames = []
    for t in range(meta["num_frames"]):
        d = root / f"frame_{t:04d}"
        with open(d / "joints.json") as f:
            jd = json.load(f)
        flow = None
        fp = d / "flow_to_next.pfm"
        if fp.exists():
            packed = imgio.load_pfm(fp)
            flow = (packed[..., :2], packed[..., 2] > 0.5)
        scan, _ = imgio.load_ply(d / "scan.ply")
        frames.append(LoadedFrame(
            image=imgio.load_png(d / "image.png"),
            depth=imgio.load_pfm(d / "depth.pfm"),
            mask=imgio.load_png(d / "mask.png"),
            joints3d=np.array(jd["joints3d"]),
            joints2d=np.array(jd["joints2d"]),
            scan=scan,
            camera=render.load_camera(d / "camera.json"),
            shadow_uv=imgio.load_png(d / "shadow_gt.png"),
            shadow_image=imgio.load_pfm(d / "shadow_image.pfm"),
            pose=Pose.from_json(jd["pose"]),
            flow_to_next=flow))
    neutral_depths = np.stack([imgio.load_pfm(root / "neutral_depth_0.pfm"),
                               imgio.load_pfm(root / "neutral_depth_1.pfm")])
    meta["neutral_depths"] = neutral_depths
    meta["albedo"] = imgio.load_png(root / "albedo.png")
    meta["marks_mask"] = imgio.load_png(root / "marks_mask.png") > 0.5
    return meta, frames


# -- metrics -----------------------------------------------------------------


def point_triangle_distance(points, tri_verts, chunk=256):
    """Exact min distance (mm) from each point to a triangle soup.

    points: (M, 3); tri_verts: (Nf, 3, 3). Vectorized over faces in chunks.
    """
    p = np.asarray(points, dtype=np.float64)
    t = np.asarray(tri_verts, dtype=np.float64)
    best = np.full(len(p), np.inf)
    for s in range(0, len(t), chunk):
        tc = t[s:s + chunk]
        d = _pt_tri_block(p, tc)
        best = np.minimum(best, d.min(axis=1))
    return best


def _pt_tri_block(p, t):
    # Ericson's closest-point-on-triangle, broadcast (M, F)
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    ab = b - a
    ac = c - a
    pp = p[:, None, :]
    ap = pp - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = pp - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = pp - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-30, 1.0, denom)
    v = vb / denom
    w = vc / denom
    closest = a + v[..., None] * ab + w[..., None] * ac

    # vertex regions
    m = (d1 <= 0) & (d2 <= 0)
    closest = np.where(m[..., None], a + 0 * closest, closest)
    m = (d3 >= 0) & (d4 <= d3)
    closest = np.where(m[..., None], b + 0 * closest, closest)
    m = (d6 >= 0) & (d5 <= d6)
    closest = np.where(m[..., None], c + 0 * closest, closest)
    # edge AB
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    tpar = np.where(np.abs(d1 - d3) < 1e-30, 0.0, d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3))
    cand = a + np.clip(tpar, 0, 1)[..., None] * ab
    closest = np.where(m[..., None], cand, closest)
    # edge AC
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    tpar = np.where(np.abs(d2 - d6) < 1e-30, 0.0, d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6))
    cand = a + np.clip(tpar, 0, 1)[..., None] * ac
    closest = np.where(m[..., None], cand, closest)
    # edge BC
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    num = d4 - d3
    den = (d4 - d3) + (d5 - d6)
    tpar = num / np.where(den == 0, 1.0, den)
    cand = b + np.clip(tpar, 0, 1)[..., None] * (c - b)
    closest = np.where(m[..., None], cand, closest)

    return np.linalg.norm(pp - closest, axis=-1)


def p2s_error(points, vertices, faces):
    """Mean exact point-to-surface distance (mm)."""
    v = np.asarray(vertices, dtype=np.float64)
    tri = v[np.asarray(faces, dtype=np.int64)]
    return float(point_triangle_distance(points, tri).mean())


def psnr(img_a, img_b, cap=99.0):
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    mse = ((a - b) ** 2).mean()
    if mse <= 0:
        return cap
    return min(float(10.0 * np.log10(1.0 / mse)), cap)


def ssim(img_a, img_b):
    """Standard SSIM: 11x11 Gaussian window (sigma 1.5), c1=0.01^2,
    c2=0.03^2, averaged over channels and pixels."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = _gauss11(x)
        my = _gauss11(y)
        vx = _gauss11(x * x) - mx * mx
        vy = _gauss11(y * y) - my * my
        cxy = _gauss11(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / \
            ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def _gauss11(img):
    g = np.exp(-0.5 * (np.arange(11) - 5.0) ** 2 / 1.5 ** 2)
    g /= g.sum()
    out = np.apply_along_axis(lambda r: np.convolve(np.pad(r, 5, mode="reflect"),
                                                    g, mode="valid"), 0, img)
    out = np.apply_along_axis(lambda r: np.convolve(np.pad(r, 5, mode="reflect"),
                                                    g, mode="valid"), 1, out)
    return out
