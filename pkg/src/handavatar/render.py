"""Pinhole camera, z-buffered software rasterizer, differentiable soft
silhouette, textured rendering, and visibility-weighted UV unwrapping.

Conventions: camera looks down +z in its own frame; continuous image
coordinates put pixel (row i, col j)'s center at (x, y) = (j + 0.5, i + 0.5).
Gradients: rasterization is hard (no gradient); the soft mask carries
gradients to vertex positions via the signed distance to silhouette edges;
textured rendering carries gradients to the texture (fragments frozen) and
exposes differentiable per-vertex 2D positions for correspondence losses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tape
from .tape import Tensor, astensor, custom_op

_NEAR = 1e-6


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rot: np.ndarray      # (3, 3) world -> camera
    trans: np.ndarray    # (3,) mm
    width: int
    height: int

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(self.rot @ self.rot.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation must be orthonormal")

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rot.T @ self.trans

    def to_json(self):
        ext = np.eye(4)
        ext[:3, :3] = self.rot
        ext[:3, 3] = self.trans
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "extrinsic": ext.tolist()}

    @classmethod
    def from_json(cls, d):
        ext = np.array(d["extrinsic"], dtype=np.float64)
        return cls(d["fx"], d["fy"], d["cx"], d["cy"],
                   ext[:3, :3], ext[:3, 3], d["width"], d["height"])

    @classmethod
    def look_at(cls, eye, target, up, fov_deg, width, height):
        """Camera at ``eye`` looking at ``target``; vertical field of view."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        f = 0.5 * height / np.tan(np.radians(fov_deg) * 0.5)
        return cls(f, f, width * 0.5, height * 0.5, rot, -rot @ eye,
                   width, height)


def save_camera(path, camera):
    with open(path, "w") as f:
        json.dump(camera.to_json(), f)


def load_camera(path):
    with open(path) as f:
        return Camera.from_json(json.load(f))


@dataclass
class UvMap:
    """Square texture-space map with an optional per-texel weight channel."""

    values: np.ndarray             # (S, S) or (S, S, C)
    weight: Optional[np.ndarray] = None   # (S, S) >= 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=np.float64)
            if self.weight.min() < 0:
                raise ValueError("visibility weights must be non-negative")

    @property
    def resolution(self):
        return self.values.shape[0]

    @property
    def channels(self):
        return 1 if self.values.ndim == 2 else self.values.shape[2]


@dataclass
class Fragments:
    """Per-pixel rasterization output plus projected vertex data."""

    face_index: np.ndarray   # (H, W) int, -1 = empty
    bary: np.ndarray         # (H, W, 3) perspective-correct, sums to 1 on filled
    depth: np.ndarray        # (H, W) mm, 0 = empty
    vertex_2d: np.ndarray    # (Nv, 2) projected pixel positions
    vertex_depth: np.ndarray  # (Nv,) camera-space z

    @property
    def mask(self):
        return self.face_index >= 0


def project_points(vertices, camera):
    """Perspective projection. Returns (pixel_xy, cam_z); Tensors when the
    input is a Tensor so gradients flow to vertex positions."""
    if isinstance(vertices, Tensor):
        r = Tensor(camera.rot)
        cam = tape.matmul(vertices, tape.transpose(r)) + camera.trans
        z = cam[:, 2]
        x = cam[:, 0] / z * camera.fx + camera.cx
        y = cam[:, 1] / z * camera.fy + camera.cy
        return tape.stack([x, y], axis=1), z
    v = np.asarray(vertices, dtype=np.float64)
    cam = v @ camera.rot.T + camera.trans
    z = cam[:, 2]
    zz = np.where(z == 0, _NEAR, z)
    x = cam[:, 0] / zz * camera.fx + camera.cx
    y = cam[:, 1] / zz * camera.fy + camera.cy
    return np.stack([x, y], axis=1), z


def rasterize(vertices, faces, camera):
    """Z-buffered triangle rasterization with perspective-correct
    barycentrics. Faces with any vertex at or behind the near plane are
    skipped (no clipping); an all-behind mesh yields an empty buffer."""
    v = vertices.data if isinstance(vertices, Tensor) else np.asarray(vertices)
    faces = np.asarray(faces, dtype=np.int64)
    p2d, z = project_points(v, camera)
    h, w = camera.height, camera.width
    face_index = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    zbuf = np.full((h, w), np.inf)

    tz = z[faces]                       # (Nf, 3)
    ok = (tz > _NEAR).all(axis=1)
    tp = p2d[faces]                     # (Nf, 3, 2)
    for fi in np.flatnonzero(ok):
        a, b, c = tp[fi]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area == 0.0:
            continue
        x0 = max(int(np.floor(min(a[0], b[0], c[0]) - 0.5)), 0)
        x1 = min(int(np.ceil(max(a[0], b[0], c[0]) - 0.5)), w - 1)
        y0 = max(int(np.floor(min(a[1], b[1], c[1]) - 0.5)), 0)
        y1 = min(int(np.ceil(max(a[1], b[1], c[1]) - 0.5)), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        px, py = np.meshgrid(xs, ys)
        w0 = ((b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)) / area
        w1 = ((c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        za, zb, zc = tz[fi]
        inv = w0 / za + w1 / zb + w2 / zc
        depth = np.where(inside, 1.0 / np.where(inv == 0, 1.0, inv), np.inf)
        sub = zbuf[y0:y1 + 1, x0:x1 + 1]
        win = inside & (depth < sub)
        if not win.any():
            continue
        sub[win] = depth[win]
        face_index[y0:y1 + 1, x0:x1 + 1][win] = fi
        dsafe = np.where(inside, depth, 0.0)
        pb = np.stack([w0 / za, w1 / zb, w2 / zc], axis=-1) * dsafe[..., None]
        bary[y0:y1 + 1, x0:x1 + 1][win] = pb[win]

    depth_map = np.where(np.isfinite(zbuf), zbuf, 0.0)
    return Fragments(face_index=face_index, bary=bary, depth=depth_map,
                     vertex_2d=p2d, vertex_depth=z)


def render_depth(vertices, faces, camera):
    """(H, W) nearest-surface depth in mm, 0 where empty."""
    return rasterize(vertices, faces, camera).depth


def _silhouette_segments(p2d, faces, edge_faces):
    """Indices (E, 2) of projected edges on the silhouette: boundary edges
    plus edges whose two adjacent faces have opposite screen orientation."""
    tp = p2d[faces]
    area = ((tp[:, 1, 0] - tp[:, 0, 0]) * (tp[:, 2, 1] - tp[:, 0, 1])
            - (tp[:, 1, 1] - tp[:, 0, 1]) * (tp[:, 2, 0] - tp[:, 0, 0]))
    segs = []
    for (va, vb), fs in edge_faces.items():
        if len(fs) == 1 or area[fs[0]] * area[fs[1]] <= 0:
            segs.append((va, vb))
    return np.array(segs, dtype=np.int64).reshape(-1, 2)


def edge_face_map(faces):
    """Map sorted edge (a, b) -> list of adjacent face indices."""
    out = {}
    for fi, (a, b, c) in enumerate(np.asarray(faces, dtype=np.int64)):
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e)) if e[0] > e[1] else (e[0], e[1])
            key = (min(key), max(key))
            out.setdefault(key, []).append(fi)
    return out


def render_mask_soft(vertices, faces, camera, sigma=1.0, edge_faces=None):
    """Soft silhouette in [0, 1]: sigmoid(signed pixel distance to the
    projected silhouette boundary / sigma). Differentiable w.r.t. vertices."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    vt = astensor(vertices)
    faces = np.asarray(faces, dtype=np.int64)
    if edge_faces is None:
        edge_faces = edge_face_map(faces)
    frag = rasterize(vt.data, faces, camera)
    hard = frag.mask
    h, w = camera.height, camera.width

    p2d, _ = project_points(vt, camera)  # (Nv, 2) Tensor
    segs = _silhouette_segments(p2d.data, faces, edge_faces)
    if segs.shape[0] == 0:
        return Tensor(np.zeros((h, w)))

    xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    q = np.stack([xs.ravel(), ys.ravel()], axis=1)    # (P, 2)
    sign = np.where(hard.ravel(), 1.0, -1.0)

    def forward_parts(p):
        a = p[segs[:, 0]]
        b = p[segs[:, 1]]
        ab = b - a                                   # (E, 2)
        denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
        t = ((q[:, None, :] - a) * ab).sum(axis=2) / denom    # (P, E)
        t = np.clip(t, 0.0, 1.0)
        c = a + t[..., None] * ab                    # (P, E, 2)
        d2 = ((q[:, None, :] - c) ** 2).sum(axis=2)  # (P, E)
        best = np.argmin(d2, axis=1)                 # (P,)
        rows = np.arange(q.shape[0])
        dist = np.sqrt(d2[rows, best])
        return dist, best, t[rows, best]

    dist, best, tbest = forward_parts(p2d.data)
    out = 1.0 / (1.0 + np.exp(-np.clip(sign * dist / sigma, -60, 60)))

    def bw(g):
        # envelope theorem: move only the nearest segment, clipped t frozen
        a = p2d.data[segs[best, 0]]
        b = p2d.data[segs[best, 1]]
        c = a + tbest[:, None] * (b - a)
        diff = q - c
        safe = np.maximum(dist, 1e-9)
        n = diff / safe[:, None]
        coeff = g * out * (1.0 - out) * sign / sigma   # d out / d dist
        ga_all = -coeff[:, None] * n * (1.0 - tbest)[:, None]
        gb_all = -coeff[:, None] * n * tbest[:, None]
        gp = np.zeros_like(p2d.data)
        np.add.at(gp, segs[best, 0], ga_all)
        np.add.at(gp, segs[best, 1], gb_all)
        return (gp,)

    flat = custom_op(out, (p2d,), bw)
    return tape.reshape(flat, (h, w))


def sample_texture(texture, uv):
    """Bilinear texture lookup at UV points, differentiable w.r.t. texture.

    texture: (S, S[, C]) Tensor or array, row 0 = v 0; uv: (K, 2) in [0, 1].
    """
    tex = astensor(texture)
    uv = np.asarray(uv, dtype=np.float64)
    s = tex.shape[0]
    x = np.clip(uv[:, 0] * s - 0.5, 0.0, s - 1.0)
    y = np.clip(uv[:, 1] * s - 0.5, 0.0, s - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), s - 2) if s > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), s - 2) if s > 1 else np.zeros(len(y), np.int64)
    x1, y1 = x0 + (1 if s > 1 else 0), y0 + (1 if s > 1 else 0)
    fx, fy = x - x0, y - y0
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    td = tex.data
    extra = (1,) * (td.ndim - 2)
    ws = [w.reshape(w.shape + extra) for w in (w00, w01, w10, w11)]
    idx = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
    out = sum(w * td[iy, ix] for w, (iy, ix) in zip(ws, idx))

    def bw(g):
        gt = np.zeros_like(td)
        for w, (iy, ix) in zip(ws, idx):
            np.add.at(gt, (iy, ix), w * g)
        return (gt,)

    return custom_op(out, (tex,), bw)


def fragment_uvs(fragments, faces, uv_coords):
    """Interpolated UV coordinate per filled pixel. Returns (uv (K, 2),
    pixel index arrays (rows, cols))."""
    fi = fragments.face_index
    rows, cols = np.nonzero(fi >= 0)
    f = fi[rows, cols]
    b = fragments.bary[rows, cols]                  # (K, 3)
    uvf = np.asarray(uv_coords, dtype=np.float64)[np.asarray(faces)[f]]  # (K, 3, 2)
    uv = (b[:, :, None] * uvf).sum(axis=1)
    return uv, (rows, cols)


def render_textured(vertices, faces, uv_coords, camera, texture,
                    fragments=None):
    """RGB render using per-vertex UVs. Returns (image Tensor (H, W, 3),
    vertex_2d Tensor (Nv, 2), fragments). The image is differentiable in the
    texture only (fragments frozen); vertex_2d is differentiable in the
    vertices."""
    vt = astensor(vertices)
    if fragments is None:
        fragments = rasterize(vt.data, faces, camera)
    vertex_2d, _ = project_points(vt, camera)
    h, w = camera.height, camera.width
    uv, (rows, cols) = fragment_uvs(fragments, faces, uv_coords)
    img = tape.scatter_rows(
        sample_texture(texture, uv), rows * w + cols, h * w,
        channels=3)
    return tape.reshape(img, (h, w, 3)), vertex_2d, fragments


def render_shadowed(vertices, faces, uv_coords, camera, texture, shadow_uv,
                    fragments=None):
    """Render with a per-texel shadow map multiplied in: image = albedo x
    shadow per pixel. Differentiable in texture and shadow_uv."""
    vt = astensor(vertices)
    if fragments is None:
        fragments = rasterize(vt.data, faces, camera)
    h, w = camera.height, camera.width
    uv, (rows, cols) = fragment_uvs(fragments, faces, uv_coords)
    alb = sample_texture(texture, uv)
    sh = sample_texture(shadow_uv, uv)
    if sh.ndim == 1:
        sh = tape.reshape(sh, (sh.shape[0], 1))
    img = tape.scatter_rows(alb * sh, rows * w + cols, h * w, channels=3)
    return tape.reshape(img, (h, w, 3)), fragments


def uv_rasterize(uv_coords, faces, resolution):
    """Texel-space coverage: for each texel center, the face containing it in
    UV space and its barycentric coordinates. Cacheable per template."""
    uv = np.asarray(uv_coords, dtype=np.float64) * resolution
    faces = np.asarray(faces, dtype=np.int64)
    s = resolution
    fidx = np.full((s, s), -1, dtype=np.int64)
    bary = np.zeros((s, s, 3))
    tp = uv[faces]
    for fi in range(faces.shape[0]):
        a, b, c = tp[fi]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area == 0.0:
            continue
        x0 = max(int(np.floor(min(a[0], b[0], c[0]) - 0.5)), 0)
        x1 = min(int(np.ceil(max(a[0], b[0], c[0]) - 0.5)), s - 1)
        y0 = max(int(np.floor(min(a[1], b[1], c[1]) - 0.5)), 0)
        y1 = min(int(np.ceil(max(a[1], b[1], c[1]) - 0.5)), s - 1)
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        px, py = np.meshgrid(xs, ys)
        w0 = ((b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)) / area
        w1 = ((c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        sub = fidx[y0:y1 + 1, x0:x1 + 1]
        win = inside & (sub < 0)
        sub[win] = fi
        bary[y0:y1 + 1, x0:x1 + 1][win] = np.stack([w0, w1, w2], -1)[win]
    return fidx, bary


_DEPTH_TOL_MM = 2.0
_COS_CUTOFF = 0.2


def unwrap_to_uv(image, vertices, faces, uv_coords, camera, resolution,
                 uv_cache=None):
    """Back-project an image onto the texture. Each texel covered in UV space
    samples the image at its surface point's projection; weight =
    max(0, cos viewing angle) gated by a depth-buffer occlusion test."""
    from .geom import face_normals

    v = vertices.data if isinstance(vertices, Tensor) else np.asarray(vertices)
    img = np.asarray(image, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    s = resolution
    if uv_cache is None:
        uv_cache = uv_rasterize(uv_coords, faces, s)
    fidx, bary = uv_cache
    values = np.zeros((s, s, 3) if img.ndim == 3 else (s, s))
    weight = np.zeros((s, s))

    ti, tj = np.nonzero(fidx >= 0)
    if len(ti) == 0:
        return UvMap(values, weight)
    f = fidx[ti, tj]
    b = bary[ti, tj]
    pts = (b[:, :, None] * v[faces[f]]).sum(axis=1)     # (K, 3)
    fn, _ = face_normals(v, faces)
    normals = fn[f]

    p2d, z = project_points(pts, camera)
    frag_depth = render_depth(v, faces, camera)
    h, w = camera.height, camera.width

    view = camera.center - pts
    view = view / np.maximum(np.linalg.norm(view, axis=1, keepdims=True), 1e-12)
    cosv = (normals * view).sum(axis=1)

    px = np.clip(np.round(p2d[:, 0] - 0.5).astype(np.int64), 0, w - 1)
    py = np.clip(np.round(p2d[:, 1] - 0.5).astype(np.int64), 0, h - 1)
    in_img = ((p2d[:, 0] >= 0) & (p2d[:, 0] <= w)
              & (p2d[:, 1] >= 0) & (p2d[:, 1] <= h) & (z > _NEAR))
    buf = frag_depth[py, px]
    visible = in_img & (buf > 0) & (np.abs(buf - z) < _DEPTH_TOL_MM) \
        & (cosv > _COS_CUTOFF)

    if visible.any():
        samp = _bilinear_image(img, p2d[visible])
        values[ti[visible], tj[visible]] = samp
        weight[ti[visible], tj[visible]] = np.maximum(cosv[visible], 0.0)
    return UvMap(values, weight)


def _bilinear_image(img, xy):
    """Bilinear image sample at continuous pixel coords (x, y)."""
    h, w = img.shape[:2]
    x = np.clip(xy[:, 0] - 0.5, 0.0, w - 1.0)
    y = np.clip(xy[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2) if w > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else np.zeros(len(y), np.int64)
    x1, y1 = x0 + (1 if w > 1 else 0), y0 + (1 if h > 1 else 0)
    fx, fy = x - x0, y - y0
    if img.ndim == 3:
        fx, fy = fx[:, None], fy[:, None]
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


def merge_unwraps(maps):
    """Weight-normalized average of per-frame unwraps. Returns a UvMap whose
    weight is the summed visibility; zero-weight texels keep value 0."""
    if not maps:
        raise ValueError("no maps to merge")
    total_w = np.zeros_like(maps[0].weight)
    acc = np.zeros_like(maps[0].values)
    for m in maps:
        wexp = m.weight[..., None] if m.values.ndim == 3 else m.weight
        acc = acc + wexp * m.values
        total_w = total_w + m.weight
    wexp = total_w[..., None] if acc.ndim == 3 else total_w
    values = np.where(wexp > 0, acc / np.where(wexp == 0, 1.0, wexp), 0.0)
    return UvMap(values, total_w)
