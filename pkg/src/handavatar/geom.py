"""Mesh container, topology queries, differential operators, geodesics.

All geometry is in millimeters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra


@dataclass
class TemplateMesh:
    """Rest-pose hand geometry plus the rig assets that ride along with it.

    rest_vertices : (Nv, 3) mm
    faces         : (Nf, 3) int vertex indices
    uv_coords     : (Nv, 2) in [0, 1]
    skin_weights  : (Nv, J) rows sum to 1
    rest_joints   : (J, 3) mm
    parent        : (J,) int, -1 at the root (wrist)
    dof_mask      : (J, 3) bool, allowed local rotation axes (flex, twist, abduct)
    cut_ring      : ordered vertex indices of the forearm-cut boundary loop
    bone_axis     : (J, 3) unit parent->joint direction (zero row at the root)
    joint_frame   : (J, 3, 3) local anatomical frame, columns = rotation axes
    """

    rest_vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray
    skin_weights: np.ndarray
    rest_joints: np.ndarray
    parent: np.ndarray
    dof_mask: np.ndarray
    cut_ring: np.ndarray
    bone_axis: np.ndarray
    joint_frame: np.ndarray
    _adjacency: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.rest_vertices = np.asarray(self.rest_vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv_coords = np.asarray(self.uv_coords, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.rest_joints = np.asarray(self.rest_joints, dtype=np.float64)
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.dof_mask = np.asarray(self.dof_mask, dtype=bool)
        self.cut_ring = np.asarray(self.cut_ring, dtype=np.int64)
        self.bone_axis = np.asarray(self.bone_axis, dtype=np.float64)
        self.joint_frame = np.asarray(self.joint_frame, dtype=np.float64)
        self.validate()

    @property
    def num_vertices(self):
        return self.rest_vertices.shape[0]

    @property
    def num_joints(self):
        return self.rest_joints.shape[0]

    def validate(self):
        nv = self.num_vertices
        nj = self.num_joints
        if self.faces.min() < 0 or self.faces.max() >= nv:
            raise ValueError("faces index out of range")
        rows = self.skin_weights.sum(axis=1)
        if np.abs(rows - 1.0).max() > 1e-6:
            raise ValueError("skin weight rows must sum to 1")
        if self.skin_weights.min() < -1e-12:
            raise ValueError("skin weights must be non-negative")
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1:
            raise ValueError("joint tree must have exactly one root")
        # acyclicity: walking up from every joint must terminate
        for j in range(nj):
            seen = set()
            k = j
            while k >= 0:
                if k in seen:
                    raise ValueError("parent array contains a cycle")
                seen.add(k)
                k = int(self.parent[k])

    def adjacency(self):
        """Per-vertex sorted neighbor lists (cached)."""
        if self._adjacency is None:
            nv = self.num_vertices
            nbrs = [set() for _ in range(nv)]
            for a, b, c in self.faces:
                nbrs[a].update((b, c))
                nbrs[b].update((a, c))
                nbrs[c].update((a, b))
            self._adjacency = [np.array(sorted(s), dtype=np.int64) for s in nbrs]
        return self._adjacency

    def edges(self):
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


def face_normals(vertices, faces, min_area=1e-12):
    """Per-face unit normals and areas; raises on degenerate faces."""
    v = np.asarray(vertices, dtype=np.float64)
    tri = v[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area2 = np.linalg.norm(n, axis=1)
    bad = np.flatnonzero(area2 * 0.5 <= min_area)
    if len(bad):
        raise ValueError(f"degenerate face {int(bad[0])} (area <= {min_area} mm^2)")
    return n / area2[:, None], area2 * 0.5


def vertex_normals(vertices, faces):
    """Area-weighted average of incident face normals, unit length."""
    v = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    tri = v[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])  # length = 2*area
    out = np.zeros_like(v)
    # area weighting falls out of the unnormalized cross product
    np.add.at(out, faces[:, 0], fn)
    np.add.at(out, faces[:, 1], fn)
    np.add.at(out, faces[:, 2], fn)
    area2 = np.linalg.norm(fn, axis=1)
    if (area2 * 0.5 <= 1e-12).any():
        bad = int(np.flatnonzero(area2 * 0.5 <= 1e-12)[0])
        raise ValueError(f"degenerate face {bad} (area <= 1e-12 mm^2)")
    norms = np.linalg.norm(out, axis=1)
    if (norms == 0).any():
        raise ValueError("vertex with cancelling normals")
    return out / norms[:, None]


def laplacian_delta(vertices, mesh_or_adjacency):
    """Uniform graph Laplacian coordinates: v_i - mean(neighbors of v_i)."""
    v = np.asarray(vertices, dtype=np.float64)
    adj = mesh_or_adjacency.adjacency() if isinstance(mesh_or_adjacency, TemplateMesh) \
        else mesh_or_adjacency
    rows, cols, deg = _adjacency_arrays(adj)
    out = v.copy()
    acc = np.zeros_like(v)
    np.add.at(acc, rows, v[cols])
    out -= acc / deg[:, None]
    return out


def _adjacency_arrays(adj):
    deg = np.array([len(a) for a in adj], dtype=np.float64)
    if (deg == 0).any():
        raise ValueError(f"isolated vertex {int(np.flatnonzero(deg == 0)[0])}")
    rows = np.repeat(np.arange(len(adj)), deg.astype(int))
    cols = np.concatenate(adj)
    return rows, cols, deg


def laplacian_rows(mesh):
    """(rows, cols, deg) arrays for building the Laplacian on the tape."""
    return _adjacency_arrays(mesh.adjacency())


def geodesic_distance(mesh, sources):
    """Edge-graph Dijkstra distance (mm) from a source vertex set.

    Disconnected vertices come back as +inf.
    """
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    e = mesh.edges()
    w = np.linalg.norm(mesh.rest_vertices[e[:, 0]] - mesh.rest_vertices[e[:, 1]], axis=1)
    nv = mesh.num_vertices
    g = coo_matrix(
        (np.concatenate([w, w]),
         (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
        shape=(nv, nv))
    d = dijkstra(g.tocsr(), directed=False, indices=sources)
    return d.min(axis=0) if d.ndim == 2 else d


# -- mesh I/O --------------------------------------------------------------


def save_obj(path, vertices, faces, uv_coords=None):
    with open(path, "w") as f:
        for v in np.asarray(vertices, dtype=np.float64):
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if uv_coords is not None:
            for t in np.asarray(uv_coords, dtype=np.float64):
                f.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
        for tri in np.asarray(faces, dtype=np.int64):
            a, b, c = tri + 1
            if uv_coords is not None:
                f.write(f"f {a}/{a} {b}/{b} {c}/{c}\n")
            else:
                f.write(f"f {a} {b} {c}\n")


def load_obj(path):
    verts, uvs, faces = [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    v = np.array(verts, dtype=np.float64)
    u = np.array(uvs, dtype=np.float64) if uvs else None
    return v, np.array(faces, dtype=np.int64), u


def save_template(obj_path, sidecar_path, mesh):
    """OBJ for the surface, JSON sidecar for the rig assets."""
    save_obj(obj_path, mesh.rest_vertices, mesh.faces, mesh.uv_coords)
    sidecar = {
        "rest_joints": mesh.rest_joints.tolist(),
        "parent": mesh.parent.tolist(),
        "skin_weights": mesh.skin_weights.tolist(),
        "dof_mask": mesh.dof_mask.astype(int).tolist(),
        "cut_ring": mesh.cut_ring.tolist(),
        "bone_axis": mesh.bone_axis.tolist(),
        "joint_frame": mesh.joint_frame.tolist(),
    }
    with open(sidecar_path, "w") as f:
        json.dump(sidecar, f)


def load_template(obj_path, sidecar_path):
    v, faces, uv = load_obj(obj_path)
    with open(sidecar_path) as f:
        s = json.load(f)
    return TemplateMesh(
        rest_vertices=v,
        faces=faces,
        uv_coords=uv,
        skin_weights=np.array(s["skin_weights"]),
        rest_joints=np.array(s["rest_joints"]),
        parent=np.array(s["parent"]),
        dof_mask=np.array(s["dof_mask"], dtype=bool),
        cut_ring=np.array(s["cut_ring"]),
        bone_axis=np.array(s["bone_axis"]),
        joint_frame=np.array(s["joint_frame"]),
    )
