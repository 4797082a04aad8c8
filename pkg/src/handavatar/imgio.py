"""Image and point-cloud file I/O.

Color images and masks travel as float64 arrays in [0, 1] and are stored as
8-bit PNG; depth and other unbounded scalar maps are stored as 32-bit PFM.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image


def save_png(path, img):
    """img: (H, W) or (H, W, 3) float in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    a = np.clip(a, 0.0, 1.0)
    b = np.round(a * 255.0).astype(np.uint8)
    Image.fromarray(b).save(path)


def load_png(path):
    """Returns float64 in [0, 1], shape (H, W) or (H, W, 3)."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_pfm(path, data):
    """Grayscale (H, W) or color (H, W, 3) float32 PFM, little-endian."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 2:
        header = b"Pf\n"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError("PFM data must be (H, W) or (H, W, 3)")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.ascontiguousarray(a[::-1], dtype="<f4").tobytes())


def load_pfm(path):
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(w * h * ch * 4), dtype=dtype)
    a = data.reshape((h, w, 3) if ch == 3 else (h, w))
    return a[::-1].astype(np.float64)


def save_ply(path, points, colors=None):
    """ASCII PLY point cloud; colors (optional) float in [0, 1]."""
    p = np.asarray(points, dtype=np.float64)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {p.shape[0]}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if colors is not None:
            f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        if colors is None:
            for x, y, z in p:
                f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
        else:
            c = np.round(np.clip(colors, 0, 1) * 255).astype(int)
            for (x, y, z), (r, g, b) in zip(p, c):
                f.write(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}\n")


def load_ply(path):
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n = 0
        has_color = False
        while True:
            line = f.readline().strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property uchar red"):
                has_color = True
            elif line == "end_header":
                break
        pts = np.zeros((n, 3))
        cols = np.zeros((n, 3)) if has_color else None
        for i in range(n):
            parts = f.readline().split()
            pts[i] = [float(x) for x in parts[:3]]
            if has_color:
                cols[i] = [int(x) / 255.0 for x in parts[3:6]]
    return pts, cols
