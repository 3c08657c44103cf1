"""Pinhole projection and soft silhouette rasterization.

Pixel ``(row i, col j)`` covers ``[j, j+1] x [i, i+1]`` in image coordinates;
its center is ``(j + 0.5, i + 0.5)``.  Coverage of a pixel is
``1 - prod_f (1 - sigmoid(d_f / tau))`` with ``d_f`` the signed distance from the
pixel center to projected triangle ``f`` (positive inside).  Writing
``1 - sigmoid(z) = exp(-softplus(z))`` turns the product into a sum, which is
what the implementation accumulates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    z_root: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")

    def as_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "z_root": self.z_root}


def project(cam: Camera, points) -> ad.Tensor:
    """Project ``(..., M, 3)`` wrist-relative millimetres to ``(..., M, 2)`` pixels."""
    points = ad.as_tensor(points)
    if points.shape[-1] != 3:
        raise ad.ShapeError(f"project expects (..., M, 3) points, got {points.shape}")
    depth_np = points.data[..., 2] + cam.z_root
    if np.any(depth_np <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    ax = points.ndim - 1
    x = ad.slice_axis(points, ax, 0, 1)
    y = ad.slice_axis(points, ax, 1, 2)
    z = ad.slice_axis(points, ax, 2, 3) + cam.z_root
    u = ad.div(x, z) * cam.fx + cam.cx
    v = ad.div(y, z) * cam.fy + cam.cy
    return ad.concat([u, v], axis=ax)


def project_np(cam: Camera, points: np.ndarray) -> np.ndarray:
    depth = points[..., 2] + cam.z_root
    if np.any(depth <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    return np.stack([cam.fx * points[..., 0] / depth + cam.cx, cam.fy * points[..., 1] / depth + cam.cy], axis=-1)


# ---------------------------------------------------------------------------
# pixel / face pair enumeration


def face_pixel_pairs(tri: np.ndarray, width: int, height: int, margin: float):
    """Enumerate (face, pixel) pairs whose pixel center lies in the face bbox grown by ``margin``.

    ``tri`` is ``(B, F, 3, 2)``.  Returns flat face ids (in ``B*F``), rows, cols.
    """
    lo = tri.min(axis=2) - margin
    hi = tri.max(axis=2) + margin
    x0 = np.clip(np.ceil(lo[..., 0] - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(hi[..., 0] - 0.5), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(lo[..., 1] - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(hi[..., 1] - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0).reshape(-1)
    ny = np.maximum(y1 - y0 + 1, 0).reshape(-1)
    counts = nx * ny
    total = int(counts.sum())
    bf = np.repeat(np.arange(counts.size), counts)
    start = np.cumsum(counts) - counts
    k = np.arange(total) - np.repeat(start, counts)
    nxr = nx[bf]
    rows = y0.reshape(-1)[bf] + k // np.maximum(nxr, 1)
    cols = x0.reshape(-1)[bf] + k % np.maximum(nxr, 1)
    return bf, rows, cols


def _edge_geometry(p, tri_pairs):
    """Signed distance of points ``p (T,2)`` to triangles ``(T,3,2)`` plus backward terms."""
    px, py = p[:, 0], p[:, 1]
    tx, ty = tri_pairs[:, :, 0], tri_pairs[:, :, 1]
    best_d2 = None
    crosses = []
    for e in range(3):
        ex = tx[:, (e + 1) % 3] - tx[:, e]
        ey = ty[:, (e + 1) % 3] - ty[:, e]
        rx = px - tx[:, e]
        ry = py - ty[:, e]
        t = np.clip((rx * ex + ry * ey) / np.maximum(ex * ex + ey * ey, 1e-300), 0.0, 1.0)
        rx = rx - t * ex
        ry = ry - t * ey
        d2 = rx * rx + ry * ry
        crosses.append(ex * (py - ty[:, e]) - ey * (px - tx[:, e]))
        if best_d2 is None:
            best_d2, best_e, best_t, best_rx, best_ry = d2, np.zeros(len(px), np.int64), t, rx, ry
        else:
            take = d2 < best_d2
            best_d2 = np.where(take, d2, best_d2)
            best_e = np.where(take, e, best_e)
            best_t = np.where(take, t, best_t)
            best_rx = np.where(take, rx, best_rx)
            best_ry = np.where(take, ry, best_ry)
    area2 = (tx[:, 1] - tx[:, 0]) * (ty[:, 2] - ty[:, 0]) - (ty[:, 1] - ty[:, 0]) * (tx[:, 2] - tx[:, 0])
    pos = area2 > 0
    c0, c1, c2 = crosses
    inside = np.where(pos, (c0 >= 0) & (c1 >= 0) & (c2 >= 0), (c0 <= 0) & (c1 <= 0) & (c2 <= 0))
    dist = np.sqrt(best_d2)
    sign = np.where(inside, 1.0, -1.0)
    return sign * dist, sign, dist, best_e, best_t, np.stack([best_rx, best_ry], axis=-1)


def rasterize_silhouette(
    cam: Camera,
    mesh,
    faces: np.ndarray,
    width: int,
    height: int,
    tau: float = 1.0,
    margin: float | None = None,
) -> ad.Tensor:
    """Soft silhouette ``(..., H, W)`` of mesh vertices ``(..., C, 3)`` in millimetres."""
    return soft_silhouette_2d(project(cam, mesh), faces, width, height, tau, margin)


def soft_silhouette_2d(verts2d, faces, width, height, tau=1.0, margin=None) -> ad.Tensor:
    """Soft silhouette of already-projected vertices ``(..., C, 2)``.

    Faces farther than ``margin`` pixels (default ``7 * tau``, where
    ``sigmoid(-7) < 1e-3``) from a pixel center are culled for that pixel.
    Faces with zero projected area contribute nothing.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    verts2d = ad.as_tensor(verts2d)
    margin = 7.0 * tau if margin is None else float(margin)
    lead = verts2d.shape[:-2]
    c = verts2d.shape[-2]
    v = verts2d.data.reshape(-1, c, 2)
    nb = v.shape[0]
    faces = np.asarray(faces, dtype=np.int64)
    nf = len(faces)
    tri = v[:, faces]  # (B, F, 3, 2)
    a, b, cc = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    area2 = (b[..., 0] - a[..., 0]) * (cc[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (cc[..., 0] - a[..., 0])
    tri_cull = np.where((np.abs(area2) > 1e-9)[..., None, None], tri, np.inf)
    bf, rows, cols = face_pixel_pairs(tri_cull, width, height, margin)
    tri_flat = tri.reshape(nb * nf, 3, 2)
    p = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    d, sign, dist, best_e, best_t, best_r = _edge_geometry(p, tri_flat[bf])
    z = d / tau
    softplus = np.logaddexp(0.0, z)
    bidx = bf // nf
    pix = (bidx * height + rows) * width + cols
    q = np.bincount(pix, weights=softplus, minlength=nb * height * width)
    keep = np.exp(-q)
    out = (1.0 - keep).reshape(*lead, height, width)

    def backward(g):
        gq = g.reshape(-1) * keep
        gd = gq[pix] * ad._stable_sigmoid(z) / tau
        gdist = gd * sign
        safe = dist > 1e-12
        unit = np.where(safe[:, None], best_r / np.where(safe, dist, 1.0)[:, None], 0.0)
        fidx = bf % nf
        corner0 = best_e
        corner1 = (best_e + 1) % 3
        v0 = faces[fidx, corner0] + bidx * c
        v1 = faces[fidx, corner1] + bidx * c
        w0 = -(gdist * (1.0 - best_t))[:, None] * unit
        w1 = -(gdist * best_t)[:, None] * unit
        gv = np.zeros((nb * c, 2))
        for k in range(2):
            gv[:, k] = np.bincount(v0, weights=w0[:, k], minlength=nb * c) + np.bincount(
                v1, weights=w1[:, k], minlength=nb * c
            )
        return (gv.reshape(verts2d.shape),)

    return ad.primitive("soft_silhouette", (verts2d,), out, backward)


def hard_silhouette(cam: Camera, mesh: np.ndarray, faces: np.ndarray, width: int, height: int) -> np.ndarray:
    """Binary coverage: 1 where a pixel center falls inside some projected triangle."""
    v = project_np(cam, mesh)[None]
    tri = v[:, np.asarray(faces)]
    bf, rows, cols = face_pixel_pairs(tri, width, height, 0.0)
    p = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    d = _edge_geometry(p, tri.reshape(-1, 3, 2)[bf])[0]
    mask = np.zeros((height, width))
    hit = d >= 0
    mask[rows[hit], cols[hit]] = 1.0
    return mask


# ---------------------------------------------------------------------------
# image dumps


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5) of a map with values in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header, body = _split_pnm(raw, 3)
    if header[0] != b"P5":
        raise ValueError(f"{path}: not a P5 PGM")
    w, h = int(header[1]), int(header[2])
    return np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w)


def _split_pnm(raw: bytes, fields: int):
    tokens = []
    pos = 0
    while len(tokens) < fields + 1:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    return tokens, raw[pos + 1 :]
