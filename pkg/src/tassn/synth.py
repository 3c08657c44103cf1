"""Synthetic hand-motion clips with 2D supervision and guarded 3D ground truth."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import zoom

from . import hand
from .render import Camera, face_pixel_pairs, hard_silhouette, project_np


class SupervisionViolation(RuntimeError):
    """3D ground truth was read while a training stage was running."""


class _Guard:
    """Tracks whether training is running and whether evaluation access is open."""

    def __init__(self):
        self.training_depth = 0
        self.eval_depth = 0

    @contextlib.contextmanager
    def training(self):
        self.training_depth += 1
        try:
            yield
        finally:
            self.training_depth -= 1

    @contextlib.contextmanager
    def evaluation(self):
        self.eval_depth += 1
        try:
            yield
        finally:
            self.eval_depth -= 1


GUARD = _Guard()
training_guard = GUARD.training
evaluation_access = GUARD.evaluation


@dataclass(eq=False)
class Clip:
    """``n + 1`` frames with per-pair flow; images are stored as 8-bit RGB.

    Array layouts: frames ``(n+1, H, W, 3)`` uint8; flow_fwd[i] maps frame i to
    i+1 on frame i's pixel grid, flow_bwd[i] maps frame i+1 to i on frame i+1's
    grid, both ``(n, 2, H, W)`` as (dx, dy) pixels; keypoints2d ``(n+1, K, 2)``;
    silhouettes ``(n+1, H, W)``.
    """

    frames: np.ndarray
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    keypoints2d: np.ndarray
    silhouettes: np.ndarray
    camera: Camera
    _pose3d: np.ndarray = field(repr=False)
    _mesh3d: np.ndarray = field(repr=False)
    seed: int = 0
    split: str = "train"
    tampered: bool = False
    reads_3d: int = 0

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def n(self) -> int:
        return len(self.frames) - 1

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def images(self) -> np.ndarray:
        """Frames as float64 ``(n+1, 3, H, W)`` in [0, 1]."""
        return self.frames.transpose(0, 3, 1, 2).astype(np.float64) / 255.0

    def _check_access(self):
        if GUARD.training_depth > 0 and (GUARD.eval_depth == 0 or self.split != "val"):
            self.tampered = True
            raise SupervisionViolation(f"3D ground truth of clip seed={self.seed} read during training")
        self.reads_3d += 1

    def pose3d_gt(self) -> np.ndarray:
        self._check_access()
        return self._pose3d

    def mesh3d_gt(self) -> np.ndarray:
        self._check_access()
        return self._mesh3d


@dataclass
class Dataset:
    clips: list[Clip]
    train_idx: list[int]
    val_idx: list[int]
    seed: int

    @property
    def train(self) -> list[Clip]:
        return [self.clips[i] for i in self.train_idx]

    @property
    def val(self) -> list[Clip]:
        return [self.clips[i] for i in self.val_idx]


def default_camera(width: int, height: int) -> Camera:
    return Camera(fx=60.0 * width / 64, fy=60.0 * height / 64, cx=width / 2, cy=height / 2, z_root=400.0)


# ---------------------------------------------------------------------------
# motion and rendering


def sample_trajectory(rng: np.random.Generator, num_frames: int, motion: float = 0.12, keyframes: int = 3):
    """Smooth joint-angle trajectory ``(num_frames, NUM_ANGLES)`` within the limits."""
    lo, hi = hand.ANGLE_LIMITS[:, 0], hand.ANGLE_LIMITS[:, 1]
    span = hi - lo
    keys = [hand.sample_angles(rng, scale=0.8)]
    for _ in range(keyframes - 1):
        keys.append(np.clip(keys[-1] + rng.normal(0.0, 1.0, size=span.shape) * motion * span, lo, hi))
    keys = np.array(keys)
    t_keys = np.linspace(0.0, num_frames - 1, keyframes)
    spline = CubicSpline(t_keys, keys, axis=0, bc_type="natural")
    return np.clip(spline(np.arange(num_frames, dtype=np.float64)), lo, hi)


def background_texture(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.85, size=(6, 6, 3))
    tex = zoom(coarse, (height / 6, width / 6, 1), order=1, mode="nearest", grid_mode=True)
    return np.clip(tex[:height, :width], 0.0, 1.0)


_PART_COLORS = np.array(
    [
        [0.93, 0.74, 0.60],  # palm
        [0.95, 0.55, 0.45],  # thumb
        [0.90, 0.85, 0.45],  # index
        [0.55, 0.85, 0.55],  # middle
        [0.45, 0.70, 0.95],  # ring
        [0.80, 0.55, 0.90],  # pinky
    ]
)
_LIGHT = np.array([0.3, -0.5, -1.0]) / np.linalg.norm([0.3, -0.5, -1.0])


def visible_surface(cam: Camera, verts: np.ndarray, faces: np.ndarray, width: int, height: int):
    """Z-buffered visibility: per covered pixel its face and perspective-correct weights."""
    v2 = project_np(cam, verts)
    tri = v2[faces][None]
    bf, rows, cols = face_pixel_pairs(tri, width, height, 0.0)
    t = tri[0][bf]
    p = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    a, b, c = t[:, 0], t[:, 1], t[:, 2]

    def cross(u, w):
        return u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0]

    area = cross(b - a, c - a)
    ok = np.abs(area) > 1e-12
    safe = np.where(ok, area, 1.0)
    l0 = cross(b - p, c - p) / safe
    l1 = cross(c - p, a - p) / safe
    l2 = 1.0 - l0 - l1
    lam = np.stack([l0, l1, l2], axis=-1)
    inside = ok & np.all(lam >= 0, axis=-1)
    bf, rows, cols, lam = bf[inside], rows[inside], cols[inside], lam[inside]
    depth = verts[faces[bf], 2] + cam.z_root  # (T, 3)
    wz = lam / depth
    z = 1.0 / wz.sum(-1)
    pix = rows * width + cols
    order = np.lexsort((z, pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    sel = order[first]
    weights = wz[sel] * z[sel, None]
    return pix[sel], bf[sel], weights


def render_frame(cam, verts, template: hand.HandTemplate, background: np.ndarray):
    h, w = background.shape[:2]
    pix, fid, _ = visible_surface(cam, verts, template.faces, w, h)
    tri3 = verts[template.faces]
    n = np.cross(tri3[:, 1] - tri3[:, 0], tri3[:, 2] - tri3[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    shade = 0.35 + 0.65 * np.abs(n @ _LIGHT)
    color = _PART_COLORS[template.face_part] * shade[:, None]
    img = background.reshape(-1, 3).copy()
    img[pix] = color[fid]
    return img.reshape(h, w, 3)


def surface_flow(cam, verts_a, verts_b, faces, width, height) -> np.ndarray:
    """Motion ``(2, H, W)`` of the surface visible in frame a when vertices move a -> b."""
    pix, fid, weights = visible_surface(cam, verts_a, faces, width, height)
    # both ends re-projected the same way, so a static surface has exactly zero flow
    uv_a = project_np(cam, np.einsum("tk,tkd->td", weights, verts_a[faces[fid]]))
    uv_b = project_np(cam, np.einsum("tk,tkd->td", weights, verts_b[faces[fid]]))
    flow = np.zeros((2, height * width))
    flow[:, pix] = (uv_b - uv_a).T
    return flow.reshape(2, height, width)


def generate_clip(
    template: hand.HandTemplate,
    motion_seed: int,
    n: int = 7,
    width: int = 64,
    height: int = 64,
    motion: float = 0.12,
    camera: Camera | None = None,
    angles: np.ndarray | None = None,
) -> Clip:
    """Render an ``n + 1`` frame clip.  ``angles`` overrides the sampled trajectory."""
    if n < 2:
        raise ValueError("a clip needs n >= 2")
    cam = camera or default_camera(width, height)
    rng = np.random.default_rng(motion_seed)
    traj = sample_trajectory(rng, n + 1, motion) if angles is None else np.asarray(angles, dtype=np.float64)
    bg = background_texture(rng, width, height)
    meshes, joints = zip(*(hand.pose_hand(template, a) for a in traj))
    meshes, joints = np.array(meshes), np.array(joints)
    if np.any(meshes[..., 2] + cam.z_root <= 1.0):
        raise ValueError("degenerate camera: hand crosses the camera plane")
    uv = project_np(cam, meshes)
    bound = np.array([width, height])
    if np.any(np.abs(uv - bound / 2) > bound):
        raise ValueError("degenerate camera: projections leave the 2x image bound")
    frames = np.stack([render_frame(cam, m, template, bg) for m in meshes])
    frames = np.round(frames * 255.0).astype(np.uint8)
    fwd = np.stack([surface_flow(cam, meshes[i], meshes[i + 1], template.faces, width, height) for i in range(n)])
    bwd = np.stack([surface_flow(cam, meshes[i + 1], meshes[i], template.faces, width, height) for i in range(n)])
    sils = np.stack([hard_silhouette(cam, m, template.faces, width, height) for m in meshes])
    return Clip(
        frames=frames,
        flow_fwd=fwd,
        flow_bwd=bwd,
        keypoints2d=project_np(cam, joints),
        silhouettes=sils,
        camera=cam,
        _pose3d=joints,
        _mesh3d=meshes,
        seed=motion_seed,
    )


def generate_dataset(
    template: hand.HandTemplate,
    num_train: int = 200,
    num_val: int = 40,
    seed: int = 0,
    n: int = 7,
    width: int = 64,
    motion: float = 0.12,
) -> Dataset:
    seeds = np.random.SeedSequence(seed).generate_state(num_train + num_val, dtype=np.uint32)
    clips = []
    for i, s in enumerate(seeds):
        clip = generate_clip(template, int(s), n=n, width=width, height=width, motion=motion)
        clip.split = "train" if i < num_train else "val"
        clips.append(clip)
    return Dataset(clips, list(range(num_train)), list(range(num_train, num_train + num_val)), seed)


# ---------------------------------------------------------------------------
# heatmaps and preprocessing


def gt_heatmaps(keypoints2d: np.ndarray, width: int, height: int, sigma: float = 2.0) -> np.ndarray:
    """Gaussian maps ``(K, H, W)`` evaluated at pixel centers; peak 1 at the keypoint."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    kp = np.asarray(keypoints2d, dtype=np.float64).reshape(-1, 2)
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    gx = np.exp(-((xs[None, :] - kp[:, 0:1]) ** 2) / (2 * sigma**2))
    gy = np.exp(-((ys[None, :] - kp[:, 1:2]) ** 2) / (2 * sigma**2))
    return gy[:, :, None] * gx[:, None, :]


@dataclass(frozen=True)
class CropTransform:
    """Maps raw pixel coordinates ``p`` to crop coordinates ``(p - origin) * scale``."""

    origin: tuple[float, float]
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - np.asarray(self.origin)) * self.scale

    def camera(self, cam: Camera) -> Camera:
        ox, oy = self.origin
        return Camera(cam.fx * self.scale, cam.fy * self.scale, (cam.cx - ox) * self.scale, (cam.cy - oy) * self.scale, cam.z_root)


def hand_scale(keypoints2d: np.ndarray, wrist: int = 0) -> float:
    """Crop half-side: 1.2x the largest keypoint distance from the wrist."""
    kp = np.asarray(keypoints2d)
    return 1.2 * float(np.max(np.linalg.norm(kp - kp[wrist], axis=-1)))


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``(H, W, ...)`` at continuous coordinates (pixel centers at +0.5); zeros outside."""
    h, w = image.shape[:2]
    fx, fy = x - 0.5, y - 0.5
    x0, y0 = np.floor(fx).astype(np.int64), np.floor(fy).astype(np.int64)
    ax, ay = fx - x0, fy - y0
    out = 0.0
    for dy, wy in ((0, 1 - ay), (1, ay)):
        for dx, wx in ((0, 1 - ax), (1, ax)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            val = image[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            wgt = (wx * wy * ok).reshape(wx.shape + (1,) * (image.ndim - 2))
            out = out + wgt * val
    return out


def preprocess(
    frame: np.ndarray,
    hand_center_px,
    hand_scale_px: float,
    out_size: int,
    keypoints2d: np.ndarray | None = None,
    camera: Camera | None = None,
):
    """Square crop of side ``2 * hand_scale_px`` around ``hand_center_px``, bilinearly resized.

    ``frame`` is ``(H, W, C)``.  Returns ``(crop, keypoints, camera, transform)``
    with keypoints/camera mapped into crop coordinates (``None`` when not given).
    """
    h, w = frame.shape[:2]
    cx, cy = float(hand_center_px[0]), float(hand_center_px[1])
    half = float(hand_scale_px)
    if half <= 0:
        raise ValueError("hand scale must be positive")
    x0, y0 = cx - half, cy - half
    if x0 >= w or y0 >= h or x0 + 2 * half <= 0 or y0 + 2 * half <= 0:
        raise ValueError("crop box does not intersect the image")
    tf = CropTransform((x0, y0), out_size / (2 * half))
    grid = np.arange(out_size) + 0.5
    xs = grid[None, :] / tf.scale + x0
    ys = grid[:, None] / tf.scale + y0
    xs, ys = np.broadcast_to(xs, (out_size, out_size)), np.broadcast_to(ys, (out_size, out_size))
    crop = bilinear_sample(frame, xs, ys)
    kp = None if keypoints2d is None else tf.apply(keypoints2d)
    cam = None if camera is None else tf.camera(camera)
    return crop, kp, cam, tf
