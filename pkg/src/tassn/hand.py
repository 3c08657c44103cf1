"""Procedural low-poly hand: rest mesh, 21-joint skeleton, skinning, kinematics.

Coordinates are millimetres with the wrist joint at the origin.  In the rest
pose the palm lies in the x-y plane facing the camera (-z), fingers point
along +y.  Joint order: wrist, then thumb (CMC, MCP, IP, tip), index, middle,
ring, pinky (MCP, PIP, DIP, tip each).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NUM_JOINTS = 21
FINGERS = ("thumb", "index", "middle", "ring", "pinky")

# joint-angle layout: 3 global wrist angles, then 4 angles per finger
# (flex0, abduct0, flex1, flex2), i.e. MCP/CMC flexion+abduction, PIP/MCP, DIP/IP
NUM_ANGLES = 3 + 4 * len(FINGERS)

_DEG = np.pi / 180.0
ANGLE_LIMITS = np.array(
    [[-25, 25], [-25, 25], [-30, 30]]
    + [[0, 40], [-20, 20], [0, 50], [0, 70]]
    + [[-10, 80], [-15, 15], [0, 100], [0, 70]] * 4
) * _DEG

_FINGER_BASES = {
    "thumb": (np.array([-22.0, 18.0, 0.0]), np.array([-0.62, 0.78, 0.0]), (32.0, 30.0, 26.0), (10.0, 9.0, 8.0)),
    "index": (np.array([-27.0, 88.0, 0.0]), np.array([0.0, 1.0, 0.0]), (40.0, 24.0, 20.0), (8.5, 7.5, 6.5)),
    "middle": (np.array([-9.0, 92.0, 0.0]), np.array([0.0, 1.0, 0.0]), (45.0, 28.0, 22.0), (8.5, 7.5, 6.5)),
    "ring": (np.array([9.0, 88.0, 0.0]), np.array([0.0, 1.0, 0.0]), (42.0, 26.0, 21.0), (8.0, 7.0, 6.0)),
    "pinky": (np.array([26.0, 80.0, 0.0]), np.array([0.05, 1.0, 0.0]), (32.0, 20.0, 18.0), (7.0, 6.0, 5.5)),
}


def rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def euler_xyz(a: float, b: float, c: float) -> np.ndarray:
    return rotation([0, 0, 1], c) @ rotation([0, 1, 0], b) @ rotation([1, 0, 0], a)


@dataclass(frozen=True, eq=False)
class HandTemplate:
    rest_vertices: np.ndarray  # (C, 3)
    faces: np.ndarray  # (F, 3)
    rest_joints: np.ndarray  # (K, 3)
    parents: np.ndarray  # (K,), -1 for the wrist
    bone_lengths: np.ndarray  # (K,), 0 for the wrist
    skin_weights: np.ndarray  # (C, K)
    flex_axes: np.ndarray  # (K, 3) rest-frame flexion axis per joint
    vertex_part: np.ndarray  # (C,) 0 palm, 1..5 finger index
    face_part: np.ndarray  # (F,)

    @property
    def num_vertices(self) -> int:
        return len(self.rest_vertices)

    @property
    def num_joints(self) -> int:
        return len(self.rest_joints)


def _ring(center, axis, radius, count, phase=0.0, radius2=None):
    axis = axis / np.linalg.norm(axis)
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)
    r2 = radius if radius2 is None else radius2
    ang = phase + 2 * np.pi * np.arange(count) / count
    return center + radius * np.cos(ang)[:, None] * u + r2 * np.sin(ang)[:, None] * w


def _tube_faces(ring_starts, count):
    out = []
    for a, b in zip(ring_starts[:-1], ring_starts[1:]):
        for i in range(count):
            j = (i + 1) % count
            out.append((a + i, a + j, b + j))
            out.append((a + i, b + j, b + i))
    return out


def _fan(center, ring_start, count, flip=False):
    out = []
    for i in range(count):
        j = (i + 1) % count
        out.append((center, ring_start + j, ring_start + i) if flip else (center, ring_start + i, ring_start + j))
    return out


def build_template(palm_ring: int = 10, finger_ring: int = 6) -> HandTemplate:
    """Palm tube plus five tapered finger tubes, stitched into one connected surface."""
    verts: list[np.ndarray] = []
    faces: list[tuple[int, int, int]] = []
    weights: list[dict[int, float]] = []
    part: list[int] = []

    def add(points, w, p):
        start = sum(len(v) for v in verts)
        verts.append(np.atleast_2d(points))
        for _ in range(len(np.atleast_2d(points))):
            weights.append(dict(w))
            part.append(p)
        return start

    # palm: elliptical tube along y, half-width 38 mm, half-thickness 12 mm
    palm_rows = [0.0, 28.0, 56.0, 84.0]
    ring_starts = []
    for y in palm_rows:
        ring = _ring(np.array([0.0, y, 0.0]), np.array([0.0, 1.0, 0.0]), 38.0, palm_ring, radius2=12.0)
        ring_starts.append(add(ring, {0: 1.0}, 0))
    faces += _tube_faces(ring_starts, palm_ring)
    bottom = add(np.array([0.0, -3.0, 0.0]), {0: 1.0}, 0)
    top = add(np.array([0.0, 87.0, 0.0]), {0: 1.0}, 0)
    faces += _fan(bottom, ring_starts[0], palm_ring, flip=True)
    faces += _fan(top, ring_starts[-1], palm_ring)

    joints = [np.zeros(3)]
    parents = [-1]
    flex_axes = [np.zeros(3)]
    z_hat = np.array([0.0, 0.0, 1.0])
    for fi, name in enumerate(FINGERS):
        base, direction, lengths, radii = _FINGER_BASES[name]
        direction = direction / np.linalg.norm(direction)
        axis = np.cross(z_hat, direction)
        j_ids = []
        pos = base.copy()
        for seg in range(4):
            joints.append(pos.copy())
            parents.append(0 if seg == 0 else len(joints) - 2)
            flex_axes.append(axis)
            j_ids.append(len(joints) - 1)
            if seg < 3:
                pos = pos + lengths[seg] * direction
        # rows: base joint, mid-proximal, middle joint, distal joint, near tip
        j0, j1, j2, j3 = (joints[j] for j in j_ids)
        rows = [
            (j0, radii[0], {0: 0.5, j_ids[0]: 0.5}),
            (0.5 * (j0 + j1), radii[0], {j_ids[0]: 1.0}),
            (j1, radii[1], {j_ids[0]: 0.5, j_ids[1]: 0.5}),
            (j2, radii[2], {j_ids[1]: 0.5, j_ids[2]: 0.5}),
            (j3 - 3.0 * direction, radii[2] * 0.85, {j_ids[2]: 1.0}),
        ]
        finger_starts = [
            add(_ring(c, direction, r, finger_ring, phase=np.pi / finger_ring), w, fi + 1) for c, r, w in rows
        ]
        faces += _tube_faces(finger_starts, finger_ring)
        tip = add(j3 + 1.0 * direction, {j_ids[2]: 1.0}, fi + 1)
        faces += _fan(tip, finger_starts[-1], finger_ring)
        anchor = bottom if name == "thumb" else top
        faces += _fan(anchor, finger_starts[0], finger_ring, flip=True)

    rest = np.concatenate(verts, axis=0)
    k = len(joints)
    skin = np.zeros((len(rest), k))
    for i, w in enumerate(weights):
        for j, val in w.items():
            skin[i, j] = val
    faces_arr = np.array(faces, dtype=np.int64)
    parts = np.array(part)
    jarr = np.array(joints)
    parr = np.array(parents)
    bones = np.array([0.0] + [np.linalg.norm(jarr[i] - jarr[parr[i]]) for i in range(1, k)])
    face_part = parts[faces_arr].max(axis=1)
    return HandTemplate(rest, faces_arr, jarr, parr, bones, skin, np.array(flex_axes), parts, face_part)


def _finger_joint_ids(fi: int) -> list[int]:
    return [1 + 4 * fi + s for s in range(4)]


def local_rotations(template: HandTemplate, angles: np.ndarray) -> np.ndarray:
    """Per-joint rotation about its rest position (``(K, 3, 3)``)."""
    angles = np.asarray(angles, dtype=np.float64)
    rots = np.tile(np.eye(3), (template.num_joints, 1, 1))
    rots[0] = euler_xyz(*angles[:3])
    normal = np.array([0.0, 0.0, 1.0])
    for fi in range(len(FINGERS)):
        flex0, abd, flex1, flex2 = angles[3 + 4 * fi : 7 + 4 * fi]
        j0, j1, j2, _ = _finger_joint_ids(fi)
        rots[j0] = rotation(normal, abd) @ rotation(template.flex_axes[j0], flex0)
        rots[j1] = rotation(template.flex_axes[j1], flex1)
        rots[j2] = rotation(template.flex_axes[j2], flex2)
    return rots


def forward_kinematics(template: HandTemplate, angles: np.ndarray):
    """Return posed joints ``(K, 3)`` and global joint transforms ``(K, 3, 4)``."""
    rots = local_rotations(template, angles)
    k = template.num_joints
    g_rot = np.zeros((k, 3, 3))
    g_t = np.zeros((k, 3))
    posed = np.zeros((k, 3))
    rest = template.rest_joints
    for j in range(k):
        # local transform: rotate about the rest joint position
        l_rot = rots[j]
        l_t = rest[j] - l_rot @ rest[j]
        p = template.parents[j]
        if p < 0:
            g_rot[j], g_t[j] = l_rot, l_t
            posed[j] = l_rot @ rest[j] + l_t
        else:
            g_rot[j] = g_rot[p] @ l_rot
            g_t[j] = g_rot[p] @ l_t + g_t[p]
            posed[j] = g_rot[p] @ rest[j] + g_t[p]
    return posed, np.concatenate([g_rot, g_t[:, :, None]], axis=2)


def skin(template: HandTemplate, transforms: np.ndarray) -> np.ndarray:
    """Linear blend skinning of the rest vertices; returns ``(C, 3)``."""
    v = template.rest_vertices
    per_joint = np.einsum("kab,cb->kca", transforms[:, :, :3], v) + transforms[:, None, :, 3]
    return np.einsum("ck,kca->ca", template.skin_weights, per_joint)


def pose_hand(template: HandTemplate, angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posed (mesh ``(C, 3)``, joints ``(K, 3)``), both wrist-relative."""
    joints, transforms = forward_kinematics(template, angles)
    return skin(template, transforms), joints


def sample_angles(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Uniform joint angles inside the limits, shrunk toward the rest pose by ``scale``."""
    lo, hi = ANGLE_LIMITS[:, 0], ANGLE_LIMITS[:, 1]
    u = rng.uniform(lo, hi)
    rest = np.clip(0.0, lo, hi)
    return rest + scale * (u - rest)
