"""On-disk dataset: one directory per clip plus a manifest of split membership.

Frames are binary PPM, silhouettes binary PGM, numeric arrays raw
little-endian float32 preceded by a text line ``name dims d1 d2 ...``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .render import Camera, _split_pnm
from .synth import Clip, Dataset

MANIFEST = "manifest.txt"


def write_array(path, name: str, arr: np.ndarray) -> None:
    a = np.asarray(arr)
    header = " ".join([name, str(a.ndim)] + [str(d) for d in a.shape]) + "\n"
    Path(path).write_bytes(header.encode() + a.astype("<f4").tobytes())


def read_array(path) -> tuple[str, np.ndarray]:
    raw = Path(path).read_bytes()
    end = raw.index(b"\n")
    fields = raw[:end].decode().split()
    name, ndim = fields[0], int(fields[1])
    dims = tuple(int(d) for d in fields[2 : 2 + ndim])
    if len(dims) != ndim:
        raise ValueError(f"{path}: header declares {ndim} dims, lists {len(dims)}")
    count = int(np.prod(dims)) if dims else 1
    body = raw[end + 1 :]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: expected {4 * count} data bytes, found {len(body)}")
    return name, np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(dims)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    header, body = _split_pnm(Path(path).read_bytes(), 3)
    if header[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(header[1]), int(header[2])
    return np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


def _write_mask(path, mask: np.ndarray) -> None:
    data = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def _read_mask(path) -> np.ndarray:
    header, body = _split_pnm(Path(path).read_bytes(), 3)
    w, h = int(header[1]), int(header[2])
    return (np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w) > 127).astype(np.float64)


def _kv_text(d: dict) -> str:
    return "".join(f"{k}={d[k]!r}\n" for k in sorted(d))


def _parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def save_clip(directory, clip: Clip) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(clip.frames):
        write_ppm(d / f"frame_{i:03d}.ppm", f)
        _write_mask(d / f"silhouette_{i:03d}.pgm", clip.silhouettes[i])
    write_array(d / "flow_fwd.f32", "flow_fwd", clip.flow_fwd)
    write_array(d / "flow_bwd.f32", "flow_bwd", clip.flow_bwd)
    write_array(d / "keypoints2d.f32", "keypoints2d", clip.keypoints2d)
    write_array(d / "pose3d.f32", "pose3d", clip._pose3d)
    write_array(d / "mesh3d.f32", "mesh3d", clip._mesh3d)
    (d / "camera.txt").write_text(_kv_text(clip.camera.as_dict()))
    (d / "clip.txt").write_text(f"seed={clip.seed}\nframes={clip.num_frames}\n")


def load_clip(directory, split: str = "train") -> Clip:
    d = Path(directory)
    meta = _parse_kv((d / "clip.txt").read_text())
    frames = int(meta["frames"])
    cam = Camera(**_parse_kv((d / "camera.txt").read_text()))
    return Clip(
        frames=np.stack([read_ppm(d / f"frame_{i:03d}.ppm") for i in range(frames)]),
        flow_fwd=read_array(d / "flow_fwd.f32")[1],
        flow_bwd=read_array(d / "flow_bwd.f32")[1],
        keypoints2d=read_array(d / "keypoints2d.f32")[1],
        silhouettes=np.stack([_read_mask(d / f"silhouette_{i:03d}.pgm") for i in range(frames)]),
        camera=cam,
        _pose3d=read_array(d / "pose3d.f32")[1],
        _mesh3d=read_array(d / "mesh3d.f32")[1],
        seed=int(meta["seed"]),
        split=split,
    )


def save_dataset(directory, ds: Dataset) -> list[str]:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    lines = [f"# seed {ds.seed}"]
    split_of = {i: "train" for i in ds.train_idx} | {i: "val" for i in ds.val_idx}
    for i, clip in enumerate(ds.clips):
        name = f"clip_{i:04d}"
        save_clip(root / name, clip)
        lines.append(f"{name} {split_of[i]}")
        names.append(name)
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return names


def read_manifest(directory) -> tuple[int, list[tuple[str, str]]]:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    seed, entries = 0, []
    for line in path.read_text().splitlines():
        if line.startswith("# seed"):
            seed = int(line.split()[-1])
        elif line.strip():
            name, split = line.split()
            if split not in ("train", "val"):
                raise ValueError(f"{path}: unknown split {split!r} for {name}")
            entries.append((name, split))
    return seed, entries


def load_dataset(directory) -> Dataset:
    seed, entries = read_manifest(directory)
    clips = [load_clip(Path(directory) / name, split) for name, split in entries]
    train = [i for i, (_, s) in enumerate(entries) if s == "train"]
    val = [i for i, (_, s) in enumerate(entries) if s == "val"]
    return Dataset(clips, train, val, seed)
