"""Three-stage training, bidirectional clip inference, Adam, checkpoints, ablation."""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import graph as gr
from . import hand, losses, metrics, nets, render, synth


class TrainingAborted(RuntimeError):
    """Non-finite loss; ``last_good`` holds the most recent finished checkpoint."""

    def __init__(self, message: str, last_good: "Checkpoint | None"):
        super().__init__(message)
        self.last_good = last_good


class MissingPrerequisite(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    lambda_s: float = 0.1
    lambda_h: float = 1.0
    lambda_p: float = 10.0
    lambda_m: float = 10.0
    learning_rate: float = 1e-3
    finetune_learning_rate: float = 1e-5
    batch_size: int = 4
    accum_steps: int = 1
    epochs1: int = 30
    epochs2: int = 20
    epochs3: int = 30
    warmup_steps: int = 150
    seed: int = 0
    width: int = 64
    num_keypoints: int = 21
    n: int = 7
    order: int = 3
    levels: int = 3
    net_width: int = 16
    sil_tau: float = 0.3
    heat_sigma: float = 2.0
    coord_unit_mm: float = 100.0
    flow_mode: str = "oracle"
    flow_epochs: int = 3
    validate: bool = True

    def __post_init__(self):
        for name in ("lambda_s", "lambda_h", "lambda_p", "lambda_m"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ValueError("batch_size and accum_steps must be >= 1")
        for name in ("learning_rate", "finetune_learning_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def published(cls, **overrides) -> "TrainConfig":
        """Published optimizer settings (pretrained backbones, full resolution)."""
        base = {"learning_rate": 1e-5, "batch_size": 24}
        base.update(overrides)
        return cls(**base)

    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.lambda_s, self.lambda_h, self.lambda_p, self.lambda_m)

    def epochs(self, stage: int) -> int:
        return {1: self.epochs1, 2: self.epochs2, 3: self.epochs3}[stage]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        return cls(**{k: _coerce(k, v) for k, v in values.items()})

    def replace(self, **overrides) -> "TrainConfig":
        return dataclasses.replace(self, **{k: _coerce(k, v) for k, v in overrides.items()})


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise KeyError(f"unknown config key {key!r}")
    kind = type(_FIELDS[key].default)
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    if kind is bool:
        text = str(value).strip().lower()
        if text not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: not a boolean: {value!r}")
        return text in ("true", "1", "yes")
    if kind is int:
        f = float(value)
        if f != int(f):
            raise ValueError(f"{key}: not an integer: {value!r}")
        return int(f)
    return kind(value)


def parse_config_text(text: str) -> dict:
    """Flat ``key=value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        _coerce(k, v)
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# model construction


@dataclass(eq=False)
class Model:
    template: hand.HandTemplate
    hierarchy: gr.GraphHierarchy
    nets: nets.PME


@functools.lru_cache(maxsize=4)
def _template_and_hierarchy(levels: int):
    template = hand.build_template()
    g = gr.build_graph(template.faces, template.num_vertices)
    return template, gr.coarsen(g, levels)


def build_model(config: TrainConfig) -> Model:
    template, hierarchy = _template_and_hierarchy(config.levels)
    nc = nets.NetConfig(
        num_keypoints=config.num_keypoints,
        width=config.net_width,
        order=config.order,
        flow_mode=config.flow_mode,
    )
    pme = nets.PME(hierarchy, nc, seed=config.seed)
    for p in pme.parameters():
        p.data[...] = p.data.astype(np.float32)
    return Model(template, hierarchy, pme)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment descent; parameters and moments are kept at float32 precision.

    Rounding after every update makes a float32 checkpoint an exact snapshot,
    so a resumed run continues bitwise identically.
    """

    def __init__(self, params: dict[str, ad.Tensor], lr: float, b1=0.9, b2=0.999, eps=1e-8, lr_overrides: dict[str, float] | None = None):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, b1, b2, eps
        self.lrs = {k: (lr_overrides or {}).get(k, lr) for k in params}
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, scale: float = 1.0):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad * scale
            self.m[k] = _f32(self.b1 * self.m[k] + (1.0 - self.b1) * g)
            self.v[k] = _f32(self.b2 * self.v[k] + (1.0 - self.b2) * g * g)
            upd = self.lrs[k] * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data[...] = _f32(p.data - upd)


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"TASSNCKP"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    stage: int
    epoch: int
    complete: bool
    params: dict[str, np.ndarray]
    opt_t: int = 0
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        meta = {
            "config": self.config,
            "stage": self.stage,
            "epoch": self.epoch,
            "complete": self.complete,
            "opt_t": self.opt_t,
            "rng_state": self.rng_state,
            "meta": self.meta,
        }
        text = json.dumps(meta, sort_keys=True).encode()
        chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text]
        for prefix, table in (("param", self.params), ("adam_m", self.opt_m), ("adam_v", self.opt_v)):
            for name in sorted(table):
                chunks.append(_tensor_record(f"{prefix}/{name}", table[name]))
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(b"".join(chunks))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", raw, 8)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<I", raw, 12)
        meta = json.loads(raw[16 : 16 + n].decode())
        pos = 16 + n
        tables = {"param": {}, "adam_m": {}, "adam_v": {}}
        while pos < len(raw):
            name, arr, pos = _read_record(raw, pos)
            prefix, key = name.split("/", 1)
            tables[prefix][key] = arr
        return cls(
            meta["config"], meta["stage"], meta["epoch"], meta["complete"], tables["param"],
            meta["opt_t"], tables["adam_m"], tables["adam_v"], meta["rng_state"], meta.get("meta", {}),
        )


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    b = name.encode()
    a = np.asarray(arr)
    head = struct.pack("<I", len(b)) + b + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype("<f4").tobytes()


def _read_record(raw: bytes, pos: int):
    (ln,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    name = raw[pos : pos + ln].decode()
    pos += ln
    (rank,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    dims = struct.unpack_from(f"<{rank}I", raw, pos)
    pos += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float64).reshape(dims)
    return name, arr, pos + 4 * count


def load_params(model: Model, params: dict[str, np.ndarray]) -> None:
    own = model.nets.named_parameters()
    missing = set(own) - set(params)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for k, t in own.items():
        if params[k].shape != t.shape:
            raise ValueError(f"parameter {k}: checkpoint shape {params[k].shape} vs model {t.shape}")
        t.data[...] = params[k]


# ---------------------------------------------------------------------------
# bidirectional clip inference


def clip_batch_images(clips: Sequence[synth.Clip]) -> np.ndarray:
    """``(B, n+1, 3, H, W)``."""
    return np.stack([c.images() for c in clips])


def clip_batch_heatmaps(clips: Sequence[synth.Clip], sigma: float) -> np.ndarray:
    """Ground-truth heatmaps ``(B, n+1, K, H, W)`` from the 2D keypoints."""
    h, w = clips[0].size
    return np.stack([np.stack([synth.gt_heatmaps(kp, w, h, sigma) for kp in c.keypoints2d]) for c in clips])


def uniform_prior(num_keypoints: int, width: int, height: int, sigma: float) -> np.ndarray:
    """Constant map equal to the mean value of a ground-truth Gaussian heatmap."""
    return np.full((num_keypoints, height, width), 2.0 * np.pi * sigma**2 / (width * height))


def rtm_pass(
    pme: nets.PME,
    clips: Sequence[synth.Clip],
    directions: Sequence[str] = ("fwd", "bwd"),
    heads: str = "all",
    images: np.ndarray | None = None,
    sigma: float = 2.0,
):
    """Forward-order and reversed-order estimates for every frame of each clip.

    Returns ``{direction: [PmeOutput for frame 0..n]}``; outputs are batched
    over clips.  Every frame first gets a heatmap estimate from itself alone
    (paired with itself, uniform prior); that estimate is the heatmap input
    of each pair leaving the frame, in either direction.  The first frame of a
    sweep has no predecessor and is estimated from itself paired with itself.
    """
    imgs = clip_batch_images(clips) if images is None else images
    b, frames = imgs.shape[:2]
    if frames < 2:
        raise ValueError("rtm_pass needs clips with at least 2 frames")
    n = frames - 1
    k = pme.config.num_keypoints
    shape = imgs.shape[-2:]
    prior = uniform_prior(k, shape[1], shape[0], sigma)
    flat = imgs.reshape((b * frames,) + imgs.shape[2:])
    own = pme.single_frame(flat, np.broadcast_to(prior, (b * frames,) + prior.shape).copy(), heads="heatmap").heatmaps
    own = ad.reshape(own, (b, frames, k) + shape)
    order = {"fwd": list(range(frames)), "bwd": list(range(n, -1, -1))}
    dirs = list(directions)
    nd = len(dirs)
    if nd == 0 or not set(dirs) <= set(order):
        raise ValueError(f"directions must be drawn from ('fwd', 'bwd'), got {directions!r}")

    def cat(arrs):
        return arrs[0] if nd == 1 else ad.concat(arrs, axis=0)

    def frame_heat(i):
        return ad.reshape(ad.slice_axis(own, 1, i, i + 1), (b, k) + shape)

    def split(out: nets.PmeOutput):
        parts = []
        for i in range(nd):
            sl = lambda t: None if t is None else (t if nd == 1 else ad.slice_axis(t, 0, i * b, (i + 1) * b))  # noqa: E731
            parts.append(nets.PmeOutput(*(sl(getattr(out, f.name)) for f in dataclasses.fields(out))))
        return parts

    results = {d: [None] * frames for d in dirs}
    for step in range(-1, n):
        # step -1 is the self-paired first frame of each sweep
        src = [order[d][max(step, 0)] for d in dirs]
        dst = [order[d][step + 1] for d in dirs]
        img_a = cat([ad.Tensor(imgs[:, s]) for s in src])
        img_b = cat([ad.Tensor(imgs[:, s]) for s in dst])
        out = pme(img_a, img_b, cat([frame_heat(s) for s in src]), heads)
        for d, part, t in zip(dirs, split(out), dst):
            results[d][t] = part
    return results


def _stack_frames(outputs: list[nets.PmeOutput], attr: str) -> ad.Tensor:
    """``(B, n+1, ...)`` from per-frame batched outputs."""
    return ad.stack([getattr(o, attr) for o in outputs], axis=1)


# ---------------------------------------------------------------------------
# loss assembly


@dataclass
class BatchLosses:
    loss_h: ad.Tensor
    loss_m: ad.Tensor | None
    loss_cp: ad.Tensor | None
    loss_cm: ad.Tensor | None
    total: ad.Tensor
    forward: list
    backward: list | None

    def values(self) -> dict[str, float]:
        def v(t):
            return float("nan") if t is None else t.item()

        return {"loss_h": v(self.loss_h), "loss_m": v(self.loss_m), "loss_cp": v(self.loss_cp),
                "loss_cm": v(self.loss_cm), "total": v(self.total)}


def mesh_silhouettes(model: Model, meshes: ad.Tensor, cam: render.Camera, width: int, tau: float) -> ad.Tensor:
    """Soft silhouettes ``(B, n+1, H, W)`` of stacked meshes ``(B, n+1, C, 3)``."""
    b, f, c, _ = meshes.shape
    flat = ad.reshape(meshes, (b * f, c, 3))
    sil = render.rasterize_silhouette(cam, flat, model.template.faces, width, width, tau)
    return ad.reshape(sil, (b, f, width, width))


def stage_losses(model: Model, config: TrainConfig, clips, stage: int) -> BatchLosses:
    """Objective of a training stage on a batch of clips.

    Stage 1: heatmap loss.  Stage 2: ``lambda_h L_h + lambda_s L_m``.
    Stage 3 adds the consistency terms from the reversed-order sweep.  The
    heatmap and silhouette terms always use the forward-order sweep and are
    averaged over the clip's frames.
    """
    w = config.weights()
    use_bwd = stage == 3 and (w.lambda_p > 0 or w.lambda_m > 0)
    dirs = ("fwd", "bwd") if use_bwd else ("fwd",)
    heads = "heatmap" if stage == 1 else "all"
    gt_heat = clip_batch_heatmaps(clips, config.heat_sigma)
    res = rtm_pass(model.nets, clips, dirs, heads, sigma=config.heat_sigma)
    fwd = res["fwd"]
    loss_h = losses.heatmap_loss(_stack_frames(fwd, "heatmaps"), gt_heat)
    if stage == 1:
        return BatchLosses(loss_h, None, None, None, loss_h * w.lambda_h, fwd, None)
    meshes = _stack_frames(fwd, "mesh")
    sil = mesh_silhouettes(model, meshes, clips[0].camera, config.width, config.sil_tau)
    loss_m = losses.silhouette_loss(sil, np.stack([c.silhouettes for c in clips]))
    if stage == 2:
        total = losses.total_loss(w, loss_m, loss_h, 0.0)
        return BatchLosses(loss_h, loss_m, None, None, total, fwd, None)
    n = len(fwd) - 1
    unit = 1.0 / config.coord_unit_mm
    if use_bwd:
        bwd = res["bwd"]
        loss_cp = losses.temporal_pose_loss([o.pose * unit for o in fwd], [o.pose * unit for o in bwd], n)
        loss_cm = losses.temporal_mesh_loss([o.mesh * unit for o in fwd], [o.mesh * unit for o in bwd], n)
    else:
        bwd = None
        loss_cp = loss_cm = ad.Tensor(0.0)
    total = losses.total_loss(w, loss_m, loss_h, losses.consistency_loss(w, loss_cp, loss_cm))
    return BatchLosses(loss_h, loss_m, loss_cp, loss_cm, total, fwd, bwd)


def stage_params(model: Model, stage: int) -> dict[str, ad.Tensor]:
    groups = {1: ("heatmap",), 2: ("heatmap", "mesh"), 3: ("flow", "heatmap", "mesh", "pose")}[stage]
    out = {}
    for g in groups:
        out.update(model.nets.group(g))
    return out


# the pose head is never trained against image data; its warm-up stands in
# for pretrained weights, so it is fine-tuned at the pretrained-model rate
WARM_STARTED_GROUPS = ("pose",)


def finetune_rates(model: Model, config: TrainConfig, params: dict[str, ad.Tensor]) -> dict[str, float]:
    """Per-parameter learning rates for warm-started sub-networks among ``params``."""
    names = {k for g in WARM_STARTED_GROUPS for k in model.nets.group(g)}
    return {k: config.finetune_learning_rate for k in params if k in names}


# ---------------------------------------------------------------------------
# warm-up substitutes for pretrained mesh/pose estimators


def warmup_pose_head(model: Model, config: TrainConfig, rng: np.random.Generator, steps: int, batch: int = 16) -> float:
    """Fit the pose head to joints of meshes posed by the procedural hand model."""
    params = model.nets.group("pose")
    opt = Adam(params, config.learning_rate)
    unit = 1.0 / config.coord_unit_mm
    loss = float("nan")
    for _ in range(steps):
        pairs = [hand.pose_hand(model.template, hand.sample_angles(rng)) for _ in range(batch)]
        meshes = np.stack([m for m, _ in pairs])
        joints = np.stack([j for _, j in pairs])
        opt.zero_grad()
        with ad.CompGraph() as g:
            pred = model.nets.pose(ad.Tensor(meshes))
            lt = ad.mean(ad.square((pred - joints) * unit))
        g.backpropagate(lt)
        opt.step()
        loss = lt.item()
    return loss


def warmup_mesh_decoder(model: Model, config: TrainConfig, clips, rng: np.random.Generator, steps: int) -> float:
    """Regress the mesh decoder's output toward the rest-pose template."""
    params = model.nets.group("mesh")
    opt = Adam(params, config.learning_rate)
    unit = 1.0 / config.coord_unit_mm
    rest = model.template.rest_vertices
    prior = uniform_prior(config.num_keypoints, config.width, config.width, config.heat_sigma)
    loss = float("nan")
    for _ in range(steps):
        pick = rng.choice(len(clips), size=min(config.batch_size, len(clips)), replace=False)
        frame = rng.integers(0, clips[0].num_frames, size=len(pick))
        img = np.stack([clips[i].images()[f] for i, f in zip(pick, frame)])
        with ad.no_record():
            # the same two self-paired passes that open a sweep
            own = model.nets.single_frame(img, np.broadcast_to(prior, (len(pick),) + prior.shape).copy(), heads="heatmap")
            feat = model.nets.single_frame(img, own.heatmaps, heads="heatmap").features
        opt.zero_grad()
        with ad.CompGraph() as g:
            mesh = model.nets.mesh(ad.Tensor(feat.data))
            lt = ad.mean(ad.square((mesh - rest) * unit))
        g.backpropagate(lt)
        opt.step()
        loss = lt.item()
    return loss


def pretrain_flow(model: Model, config: TrainConfig, clips, rng: np.random.Generator, epochs: int) -> float:
    """Endpoint-error regression of the learned flow network on generator flow."""
    params = model.nets.group("flow")
    opt = Adam(params, config.learning_rate)
    loss = float("nan")
    for _ in range(epochs):
        for i in rng.permutation(len(clips)):
            c = clips[i]
            imgs = c.images()
            a = np.concatenate([imgs[:-1], imgs[1:]])
            b = np.concatenate([imgs[1:], imgs[:-1]])
            gt = np.concatenate([c.flow_fwd, c.flow_bwd])
            opt.zero_grad()
            with ad.CompGraph() as g:
                pred = model.nets.flow(a, b)
                d = pred - gt
                lt = ad.mean(ad.sqrt(ad.sum(ad.square(d), axis=1) + 1e-6))
            g.backpropagate(lt)
            opt.step()
            loss = lt.item()
    return loss


# ---------------------------------------------------------------------------
# evaluation


def predict_poses(model: Model, clips, config: TrainConfig, chunk: int = 20) -> np.ndarray:
    """Forward-order evaluation-mode poses ``(len(clips), n+1, K, 3)``."""
    out = []
    with ad.no_record():
        for i in range(0, len(clips), chunk):
            res = rtm_pass(model.nets, clips[i : i + chunk], ("fwd",), sigma=config.heat_sigma)
            out.append(np.stack([o.pose.data for o in res["fwd"]], axis=1))
    return np.concatenate(out)


def evaluate(model: Model, clips, config: TrainConfig, preds: np.ndarray | None = None) -> dict[str, float]:
    """EPE / AUC over all frames of ``clips``; reads 3D ground truth under evaluation access."""
    preds = predict_poses(model, clips, config) if preds is None else preds
    with synth.evaluation_access():
        gts = np.stack([c.pose3d_gt() for c in clips])
    return metrics.summarize(list(preds), list(gts))


def validation_row(model: Model, config: TrainConfig, clips, stage: int) -> dict[str, float]:
    with ad.no_record():
        vals = {"loss_h": [], "loss_m": [], "loss_cp": [], "loss_cm": [], "total": []}
        preds = []
        for i in range(0, len(clips), 20):
            bl = stage_losses(model, config, clips[i : i + 20], stage)
            for k, v in bl.values().items():
                vals[k].append(v)
            if bl.forward[0].pose is not None:
                preds.append(np.stack([o.pose.data for o in bl.forward], axis=1))
    row = {k: float(np.mean(v)) for k, v in vals.items()}
    if not preds:
        preds = [predict_poses(model, clips, config)]
    row.update(evaluate(model, clips, config, np.concatenate(preds)))
    return row


# ---------------------------------------------------------------------------
# stages

LOG_FIELDS = ["stage", "epoch", "split", "loss_h", "loss_m", "loss_cp", "loss_cm", "total", "epe_mm", "auc_0_50", "auc_20_50"]


def _append_log(path, row: dict) -> None:
    if path is None:
        return
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            w.writeheader()
        w.writerow({k: _fmt(row.get(k, "")) for k in LOG_FIELDS})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return v


def _snapshot(model, config, stage, epoch, complete, opt: Adam | None, rng) -> Checkpoint:
    params = {k: t.data.copy() for k, t in model.nets.named_parameters().items()}
    return Checkpoint(
        config.to_dict(), stage, epoch, complete, params,
        opt.t if opt else 0,
        {k: v.copy() for k, v in opt.m.items()} if opt else {},
        {k: v.copy() for k, v in opt.v.items()} if opt else {},
        rng.bit_generator.state if rng is not None else None,
    )


def register_flows(model: Model, dataset: synth.Dataset) -> None:
    if model.nets.flow.mode == "oracle":
        for c in dataset.clips:
            model.nets.flow.register(c)


def train_stage(
    config: TrainConfig,
    dataset: synth.Dataset,
    stage: int,
    checkpoint: Checkpoint | None = None,
    *,
    epochs: int | None = None,
    log_path=None,
    checkpoint_path=None,
    model: Model | None = None,
    stop_after: int | None = None,
) -> Checkpoint:
    """Run (or resume) one training stage and return its checkpoint.

    ``stop_after`` ends the stage early after that many epochs of this call,
    returning an incomplete checkpoint that a later call can resume.
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    resume = checkpoint is not None and checkpoint.stage == stage and not checkpoint.complete
    if stage > 1 and not resume:
        if checkpoint is None or checkpoint.stage != stage - 1 or not checkpoint.complete:
            raise MissingPrerequisite(f"stage {stage} requires a completed stage-{stage - 1} checkpoint")
    total_epochs = config.epochs(stage) if epochs is None else epochs
    model = model or build_model(config)
    register_flows(model, dataset)
    if checkpoint is not None:
        load_params(model, checkpoint.params)
    params = stage_params(model, stage)
    opt = Adam(params, config.learning_rate, lr_overrides=finetune_rates(model, config, params))
    rng = np.random.default_rng([config.seed, stage])
    start = 0
    if resume:
        opt.t = checkpoint.opt_t
        opt.m = {k: checkpoint.opt_m[k].copy() for k in params}
        opt.v = {k: checkpoint.opt_v[k].copy() for k in params}
        rng.bit_generator.state = checkpoint.rng_state
        start = checkpoint.epoch
    train = dataset.train
    last_good = checkpoint
    with synth.training_guard():
        if not resume:
            if stage == 1 and config.flow_mode == "learned":
                pretrain_flow(model, config, train, rng, config.flow_epochs)
            if stage == 2:
                warmup_pose_head(model, config, rng, config.warmup_steps)
                warmup_mesh_decoder(model, config, train, rng, config.warmup_steps)
            last_good = _snapshot(model, config, stage, 0, total_epochs == 0, opt, rng)
        end = total_epochs if stop_after is None else min(total_epochs, start + stop_after)
        for epoch in range(start, end):
            order = rng.permutation(len(train))
            bs = config.batch_size
            sums: dict[str, list[float]] = {}
            batches = [order[i : i + bs] for i in range(0, len(order), bs)]
            opt.zero_grad()
            for bi, idx in enumerate(batches):
                clips = [train[i] for i in idx]
                try:
                    with ad.CompGraph() as g:
                        bl = stage_losses(model, config, clips, stage)
                    if not math.isfinite(bl.total.item()):
                        raise ad.NonFiniteError("total loss is not finite")
                    g.backpropagate(bl.total)
                except (ad.NonFiniteError, render.BehindCameraError) as exc:
                    if checkpoint_path is not None and last_good is not None:
                        last_good.save(checkpoint_path)
                    raise TrainingAborted(f"diverged at stage {stage} epoch {epoch + 1} batch {bi}: {exc}", last_good) from exc
                if (bi + 1) % config.accum_steps == 0 or bi == len(batches) - 1:
                    opt.step(1.0 / config.accum_steps if config.accum_steps > 1 else 1.0)
                    opt.zero_grad()
                for k, v in bl.values().items():
                    sums.setdefault(k, []).append(v)
            row = {"stage": stage, "epoch": epoch + 1, "split": "train"}
            row.update({k: float(np.mean(v)) for k, v in sums.items()})
            _append_log(log_path, row)
            if config.validate and dataset.val_idx:
                vrow = {"stage": stage, "epoch": epoch + 1, "split": "val"}
                vrow.update(validation_row(model, config, dataset.val, stage))
                _append_log(log_path, vrow)
            last_good = _snapshot(model, config, stage, epoch + 1, epoch + 1 == total_epochs, opt, rng)
            if checkpoint_path is not None:
                last_good.save(checkpoint_path)
    if last_good is None or last_good.stage != stage:
        last_good = _snapshot(model, config, stage, start, start >= total_epochs, opt, rng)
    return last_good


def train_all(config: TrainConfig, dataset: synth.Dataset, out_dir=None) -> Checkpoint:
    """Stages 1 to 3 in sequence."""
    ckpt = None
    for stage in (1, 2, 3):
        log = None if out_dir is None else Path(out_dir) / "train_log.csv"
        path = None if out_dir is None else Path(out_dir) / f"stage{stage}.ckpt"
        ckpt = train_stage(config, dataset, stage, ckpt, log_path=log, checkpoint_path=path)
    return ckpt


# ---------------------------------------------------------------------------
# ablation

ABLATION_VARIANTS = (
    ("TASSN w/o L_c", {"lambda_p": 0.0, "lambda_m": 0.0}),
    ("TASSN w/o L_c^m", {"lambda_m": 0.0}),
    ("TASSN", {}),
)


def ablate(config: TrainConfig, dataset: synth.Dataset, stage2: Checkpoint, *, epochs: int | None = None, out_dir=None) -> list[dict]:
    """Stage-3 runs without consistency, without mesh consistency, and in full, from one stage-2 checkpoint."""
    rows = []
    for label, overrides in ABLATION_VARIANTS:
        cfg = config.replace(**overrides)
        log = None if out_dir is None else Path(out_dir) / f"ablate_{_slug(label)}.csv"
        model = build_model(cfg)
        ckpt = train_stage(cfg, dataset, 3, stage2, epochs=epochs, log_path=log, model=model)
        load_params(model, ckpt.params)
        row = {"variant": label}
        row.update(evaluate(model, dataset.val, cfg))
        rows.append(row)
    return rows


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label).strip("_").lower()


def write_ablation_csv(path, rows: list[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "epe_mm", "auc_0_50", "auc_20_50"])
        for r in rows:
            w.writerow([r["variant"], f"{r['epe_mm']:.6f}", f"{r['auc_0_50']:.6f}", f"{r['auc_20_50']:.6f}"])
