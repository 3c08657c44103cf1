"""Command-line entry point: ``tassn <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, metrics, render, synth, train


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get("TASSN_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"TASSN_SEED must be an integer, got {raw!r}") from None


def _positive(value: str) -> int:
    v = int(value)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg(value: str) -> int:
    v = int(value)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tassn", description="Hand mesh and joint regression trained on 2D labels of synthetic video.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: $TASSN_SEED or 0)")
        sp.add_argument("--workers", type=_positive, default=1, help="worker count (execution is single-process)")
        if config:
            sp.add_argument("--config", type=Path, help="key=value config file")
            sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="config override")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--clips", type=_positive, required=True, help="training clips")
    g.add_argument("--val-clips", type=_nonneg, default=None, help="validation clips (default: clips // 5)")
    g.add_argument("--frames", type=int, default=7, help="clip length n (n + 1 frames)")
    g.add_argument("--width", type=_positive, default=64)
    g.add_argument("--motion", type=float, default=0.12)
    common(g, config=False)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--checkpoint", type=Path, help="previous-stage (or resumable) checkpoint")
    t.add_argument("--epochs", type=_nonneg, default=None)
    common(t)

    a = sub.add_parser("ablate", help="stage-3 ablation from a stage-2 checkpoint")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--checkpoint", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--epochs", type=_nonneg, default=None)
    common(a)

    for name, helptext in (("eval", "metric summary CSV over the validation split"), ("plot-pck", "PCK curve CSV over the validation split")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--data", type=Path, required=True)
        e.add_argument("--checkpoint", type=Path)
        e.add_argument("--predictions", type=Path, help="poses array file to score instead of running a checkpoint")
        e.add_argument("--out", type=Path, required=True, help="output CSV path")
        common(e, config=False)

    r = sub.add_parser("render", help="dump predicted and ground-truth silhouettes as PGM")
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--data", type=Path)
    r.add_argument("--checkpoint", type=Path)
    r.add_argument("--clip", type=_nonneg, default=0, help="validation clip index")
    r.add_argument("--mesh", type=Path, help="vertex array file (C, 3) to render instead of a prediction")
    r.add_argument("--topology", type=Path, help="faces for --mesh (\"C F\" text format)")
    r.add_argument("--width", type=_positive, default=64)
    r.add_argument("--tau", type=float, default=0.3)
    common(r, config=False)

    gc = sub.add_parser("grad-check", help="finite-difference gradient suite")
    gc.add_argument("--trials", type=_positive, default=3)
    common(gc, config=False)
    return p


def _config(args) -> train.TrainConfig:
    values = {}
    if getattr(args, "config", None):
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        values.update(train.parse_config_text(args.config.read_text()))
    for item in getattr(args, "overrides", []) or []:
        if "=" not in item:
            raise UsageError(f"override must be KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    try:
        cfg = train.TrainConfig().replace(**values)
        if args.seed is not None or "seed" not in values:
            cfg = cfg.replace(seed=args.seed if args.seed is not None else _default_seed())
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc).strip("'\"")) from None
    return cfg


def _load_data(path: Path) -> synth.Dataset:
    if not (path / dataio.MANIFEST).exists():
        raise FileNotFoundError(f"dataset not found: {path / dataio.MANIFEST}")
    return dataio.load_dataset(path)


def _load_ckpt(path: Path) -> train.Checkpoint:
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return train.Checkpoint.load(path)


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if args.frames < 2:
        raise UsageError("--frames must be >= 2")
    val = args.clips // 5 if args.val_clips is None else args.val_clips
    template = train._template_and_hierarchy(3)[0]
    ds = synth.generate_dataset(template, args.clips, val, seed=seed, n=args.frames, width=args.width, motion=args.motion)
    dataio.save_dataset(args.out, ds)
    frames = sum(c.num_frames for c in ds.clips)
    print(f"wrote {len(ds.clips)} clips ({frames} frames) to {args.out}: train={len(ds.train_idx)} val={len(ds.val_idx)}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _load_data(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(cfg.to_text())
    ckpt = None
    if args.checkpoint is not None:
        ckpt = _load_ckpt(args.checkpoint)
    elif args.stage > 1:
        prev = args.out / f"stage{args.stage - 1}.ckpt"
        if not prev.exists():
            raise train.MissingPrerequisite(f"stage {args.stage} requires a stage-{args.stage - 1} checkpoint (looked for {prev}; pass --checkpoint)")
        ckpt = _load_ckpt(prev)
    path = args.out / f"stage{args.stage}.ckpt"
    result = train.train_stage(cfg, ds, args.stage, ckpt, epochs=args.epochs, log_path=args.out / "train_log.csv", checkpoint_path=path)
    result.save(path)
    print(f"stage {args.stage}: {result.epoch} epochs, checkpoint {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = _load_data(args.data)
    ckpt = _load_ckpt(args.checkpoint)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(cfg.to_text())
    rows = train.ablate(cfg, ds, ckpt, epochs=args.epochs, out_dir=args.out)
    train.write_ablation_csv(args.out / "ablation.csv", rows)
    for r in rows:
        print(f"{r['variant']}: epe {r['epe_mm']:.3f} mm, auc_0_50 {r['auc_0_50']:.4f}, auc_20_50 {r['auc_20_50']:.4f}")
    return 0


def _predictions(args, ds: synth.Dataset) -> np.ndarray:
    if args.predictions is not None:
        if not args.predictions.exists():
            raise FileNotFoundError(f"predictions file not found: {args.predictions}")
        return dataio.read_array(args.predictions)[1]
    if args.checkpoint is None:
        raise UsageError("need --checkpoint or --predictions")
    ckpt = _load_ckpt(args.checkpoint)
    cfg = train.TrainConfig.from_dict(ckpt.config)
    model = train.build_model(cfg)
    train.load_params(model, ckpt.params)
    train.register_flows(model, ds)
    return train.predict_poses(model, ds.val, cfg)


def _val_truth(ds: synth.Dataset) -> np.ndarray:
    with synth.evaluation_access():
        return np.stack([c.pose3d_gt() for c in ds.val])


def cmd_eval(args) -> int:
    ds = _load_data(args.data)
    preds = _predictions(args, ds)
    gts = _val_truth(ds)
    if preds.shape != gts.shape:
        raise ValueError(f"predictions {preds.shape} do not match validation poses {gts.shape}")
    summary = metrics.summarize(list(preds), list(gts))
    metrics.write_summary_csv(args.out, summary)
    print(", ".join(f"{k}={v:.6f}" for k, v in summary.items()))
    return 0


def cmd_plot_pck(args) -> int:
    ds = _load_data(args.data)
    preds = _predictions(args, ds)
    gts = _val_truth(ds)
    if preds.shape != gts.shape:
        raise ValueError(f"predictions {preds.shape} do not match validation poses {gts.shape}")
    metrics.write_pck_csv(args.out, metrics.pck_curve(list(preds), list(gts)))
    print(f"wrote {args.out}")
    return 0


def cmd_render(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    if args.mesh is not None:
        if args.topology is None:
            raise UsageError("--mesh needs --topology")
        from . import graph as gr

        verts = dataio.read_array(args.mesh)[1].reshape(-1, 3)
        _, faces = gr.read_topology(args.topology)
        cam = synth.default_camera(args.width, args.width)
        sil = render.rasterize_silhouette(cam, verts, faces, args.width, args.width, args.tau).data
        render.write_pgm(args.out / "mesh.pgm", sil)
        print(f"wrote {args.out / 'mesh.pgm'}")
        return 0
    if args.data is None or args.checkpoint is None:
        raise UsageError("render needs --mesh/--topology or --data and --checkpoint")
    ds = _load_data(args.data)
    if args.clip >= len(ds.val):
        raise UsageError(f"--clip {args.clip} out of range ({len(ds.val)} validation clips)")
    ckpt = _load_ckpt(args.checkpoint)
    cfg = train.TrainConfig.from_dict(ckpt.config)
    model = train.build_model(cfg)
    train.load_params(model, ckpt.params)
    train.register_flows(model, ds)
    clip = ds.val[args.clip]
    from . import autodiff as ad

    with ad.no_record():
        res = train.rtm_pass(model.nets, [clip], ("fwd",), sigma=cfg.heat_sigma)
        for i, o in enumerate(res["fwd"]):
            sil = render.rasterize_silhouette(clip.camera, o.mesh.data[0], model.template.faces, cfg.width, cfg.width, args.tau)
            render.write_pgm(args.out / f"pred_{i:03d}.pgm", sil.data)
            render.write_pgm(args.out / f"gt_{i:03d}.pgm", clip.silhouettes[i])
    print(f"wrote {2 * clip.num_frames} silhouettes to {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    from . import gradcheck

    seed = args.seed if args.seed is not None else _default_seed()
    results = gradcheck.run_suite(trials=args.trials, seed=seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name}: {r.report}")
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return 1 if failed else 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "plot-pck": cmd_plot_pck,
    "render": cmd_render,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tassn {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except train.TrainingAborted as exc:
        print(f"tassn {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"tassn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
