"""Command line front end.

Subcommands cover the whole workflow: synthetic dataset generation, both
training stages, evaluation, channel rendering, score inspection, and
instance editing. Training runs are configured by a flat key = value file
(see RunConfig); the other commands take explicit paths.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import netpbm
from .editor import EditSpec, apply_edit, instance_matte
from .losses import IdClassifier
from .perception import read_stage1_artifacts
from .pipeline import (RunConfig, evaluate, load_checkpoint, run_stage1,
                       run_stage2, training_frames)
from .rasterizer import render
from .scene import load_field, save_field
from .synth import SceneScript, desk_script, generate, read_dataset, \
    write_dataset


def _log(args):
    return print if args.verbose else None


def cmd_gen(args):
    if args.script:
        script = SceneScript.from_json(Path(args.script).read_text())
    else:
        script = desk_script(seed=args.seed, n_frames=args.frames,
                             size=args.size)
    ds = generate(script)
    write_dataset(ds, args.out)
    print(f"wrote {ds.n_frames} frames "
          f"({script.width}x{script.height}) to {args.out}; "
          f"dynamic ids: {sorted(ds.dynamic_ids)}")
    return 0


def cmd_stage1(args):
    cfg = RunConfig.from_file(args.config)
    if not cfg.out:
        raise ValueError("config must set 'out' for stage1 artifacts")
    art = run_stage1(cfg, log=_log(args))
    print(f"stage1 done: {len(art.s_over)} static Gaussians, "
          f"dynamic ids {art.dynamic_ids}, artifacts in {cfg.out}/stage1")
    return 0


def cmd_stage2(args):
    cfg = RunConfig.from_file(args.config)
    if not cfg.out:
        raise ValueError("config must set 'out' for stage2 checkpoints")
    art_dir = args.artifacts or str(Path(cfg.out) / "stage1")
    art = read_stage1_artifacts(art_dir)
    ds = read_dataset(cfg.dataset)
    res = run_stage2(cfg, art, training_frames(ds), log=_log(args))
    print(f"stage2 done: {len(res.field)} Gaussians, "
          f"{res.skipped} skipped gradient elements, "
          f"checkpoints in {cfg.out}/stage2")
    return 0


def cmd_eval(args):
    cfg = RunConfig.from_file(args.config)
    ds = read_dataset(cfg.dataset)
    if args.field:
        field = load_field(args.field)
        classifier = IdClassifier.load(args.classifier) \
            if args.classifier else None
    else:
        field, classifier = load_checkpoint(Path(cfg.out) / "stage2")
    art = None
    art_dir = Path(args.artifacts) if args.artifacts \
        else Path(cfg.out) / "stage1"
    if art_dir.is_dir():
        art = read_stage1_artifacts(art_dir)
    report = evaluate(field, classifier, ds, cfg, artifacts=art)
    if cfg.out:
        report.save(Path(cfg.out) / "eval.json")
    print(f"PSNR train {report.mean_psnr_train:.2f}"
          + (f" / test {report.mean_psnr_test:.2f}" if report.psnr_test
             else ""))
    print(f"SSIM train {report.mean_ssim_train:.4f}"
          + (f" / test {report.mean_ssim_test:.4f}" if report.ssim_test
             else ""))
    if report.precision is not None:
        print(f"dynamic set precision {report.precision:.3f} "
              f"recall {report.recall:.3f}")
    for oid, iou in report.iou_per_instance:
        print(f"instance {oid} decomposition IoU {iou:.3f}")
    return 0


def cmd_render(args):
    field = load_field(args.field)
    ds = read_dataset(args.dataset)
    if not 0 <= args.frame < ds.n_frames:
        raise ValueError(f"frame {args.frame} outside [0, {ds.n_frames})")
    cam = ds.frames[args.frame].camera
    out = render(field, cam)
    channels = [c.strip() for c in args.channels.split(",") if c.strip()]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{args.frame:04d}"
    for ch in channels:
        if ch == "rgb":
            netpbm.write_ppm(out_dir / f"{stem}.rgb.ppm",
                             np.clip(out.color, 0.0, 1.0))
        elif ch == "depth":
            d = out.depth
            lo, hi = float(d.min()), float(d.max())
            span = hi - lo if hi > lo else 1.0
            netpbm.write_pgm(out_dir / f"{stem}.depth.pgm", (d - lo) / span,
                             comment=f"depth = {lo:.9g} + (v/255)*{span:.9g}")
        elif ch == "id":
            if not args.classifier:
                raise ValueError("channel 'id' needs --classifier")
            clf = IdClassifier.load(args.classifier)
            cls = clf.predict(out.embedding)
            netpbm.write_pgm(
                out_dir / f"{stem}.id.pgm", cls / max(clf.num_classes, 1),
                comment=f"class = round(v/255*{clf.num_classes})")
        else:
            raise ValueError(f"unknown channel {ch!r} "
                             "(choose from rgb,depth,id)")
    print(f"wrote {len(channels)} channel(s) for frame {args.frame} "
          f"to {args.out}")
    return 0


def cmd_scores(args):
    path = Path(args.artifacts) / "dynamic_ids.tsv"
    rows = []
    for line in path.read_text().splitlines():
        i, s, s3, sel = line.split("\t")
        rows.append((int(i), float(s), float(s3), int(sel)))
    rows.sort(key=lambda r: -r[1])
    print("rank\tid\tscore\tscore_cubed\tdynamic")
    for rank, (i, s, s3, sel) in enumerate(rows, 1):
        print(f"{rank}\t{i}\t{s:.17g}\t{s3:.17g}\t{sel}")
    return 0


def _load_remap(path):
    p = Path(path)
    if p.is_dir():
        p = p / "remap.tsv"
    remap = {}
    for line in p.read_text().splitlines():
        i, c = line.split("\t")
        remap[int(i)] = int(c)
    return remap


def cmd_edit(args):
    field = load_field(args.field)
    spec = EditSpec.from_file(args.spec)
    classifier = IdClassifier.load(args.classifier)
    remap = _load_remap(args.remap) if args.remap else None
    edited = apply_edit(field, spec, classifier, remap=remap)
    save_field(args.out, edited)
    print(f"applied {len(spec.ops)} op(s): {len(field)} -> {len(edited)} "
          f"Gaussians, wrote {args.out}")
    return 0


def cmd_matte(args):
    field = load_field(args.field)
    classifier = IdClassifier.load(args.classifier)
    ds = read_dataset(args.dataset)
    if not 0 <= args.frame < ds.n_frames:
        raise ValueError(f"frame {args.frame} outside [0, {ds.n_frames})")
    remap = _load_remap(args.remap) if args.remap else None
    matte = instance_matte(field, classifier, args.id,
                           ds.frames[args.frame].camera, remap=remap)
    netpbm.write_pgm(args.out, matte,
                     comment="alpha matte, v/255 = accumulated alpha*T")
    print(f"wrote matte for instance {args.id} at frame {args.frame} "
          f"to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="splat4d",
        description="Self-supervised dynamic scene decomposition with "
                    "periodic-vibration 4D Gaussians.")
    p.add_argument("--verbose", action="store_true",
                   help="print progress during training commands")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--script", help="scene script JSON (omit for the desk "
                                    "preset)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=24)
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(func=cmd_gen)

    s1 = sub.add_parser("stage1", help="instance-level dynamic perception")
    s1.add_argument("--config", required=True)
    s1.set_defaults(func=cmd_stage1)

    s2 = sub.add_parser("stage2", help="full 4D reconstruction")
    s2.add_argument("--config", required=True)
    s2.add_argument("--artifacts", help="stage1 artifact dir "
                                        "(default <out>/stage1)")
    s2.set_defaults(func=cmd_stage2)

    ev = sub.add_parser("eval", help="metrics report for a trained field")
    ev.add_argument("--config", required=True)
    ev.add_argument("--field", help="field checkpoint "
                                    "(default <out>/stage2/final.dgs4)")
    ev.add_argument("--classifier")
    ev.add_argument("--artifacts")
    ev.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render channels of one frame")
    r.add_argument("--field", required=True)
    r.add_argument("--dataset", required=True,
                   help="dataset dir providing the frame cameras")
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--channels", default="rgb")
    r.add_argument("--classifier", help="needed for the id channel")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    sc = sub.add_parser("scores", help="instance dynamic-score ranking")
    sc.add_argument("--artifacts", required=True)
    sc.set_defaults(func=cmd_scores)

    ed = sub.add_parser("edit", help="apply an edit spec to a field")
    ed.add_argument("--field", required=True)
    ed.add_argument("--spec", required=True)
    ed.add_argument("--classifier", required=True)
    ed.add_argument("--remap", help="remap.tsv (or stage1 artifact dir) "
                                    "mapping instance ids to classes")
    ed.add_argument("--out", required=True)
    ed.set_defaults(func=cmd_edit)

    m = sub.add_parser("matte", help="per-instance alpha matte")
    m.add_argument("--field", required=True)
    m.add_argument("--classifier", required=True)
    m.add_argument("--id", type=int, required=True)
    m.add_argument("--frame", type=int, required=True)
    m.add_argument("--dataset", required=True)
    m.add_argument("--remap")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_matte)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
