"""Command-line entry points: generate-data, train, eval, infer, ablate.

Exit codes: 0 ok, 2 usage, 3 config, 4 I/O, 5 numeric failure. Errors are
printed as a single machine-parsable line `error[<code>]: <message>`.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as dmod
from .data import DatasetManifest, ManifestEntry, assign_split, load_clip
from .errors import ConfigError, DataError, DualRefError, UsageError
from .metrics import (
    FovRing,
    MetricReport,
    aggregate_ring_results,
    fov_ring_metrics,
)
from .network import super_resolve
from .training import (
    TripletDataset,
    load_checkpoint,
    restore_model,
    run_ablation,
    ablation_table_text,
    train_stage1,
    train_stage2,
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dualref",
        description="Reference-based video super-resolution with dual-stream "
        "bidirectional propagation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--workdir", required=True, help="all outputs go under this directory")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument(
            "overrides", nargs="*",
            help="dotted config overrides, e.g. model.channels=32",
        )

    p = sub.add_parser("generate-data", help="synthesize multi-FoV triplets from HR clips")
    p.add_argument("--src-dir", required=True, help="directory of HR image-sequence clips")
    add_common(p)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", type=int, default=1, choices=(1, 2))
    p.add_argument("--init-checkpoint", default=None, help="stage-1 checkpoint for stage 2")
    add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint with FoV-ring metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument(
        "--rings", default="0-50,50-100",
        help="comma-separated inner-outer area percents, e.g. 0-50,50-60,60-100",
    )
    add_common(p)

    p = sub.add_parser("infer", help="super-resolve an LR/Ref clip pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lr-dir", required=True)
    p.add_argument("--ref-dir", required=True)
    add_common(p)

    p = sub.add_parser("ablate", help="train and score flag variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rows", required=True, help="comma-separated row ids, e.g. 1,2,7")
    add_common(p)

    return parser


def _load_cfg(args):
    cfg = cfgmod.load_config(args.config)
    cfgmod.apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg["model"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    return cfg


def cmd_generate_data(args):
    cfg = _load_cfg(args)
    src = Path(args.src_dir)
    if not src.is_dir():
        raise DataError(f"source directory not found: {src}")
    out_root = Path(args.workdir) / "dataset"
    scale = cfg["data"]["scale"]
    mag = cfg["data"]["magnification"]
    ratios = tuple(cfg["data"]["split_ratios"])
    clip_dirs = sorted(d for d in src.iterdir() if d.is_dir())
    if not clip_dirs:
        raise DataError(f"no clip directories under {src}")
    entries = []
    counts = {"train": 0, "val": 0, "test": 0}
    for clip_dir in clip_dirs:
        gt = load_clip(clip_dir)
        triplet = dmod.synthesize_triplet(gt, scale, mag)
        dest = out_root / clip_dir.name
        dmod.write_triplet(triplet, dest)
        split = assign_split(clip_dir.name, ratios)
        counts[split] += 1
        entries.append(ManifestEntry(clip_dir.name, split, str(dest)))
    manifest = DatasetManifest(entries)
    manifest_path = out_root / "manifest.tsv"
    manifest.save(manifest_path)
    for split in ("train", "val", "test"):
        print(f"{split}: {counts[split]} clips")
    print(f"manifest: {manifest_path}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    manifest = DatasetManifest.load(args.manifest)
    model_cfg = cfgmod.model_config(cfg)
    train_cfg = cfgmod.train_config(cfg, stage=args.stage)
    provider = cfgmod.flow_provider(cfg)
    workdir = Path(args.workdir) / f"stage{args.stage}"
    if args.stage == 1:
        ckpt_path, _ = train_stage1(manifest, model_cfg, train_cfg, workdir, provider)
    else:
        if not args.init_checkpoint:
            raise ConfigError("stage 2 requires --init-checkpoint")
        ckpt_path, _ = train_stage2(args.init_checkpoint, manifest, train_cfg, workdir, provider)
    print(f"checkpoint: {ckpt_path}")
    return 0


def _parse_rings(spec):
    rings = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            lo, hi = part.split("-")
            rings.append(FovRing(float(lo), float(hi)))
        except (ValueError, TypeError) as e:
            raise UsageError(f"bad ring spec {part!r}: use inner-outer") from e
    if not rings:
        raise UsageError("empty ring list")
    return rings


def _eval_one(model, triplet, provider, rings):
    sr = super_resolve(model, triplet.lr, triplet.ref, provider)
    return fov_ring_metrics(sr, triplet.gt, rings)


def cmd_eval(args):
    cfg = _load_cfg(args)
    rings = _parse_rings(args.rings)
    payload = load_checkpoint(args.checkpoint)
    model = restore_model(payload)
    model.eval()
    provider = cfgmod.flow_provider(cfg)
    manifest = DatasetManifest.load(args.manifest)
    dataset = TripletDataset(manifest, args.split, scale=model.config.scale)
    if len(dataset) == 0:
        raise ConfigError(f"split {args.split!r} has no clips")
    report = MetricReport()
    for i in range(len(dataset)):
        clip_id = dataset.entries[i].clip_id
        report.per_clip[clip_id] = _eval_one(model, dataset.get(i), provider, rings)
    report.aggregate = aggregate_ring_results(report.per_clip)
    outdir = Path(args.workdir) / "eval"
    outdir.mkdir(parents=True, exist_ok=True)
    json_path = outdir / f"report_{args.split}.json"
    text_path = outdir / f"report_{args.split}.txt"
    json_path.write_text(report.to_json())
    text_path.write_text(report.to_text())
    print(report.to_text())
    print(f"reports: {json_path} {text_path}")
    return 0


def _comparison_grid(sr_frame, lr_frame, ref_frame):
    """SR | bicubic | reference side-by-side panel."""
    h, w = sr_frame.shape[:2]
    bicubic = dmod.resample_bicubic(lr_frame, h, w)
    ref_up = dmod.resample_bicubic(ref_frame, h, w)
    return np.concatenate([sr_frame, bicubic, ref_up], axis=1)


def cmd_infer(args):
    cfg = _load_cfg(args)
    payload = load_checkpoint(args.checkpoint)
    model = restore_model(payload)
    model.eval()
    provider = cfgmod.flow_provider(cfg)
    lr_clip = load_clip(args.lr_dir)
    ref_clip = load_clip(args.ref_dir)
    sr = super_resolve(model, lr_clip, ref_clip, provider)
    outdir = Path(args.workdir) / "infer"
    grid_dir = outdir / "grids"
    outdir.mkdir(parents=True, exist_ok=True)
    grid_dir.mkdir(parents=True, exist_ok=True)
    for t in range(len(sr)):
        dmod.save_frame(sr.frames[t], outdir / f"{t:06d}.png")
        grid = _comparison_grid(sr.frames[t], lr_clip.frames[t], ref_clip.frames[t])
        dmod.save_frame(grid, grid_dir / f"{t:06d}.png")
    print(f"wrote {len(sr)} SR frames to {outdir}")
    return 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    rows = [int(r) for r in args.rows.split(",") if r.strip()]
    if not rows:
        raise UsageError("empty ablation row list")
    manifest = DatasetManifest.load(args.manifest)
    base_cfg = cfgmod.model_config(cfg)
    train_cfg = cfgmod.train_config(cfg)
    provider = cfgmod.flow_provider(cfg)
    workdir = Path(args.workdir) / "ablation"
    results = run_ablation(manifest, base_cfg, rows, train_cfg, workdir, provider)
    table = ablation_table_text(results)
    table_path = Path(workdir) / "table.txt"
    table_path.parent.mkdir(parents=True, exist_ok=True)
    table_path.write_text(table)
    print(table)
    print(f"table: {table_path}")
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 2
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error[usage]: {e}", file=sys.stderr)
        return e.exit_code
    except ConfigError as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return e.exit_code
    except DataError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return 4
    except DualRefError as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
