"""Command-line entry point.

Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import torch

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .core import InvalidInputError
from .data import DatasetLayout, ImageDecodeError, list_images, read_rgb, write_png8
from .depth import DepthProviderError, DepthProviderSpec, predict_depth, write_png16
from .metrics import MetricReport, score_pair
from .pipeline import DepthService, restore_image
from .trainer import StagingError, Trainer, load_models, trainer_from_checkpoint
from .wmoe import ExpertUsage

EXPECTED = (ConfigError, InvalidInputError, StagingError, CheckpointError, DepthProviderError,
            FileNotFoundError, FloatingPointError)


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _depth_spec(args) -> DepthProviderSpec:
    if args.depth_provider == "external":
        if not args.depth_command:
            raise ConfigError("--depth-provider external needs --depth-command")
        return DepthProviderSpec("external", args.depth_command)
    return DepthProviderSpec("stub")


def cmd_validate(args) -> int:
    rep = DatasetLayout(args.root).validate()
    for line in rep.lines():
        print(line)
    return 0 if rep.clean else 1


def cmd_train(args) -> int:
    layout = DatasetLayout(args.data)
    cfg: Optional[RunConfig] = None
    if args.config is not None or args.resume is None:
        cfg = load_config(args.config)
    depth = DepthService(_depth_spec(args), cache_dir=layout.depth_dir)
    data = layout.load_pairs()
    if args.resume is not None:
        trainer = trainer_from_checkpoint(args.resume, data, args.stage, depth=depth, out_dir=args.out, cfg=cfg)
    elif args.stage == 2:
        raise StagingError("stage 2 starts from a stage-1 checkpoint; pass --resume")
    else:
        from .pipeline import build_models
        trainer = Trainer(cfg, build_models(cfg), data, stage=1, depth=depth, out_dir=args.out)
    start = trainer.state.iteration
    trainer.run(args.iters, log_every=args.log_every)
    print(f"stage {trainer.state.stage}: iterations {start + 1}..{trainer.state.iteration} done; "
          f"outputs in {args.out}")
    return 0


def cmd_restore(args) -> int:
    models, _, meta = load_models(args.ckpt)
    if models.trained_stage < 2:
        print(f"warning: {args.ckpt} is a stage-{models.trained_stage} checkpoint; "
              "the degraded-only prior path is untrained", file=sys.stderr)
    cfg = RunConfig.from_dict(meta["config"])
    models.eval()
    depth = DepthService(_depth_spec(args), cache_dir=args.depth_cache)
    usage = ExpertUsage(cfg.num_experts)
    models.backbone.track_usage(usage)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    paths = list_images(args.inp)
    for p in paths:
        try:
            img = read_rgb(p)
            gen = torch.Generator().manual_seed(args.seed)
            restored = restore_image(models, img, cfg, depth, gen)
            write_png8(out_dir / (p.stem + ".png"), restored)
        except (ImageDecodeError, DepthProviderError, InvalidInputError) as exc:
            failures += 1
            _err(f"{p.name}: {exc}")
    if args.usage_csv:
        usage.write_csv(args.usage_csv)
    print(f"restored {len(paths) - failures}/{len(paths)} images into {out_dir}")
    return 1 if failures else 0


def cmd_evaluate(args) -> int:
    restored = {p.name: p for p in list_images(args.restored)}
    gts = {} if args.no_ref else {p.name: p for p in list_images(args.gt)}
    names = sorted(restored)
    if not args.no_ref:
        for n in sorted(set(restored) ^ set(gts)):
            print(f"warning: {n} has no counterpart, skipped", file=sys.stderr)
        names = [n for n in names if n in gts]
    report = MetricReport()
    failures = 0
    for n in names:
        try:
            gt = None if args.no_ref else read_rgb(gts[n])
            report.add(n, **score_pair(read_rgb(restored[n]), gt))
        except (ImageDecodeError, InvalidInputError) as exc:
            failures += 1
            _err(f"{n}: {exc}")
    if not report.rows:
        _err("nothing to evaluate")
        return 1
    report.write_csv(args.report)
    if args.plot:
        report.plot_histograms(args.plot)
    means = report.means()
    print(f"{len(report.rows)} images; " + ", ".join(f"{k}={v:.4f}" for k, v in means.items()))
    return 1 if failures else 0


def cmd_depth(args) -> int:
    spec = _depth_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for p in list_images(args.inp):
        try:
            write_png16(out / (p.stem + ".png"), predict_depth(read_rgb(p), spec).data)
        except (ImageDecodeError, DepthProviderError) as exc:
            failures += 1
            _err(f"{p.name}: {exc}")
    return 1 if failures else 0


def _add_depth_flags(sp):
    sp.add_argument("--depth-provider", choices=["stub", "external"], default="stub")
    sp.add_argument("--depth-command", help="external depth command, called as CMD in.png out.png")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uwrestore", description="Underwater image restoration toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("validate", help="check a paired dataset folder")
    sp.add_argument("root")
    sp.set_defaults(fn=cmd_validate)

    sp = sub.add_parser("train", help="run training stage 1 or 2")
    sp.add_argument("--stage", type=int, choices=[1, 2], required=True)
    sp.add_argument("--data", required=True, help="dataset root with input/ and gt/")
    sp.add_argument("--config", help="key=value config file (default: $UWRESTORE_CONFIG)")
    sp.add_argument("--resume", help="checkpoint to continue from; a stage-1 checkpoint starts stage 2")
    sp.add_argument("--out", default="runs", help="folder for checkpoints and logs")
    sp.add_argument("--iters", type=int, help="stop after this many more iterations")
    sp.add_argument("--log-every", type=int, default=0)
    _add_depth_flags(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("restore", help="restore a folder of images")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--depth-cache", help="folder for cached external depth maps")
    sp.add_argument("--usage-csv", help="write the expert selection histogram here")
    _add_depth_flags(sp)
    sp.set_defaults(fn=cmd_restore)

    sp = sub.add_parser("evaluate", help="score restored images")
    sp.add_argument("--restored", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--gt")
    g.add_argument("--no-ref", action="store_true")
    sp.add_argument("--report", default="metrics.csv")
    sp.add_argument("--plot", help="histogram figure path (.png or .svg)")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("depth", help="write 16-bit depth maps for a folder")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    _add_depth_flags(sp)
    sp.set_defaults(fn=cmd_depth)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except EXPECTED as exc:
        _err(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
