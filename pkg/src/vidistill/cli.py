"""``vidistill`` command-line entry point.

Exit codes: 0 success, 1 runtime failure (non-finite loss, corrupt file),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import classify as C
from . import data as D
from . import gradcheck as G
from . import io as IO
from . import model as M
from . import training as TR
from .errors import (ConfigError, ContractError, DimensionError, FormatError, SplitLeakageError,
                     TrainingAborted)

logger = logging.getLogger("vidistill")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, configuration or input files; maps to exit code 2."""


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _existing(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_dataset(path, what: str) -> D.VideoDataset:
    return D.load_dataset(_existing(path, what))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = D.SyntheticDatasetSpec(
        num_classes=args.classes, clips_per_class=args.per_class, frames_per_source=args.frames,
        height=args.height, width=args.width, noise_sigma=args.noise, seed=args.seed, variant_id=args.variant)
    ds = D.generate_dataset(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save_dataset(ds, out)
    print(f"wrote {out}: {len(ds)} clips, {spec.num_classes} classes, "
          f"dims 3x{spec.frames_per_source}x{spec.height}x{spec.width}, variant {spec.variant_id}")
    return EXIT_OK


def _training_inputs(ds: D.VideoDataset, cfg: IO.RunConfig):
    clips = D.sample_clips(ds, M.CLIP_FRAMES, "uniform", seed=cfg.train.seed)
    total = len(ds) * ds.videos.shape[2]
    pool_size = cfg.pool_size or min(total, 10 * len(ds))
    pool = D.build_frame_pool(ds.videos, pool_size, seed=[cfg.train.seed, 2], replace=pool_size > total)
    return clips, pool


def cmd_train(args) -> int:
    cfg_path = _existing(args.config, "config file")
    cfg = IO.load_run_config(cfg_path)
    base = cfg_path.parent
    if args.lam is not None:
        cfg.train.lam = args.lam
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.train.validate()
    if not cfg.train_data:
        raise UsageError(f"{cfg_path}: train_data is not set")
    ds = _load_dataset(base / cfg.train_data, "training dataset")
    out_dir = Path(args.output_dir) if args.output_dir else base / cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    clips, pool = _training_inputs(ds, cfg)
    arch = M.ArchConfig(height=clips.shape[-2], width=clips.shape[-1], widths=cfg.widths)

    def report(epoch, rows):
        print(f"epoch {epoch:3d}  recon {np.mean([r['recon_loss'] for r in rows]):.5f}  "
              f"teacher {np.mean([r['teacher_loss'] for r in rows]):.4f}  "
              f"gen {np.mean([r['gen_loss'] for r in rows]):.4f}  "
              f"real {np.mean([r['real_score'] for r in rows]):.3f}  "
              f"fake {np.mean([r['fake_score'] for r in rows]):.3f}", flush=True)

    try:
        model, log = TR.train(clips, pool, cfg.train, arch=arch, on_epoch=report)
    except TrainingAborted as exc:
        last = exc.record
        where = f"epoch {last['epoch']} step {last['step']}" if last else "none (failed on the first step)"
        print(f"error: training aborted: {exc}; last good step: {where}", file=sys.stderr)
        return EXIT_RUNTIME
    IO.save_checkpoint(model.all_params(), out_dir / "model.avdc")
    log.write_csv(out_dir / "train_log.csv")
    print(f"wrote {out_dir / 'model.avdc'} and {out_dir / 'train_log.csv'} ({len(log.records)} steps)")
    return EXIT_OK


def _encoder_for(checkpoint: Path, ds: D.VideoDataset) -> M.Params:
    model = M.AVDModel.from_params(IO.load_checkpoint(checkpoint))
    if not model.encoder:
        raise UsageError(f"{checkpoint}: no encoder parameters")
    h, w = ds.videos.shape[3:] if len(ds) else (0, 0)
    first = model.teacher.get("teacher.0.weight")
    if first is not None and len(ds) and first.shape[0] != 3 * h * w:
        raise UsageError(f"{checkpoint} was trained on {first.shape[0] // 3} pixels per channel; "
                         f"dataset frames are {h}x{w}")
    return model.encoder


def cmd_distill(args) -> int:
    ckpt = _existing(args.checkpoint, "checkpoint")
    ds = _load_dataset(args.dataset, "dataset")
    encoder = _encoder_for(ckpt, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips = D.sample_clips(ds, M.CLIP_FRAMES)
    images = C.represent_batch(C.RepresentationKind.DISTILLED, clips, encoder)
    for i, (img, label) in enumerate(zip(images, ds.labels)):
        IO.write_ppm(img, out / f"clip_{i}_class_{int(label)}.ppm")
    print(f"wrote {len(images)} images to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _existing(args.checkpoint, "checkpoint")
    train = _load_dataset(args.train, "training dataset")
    test = _load_dataset(args.test, "test dataset")
    encoder = _encoder_for(ckpt, train)
    config = C.ClassifierConfig(epochs=args.epochs, seed=args.seed, hflip=not args.no_hflip)
    if args.cross:
        target_train = _load_dataset(args.target_train, "target training dataset")
        target_test = _load_dataset(args.target_test, "target test dataset")
        report = C.cross_dataset_eval(encoder, train, test, target_train, target_test, config)
    else:
        report = C.compare_representations(train, test, encoder, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.csv").write_text(report.to_csv())
    (out / "confusion.txt").write_text(report.confusion_text())
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtype = {"f32": np.float32, "f64": np.float64}[args.dtype]
    tol = args.tol if args.tol is not None else (1e-3 if dtype == np.float32 else 1e-6)
    reports = G.run_suite(instances=args.instances, tol=tol, seed=args.seed, dtype=dtype)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(reports)} ops failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"all {len(reports)} ops passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidistill", description="Adversarial video distillation on synthetic clips.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic motion dataset")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=_positive_int, default=16)
    g.add_argument("--frames", type=_positive_int, default=48)
    g.add_argument("--height", type=_positive_int, default=32)
    g.add_argument("--width", type=_positive_int, default=32)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--variant", default="A")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train encoder, decoder and teacher from a config file")
    t.add_argument("config", help="key = value run configuration; paths inside are relative to it")
    t.add_argument("--lambda", dest="lam", type=float, help="override the reconstruction weight")
    t.add_argument("--epochs", type=int)
    t.add_argument("--output-dir", help="override output_dir from the config")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill", help="export one distilled PPM image per clip")
    d.add_argument("checkpoint")
    d.add_argument("dataset")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="compare classifiers on frame, mean and distilled inputs")
    e.add_argument("checkpoint")
    e.add_argument("train")
    e.add_argument("test")
    e.add_argument("--cross", action="store_true", help="in-domain vs cross-domain distilled accuracy")
    e.add_argument("--target-train")
    e.add_argument("--target-test")
    e.add_argument("--epochs", type=_positive_int, default=C.ClassifierConfig.epochs)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--no-hflip", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--tol", type=float)
    c.add_argument("--instances", type=_positive_int, default=20)
    c.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and args.cross and not (args.target_train and args.target_test):
        parser.error("--cross needs --target-train and --target-test")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SplitLeakageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DimensionError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
