"""
Command-line entry point: ``python -m evsign <command> [options]``.

Exit codes: 0 on success, 1 on a usage error, 2 when the command fails at runtime
(bad input files, missing corpus, failed gradient checks, ...).
"""
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import torch
from loguru import logger

from evsign.config import (
    add_config_args, add_corpus_args, add_encode_args, add_evaluation_args, add_train_args, load_config,
    overrides_from_args,
)
from evsign.baselines import frame_majority_report
from evsign.constants import PRECISION_TO_TYPE
from evsign.data_kits.event_dataset import EventClipDataset
from evsign.data_kits.event_io import VoxelGrid, encode_clip, parse_event_file, segments_for_window, write_voxel
from evsign.data_kits.synth_data import generate_corpus, load_corpus
from evsign.errors import ConfigError, EvSignError
from evsign.gradcheck import SUITES, run_suites
from evsign.helpers import apply_thread_cap, set_reproducible
from evsign.inference import Recognizer
from evsign.modules.sparse_conv import FlopsReport, SparseBackbone
from evsign.training.trainer import evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors by exception instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="evsign", description="Event-camera sign language recognition and translation")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    sub.required = True

    p = sub.add_parser("synth", help="Generate the synthetic event corpus.")
    add_corpus_args(add_config_args(p))

    p = sub.add_parser("encode", help="Encode one event file into an EVVG voxel grid.")
    add_encode_args(add_config_args(p))

    p = sub.add_parser("train", help="Train under the configured protocol (s2g or s2gt).")
    add_train_args(add_config_args(p))
    p.add_argument("--seed", type=int, default=None, help="Override the training seed.")

    p = sub.add_parser("eval", help="Score a split with a checkpoint.")
    add_evaluation_args(add_config_args(p))

    p = sub.add_parser("gradcheck", help="Run the finite-difference gradient suites.")
    add_config_args(p)
    p.add_argument("--suite", action="append", choices=sorted(SUITES), default=None,
                   help="Run only this suite (repeatable). Default: all.")
    p.add_argument("--seed", type=int, default=0, help="Seed for the random test problems.")

    p = sub.add_parser("mask-dump", help="Write the gloss-aware mask of every clip as an EVVG file.")
    add_evaluation_args(add_config_args(p))

    p = sub.add_parser("flops", help="Report executed vs dense-equivalent backbone multiply-adds.")
    add_config_args(p)
    p.add_argument("--split", type=str, default="dev", choices=["train", "dev", "test"])
    p.add_argument("--limit", type=int, default=None, help="Only process the first N clips.")

    p = sub.add_parser("baseline", help="Score a split with the frame-majority nearest-neighbour recognizer.")
    add_config_args(p)
    p.add_argument("--split", type=str, default="dev", choices=["dev", "test"])
    p.add_argument("--limit", type=int, default=None, help="Only score the first N clips.")
    p.add_argument("--width", type=int, default=5, help="Majority filter width in segments (odd).")
    return parser


def setup_logging(verbose: bool):
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO",
               format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}")


def _config(args):
    overrides = list(args.overrides or [])
    if args.command != "gradcheck":
        overrides = overrides_from_args(args)
    return load_config(args.config, overrides)


# ============================ commands ============================

def cmd_synth(args, cfg) -> int:
    out = args.out or cfg.paths.corpus_dir
    corpus = generate_corpus(cfg.synth, cfg.seed, out)
    counts = {name: len(recs) for name, recs in corpus.splits.items()}
    print(json.dumps({"corpus": str(corpus.root), "splits": counts, "glosses": len(corpus.gloss_vocab) - 1}))
    return EXIT_OK


def cmd_encode(args, cfg) -> int:
    stream = parse_event_file(Path(args.input).read_bytes())
    window_us = args.window_us if args.window_us is not None else cfg.event.window_us
    if args.segments is not None:
        P = args.segments
    elif window_us is not None:
        P = segments_for_window(stream, window_us)
    else:
        P = cfg.event.n_segments
    B = args.bins if args.bins is not None else cfg.event.n_bins
    grid = encode_clip(stream, P, B)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(write_voxel(grid))
    logger.info(f"Encoded {len(stream)} events into {tuple(grid.data.shape)} voxels at {out}")
    print(json.dumps({"out": str(out), "shape": list(grid.data.shape), "events": len(stream)}))
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    trainer = train(cfg, resume=args.resume, output_dir=args.output_dir)
    print(json.dumps({"output_dir": str(trainer.output_dir), "best_dev_wer": trainer.best_wer,
                      "epochs": len(trainer.history)}))
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    report = evaluate(cfg, args.checkpoint, args.split, args.output_dir, args.limit)
    print(report.to_json())
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    results = run_suites(args.suite, seed=args.seed)
    for r in results:
        print(f"{r.name:<24} max_rel_err={r.max_rel_error:.3e} tol={r.tolerance:g} "
              f"{'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"{len(failed)} gradient check(s) above tolerance: {failed}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_mask_dump(args, cfg) -> int:
    if cfg.temporal.mask_mode == "off":
        raise ConfigError("temporal.mask_mode=off builds no mask to dump")
    corpus = load_corpus(cfg.paths.corpus_dir)
    recognizer = Recognizer.from_checkpoint(cfg, args.checkpoint, corpus)
    e = cfg.event
    dataset = EventClipDataset(corpus, args.split, e.n_segments, e.n_bins, e.window_us, cfg.backbone.threshold,
                               limit=args.limit, dtype=PRECISION_TO_TYPE[cfg.train.precision])
    out = Path(args.output_dir or cfg.paths.output_dir) / "masks" / args.split
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        sample = dataset[i]
        mask = recognizer.predict(sample).mask
        grid = VoxelGrid(mask.detach().to(torch.float32).reshape(1, 1, *mask.shape))
        (out / f"{sample.clip_id}.evvg").write_bytes(write_voxel(grid))
    logger.info(f"Wrote {len(dataset)} masks to {out}")
    print(json.dumps({"out": str(out), "clips": len(dataset)}))
    return EXIT_OK


def cmd_flops(args, cfg) -> int:
    corpus = load_corpus(cfg.paths.corpus_dir)
    set_reproducible(cfg.seed)
    b, e = cfg.backbone, cfg.event
    backbone = SparseBackbone(e.n_bins, list(b.channels), list(b.strides), b.kernel_size, b.threshold)
    dataset = EventClipDataset(corpus, args.split, e.n_segments, e.n_bins, e.window_us, b.threshold,
                               limit=args.limit)
    if len(dataset) == 0:
        raise ConfigError(f"split {args.split!r} has no clips")
    reports = [backbone.flops(dataset[i].sparse) for i in range(len(dataset))]
    total = FlopsReport(sum(r.sparse_flops for r in reports), sum(r.dense_equivalent_flops for r in reports))
    mean_ratio = sum(r.ratio for r in reports) / len(reports)
    print(json.dumps({"split": args.split, "clips": len(reports), "mean_ratio": mean_ratio, **total.to_dict()}))
    return EXIT_OK


def cmd_baseline(args, cfg) -> int:
    corpus = load_corpus(cfg.paths.corpus_dir)
    report = frame_majority_report(cfg, corpus, args.split, args.limit, width=args.width)
    print(report.to_json())
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "encode": cmd_encode,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "mask-dump": cmd_mask_dump,
    "flops": cmd_flops,
    "baseline": cmd_baseline,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    setup_logging(args.verbose)
    try:
        apply_thread_cap()
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (EvSignError, ValueError, OSError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
