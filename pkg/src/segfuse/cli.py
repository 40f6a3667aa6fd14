"""Command-line entry point: eval, fuse, confusion, pairs, augment, synth.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
Results go to stdout (or ``--out``) as JSON; logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from PIL import Image

from . import __version__
from .ap_eval import EvalConfig, evaluate
from .coco_io import load_dataset, load_results, results_to_list, write_dataset, write_results
from .confusion import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    ConfusionConfig,
    ConfusionMatrix,
    build_confusion,
    guided_pairs,
    pairs_to_list,
)
from .fusion import DEFAULT_TAU, filter_controller, fuse
from .mixup import (
    DEFAULT_BERNOULLI_P,
    DEFAULT_GAMMA,
    DEFAULT_RESIZE_RANGE,
    AugmentConfig,
    write_augmented,
)
from .synth import DEFAULT_PROFILES, NoiseProfile, gen_dataset, perturb_predictions

SCHEMA_VERSION = 1

log = logging.getLogger("segfuse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(payload: Dict, out: Optional[str]) -> None:
    text = json.dumps({"schema_version": SCHEMA_VERSION, **payload}, indent=1)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text + "\n")


def _unit(name: str):
    def parse(raw: str) -> float:
        try:
            v = float(raw)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {raw!r}") from None
        if not 0.0 <= v <= 1.0:
            raise argparse.ArgumentTypeError(f"{name} must lie in [0, 1], got {v}")
        return v

    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="segfuse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=0, help="global random seed (default: 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for fusion candidates (default: available CPUs)")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="stderr log level")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    e = sub.add_parser("eval", help="COCO-style AP of a results file")
    e.add_argument("--gt", required=True, help="dataset JSON")
    e.add_argument("--dets", required=True, help="results JSON")
    e.add_argument("--mode", choices=["box", "mask"], default="box")
    e.add_argument("--out")

    f = sub.add_parser("fuse", help="greedy per-image model selection against controller boxes")
    f.add_argument("--gt", required=True, help="dataset JSON (image list and categories)")
    f.add_argument("--models", nargs="+", default=[], metavar="FILE",
                   help="one results JSON per model, in model-index order")
    f.add_argument("--controller", required=True, help="controller detector results JSON")
    f.add_argument("--tau", type=_unit("tau"), default=DEFAULT_TAU,
                   help=f"controller confidence kept as pseudo ground truth (default: {DEFAULT_TAU})")
    f.add_argument("--class-agnostic", action="store_true",
                   help="ignore category labels when scoring candidates")
    f.add_argument("--trace-out", help="write the fusion trace JSON here")
    f.add_argument("--out", help="fused results JSON (default: stdout)")

    c = sub.add_parser("confusion", help="score-weighted confusion matrix of predictions vs ground truth")
    c.add_argument("--gt", required=True)
    c.add_argument("--dets", required=True)
    c.add_argument("--alpha", type=_unit("alpha"), default=DEFAULT_ALPHA,
                   help="a prediction is paired with every ground truth whose IoU exceeds "
                        f"alpha (default: {DEFAULT_ALPHA})")
    c.add_argument("--beta", type=_unit("beta"), default=DEFAULT_BETA,
                   help="entries above beta are reported as strongly confused pairs "
                        f"(default: {DEFAULT_BETA})")
    c.add_argument("--mode", choices=["box", "mask"], default="box",
                   help="IoU used for pairing (default: box)")
    c.add_argument("--out")

    pr = sub.add_parser("pairs", help="strongly confused category pairs from a confusion JSON")
    pr.add_argument("--confusion", required=True)
    pr.add_argument("--beta", type=_unit("beta"), default=DEFAULT_BETA,
                    help=f"pair threshold on normalized confusion (default: {DEFAULT_BETA})")
    pr.add_argument("--out")

    a = sub.add_parser("augment", help="confusion-guided mixup over a dataset")
    a.add_argument("--gt", required=True)
    a.add_argument("--images", required=True, help="directory holding the dataset's image files")
    a.add_argument("--pairs", required=True, help="pairs JSON from the 'pairs' subcommand")
    a.add_argument("--gamma", type=_unit("gamma"), default=DEFAULT_GAMMA,
                   help=f"blend weight of the input image (default: {DEFAULT_GAMMA})")
    a.add_argument("--resize-range", type=float, nargs=2, default=list(DEFAULT_RESIZE_RANGE),
                   metavar=("LO", "HI"),
                   help="canvas size as a fraction of the mean source size, sampled per axis "
                        f"(default: {DEFAULT_RESIZE_RANGE[0]} {DEFAULT_RESIZE_RANGE[1]})")
    a.add_argument("--bernoulli-p", type=_unit("bernoulli-p"), default=DEFAULT_BERNOULLI_P,
                   help="probability that a sample is replaced by a blend "
                        f"(default: {DEFAULT_BERNOULLI_P})")
    a.add_argument("--no-photometric", action="store_true",
                   help="disable brightness and colour jitter")
    a.add_argument("--seed", dest="sub_seed", type=int, help="overrides the global seed")
    a.add_argument("--out-dir", required=True)

    s = sub.add_parser("synth", help="synthetic dataset, images and noisy model results")
    s.add_argument("--seed", dest="sub_seed", type=int, help="overrides the global seed")
    s.add_argument("--images", type=int, default=20, help="number of images (default: 20)")
    s.add_argument("--categories", type=int, default=3, help="number of categories (default: 3)")
    s.add_argument("--profiles", help="JSON list of noise profiles (default: three built-in)")
    s.add_argument("--out-dir", required=True)
    return p


def _cmd_eval(args) -> None:
    dataset = load_dataset(args.gt)
    dets = load_results(args.dets, dataset)
    report = evaluate(dataset, dets, EvalConfig(mode=args.mode))
    _emit({"mode": args.mode, **report.to_dict()}, args.out)


def _cmd_fuse(args) -> None:
    if not args.models:
        raise UsageError("fuse: at least one --models file is required")
    dataset = load_dataset(args.gt)
    models = [load_results(path, dataset) for path in args.models]
    pseudo = filter_controller(load_results(args.controller, dataset), args.tau)
    fused, trace = fuse(models, pseudo, class_agnostic=args.class_agnostic, workers=args.threads)
    log.info("fused %d images from %d models", len(fused), len(models))
    if args.trace_out:
        payload = {"schema_version": SCHEMA_VERSION, "tau": args.tau,
                   "class_agnostic": args.class_agnostic, "models": list(args.models),
                   **trace.to_dict()}
        Path(args.trace_out).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    if args.out:
        write_results(fused, args.out)
    else:
        sys.stdout.write(json.dumps(results_to_list(fused), separators=(",", ":")) + "\n")


def _cmd_confusion(args) -> None:
    dataset = load_dataset(args.gt)
    dets = load_results(args.dets, dataset)
    matrix = build_confusion(dataset, dets, ConfusionConfig(args.alpha, args.beta, args.mode))
    _emit({"alpha": args.alpha, "beta": args.beta, "mode": args.mode, **matrix.to_dict(),
           "pairs": pairs_to_list(guided_pairs(matrix, args.beta))}, args.out)


def _cmd_pairs(args) -> None:
    with open(args.confusion, encoding="utf-8") as fh:
        matrix = ConfusionMatrix.from_dict(json.load(fh))
    _emit({"beta": args.beta, "pairs": pairs_to_list(guided_pairs(matrix, args.beta))}, args.out)


def _load_pairs(path: str):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    raw = data["pairs"] if isinstance(data, dict) else data
    return {(int(i), int(j)) for i, j in raw}


def _cmd_augment(args, seed: int) -> None:
    dataset = load_dataset(args.gt)
    config = AugmentConfig(gamma=args.gamma, resize_range=tuple(args.resize_range),
                           bernoulli_p=args.bernoulli_p, seed=seed)
    if args.no_photometric:
        config = config.without_photometrics()
    manifest = write_augmented(dataset, args.images, _load_pairs(args.pairs), config, args.out_dir)
    samples = manifest["samples"]
    _emit({
        "out_dir": str(args.out_dir),
        "samples": len(samples),
        "augmented": sum(s["augmented"] for s in samples),
        "errors": sum(s["error"] is not None for s in samples),
    }, None)


def _cmd_synth(args, seed: int) -> None:
    if args.images < 1 or args.categories < 1:
        raise UsageError("synth: --images and --categories must be positive")
    profiles: List[NoiseProfile] = list(DEFAULT_PROFILES)
    if args.profiles:
        with open(args.profiles, encoding="utf-8") as fh:
            profiles = [NoiseProfile.from_dict(d) for d in json.load(fh)]
    out = Path(args.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    dataset, pixels = gen_dataset(seed, args.images, args.categories)
    dataset.images = [replace(im, file_name=f"images/{im.file_name}") for im in dataset.images]
    write_dataset(dataset, out / "dataset.json")
    for image_id, px in pixels.items():
        Image.fromarray(px).save(out / "images" / f"{image_id}.png")
    files = []
    for m, profile in enumerate(profiles):
        name = f"model_{m}.json"
        write_results(perturb_predictions(dataset, profile, seed + m + 1), out / name)
        files.append(name)
    _emit({"out_dir": str(out), "dataset": "dataset.json", "results": files,
           "profiles": [p.to_dict() for p in profiles]}, None)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    seed = args.sub_seed if getattr(args, "sub_seed", None) is not None else args.seed
    try:
        if args.command == "eval":
            _cmd_eval(args)
        elif args.command == "fuse":
            _cmd_fuse(args)
        elif args.command == "confusion":
            _cmd_confusion(args)
        elif args.command == "pairs":
            _cmd_pairs(args)
        elif args.command == "augment":
            _cmd_augment(args, seed)
        elif args.command == "synth":
            _cmd_synth(args, seed)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except (ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
