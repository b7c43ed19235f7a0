"""``se2mitosis`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import ConfigError, RunConfig, default_config_text, load_config
from .io import DataError, load_annotations, load_folds, load_predictions, read_image, save_folds, write_pr_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "SE2MITOSIS_THREADS"
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp")

log = logging.getLogger("se2mitosis")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _image_paths(specs: List[str]) -> List[Path]:
    out = []
    for spec in specs:
        p = Path(spec)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.is_file():
            out.append(p)
        else:
            raise DataError(f"image path {spec} does not exist")
    if not out:
        raise DataError("no images found")
    return out


def cmd_split(args) -> int:
    from .data import make_folds

    try:
        ratios = tuple(float(v) for v in args.ratios.split(","))
    except ValueError as exc:
        raise UsageError(f"--ratios {args.ratios!r}: {exc}") from exc
    cases, _ = load_annotations(args.data)
    folds = make_folds(cases, args.folds, ratios, seed=args.seed)
    save_folds(args.out, [f.to_dict() for f in folds])
    print(f"wrote {len(folds)} fold(s) over {len(folds[0].assignment)} cases to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import SyntheticConfig, generate_synthetic_dataset

    cfg = SyntheticConfig(n_images=args.images, size=args.size, scanners=args.scanners,
                          targets_per_image=args.targets, imposters_per_image=args.imposters)
    ds = generate_synthetic_dataset(args.out, cfg, seed=args.seed, prefix=args.prefix)
    n_mit = sum(a.label == "mitosis" for a in ds.annotations)
    print(f"wrote {len(ds.cases)} images, {n_mit} mitoses, "
          f"{len(ds.annotations) - n_mit} imposters to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import Dataset, FoldSpec
    from .model import save_checkpoint
    from .training import train_fold

    cfg = _config(args)
    data_path = args.data or cfg.data.annotations
    folds_path = args.folds or cfg.data.folds
    if not data_path or not folds_path:
        raise UsageError("train needs --data and --folds (or [data] annotations/folds in the config)")
    folds = load_folds(folds_path)
    if not 0 <= args.fold < len(folds):
        raise UsageError(f"--fold {args.fold} outside the {len(folds)} folds in {folds_path}")
    train_cfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    dataset = Dataset.load(data_path)
    result = train_fold(dataset, FoldSpec.from_dict(args.fold, folds[args.fold]), train_cfg, cfg.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.se2w", result.params, cfg.model,
                    {"fold": args.fold, "threshold": result.threshold, "seed": train_cfg.seed,
                     "best_iteration": result.reports[-1].best_iteration})
    for r, rep in enumerate(result.reports):
        rep.write(out / f"report_round{r}.jsonl")
    print(f"fold {args.fold}: best iteration {result.reports[-1].best_iteration}, "
          f"val loss {result.reports[-1].best_val_loss:.4f}, threshold {result.threshold:.4f}")
    return EXIT_OK


def cmd_detect(args) -> int:
    from .detection import apply_threshold, ensemble_vote, extract_candidates
    from .io import save_predictions
    from .model import load_checkpoint
    from .training import make_scorer

    cfg = _config(args)
    models = [load_checkpoint(p) for p in args.checkpoint]
    thresholds = []
    op_file = json.loads(Path(args.operating_point_file).read_text()) if args.operating_point_file else None
    for k, (_, _, header) in enumerate(models):
        if args.threshold is not None:
            thresholds.append(args.threshold)
        elif op_file is not None:
            thresholds.append(float(op_file[k] if isinstance(op_file, list) else op_file["thresholds"][k]))
        else:
            thr = header.get("train", {}).get("threshold")
            if thr is None:
                raise UsageError(f"{args.checkpoint[k]} stores no operating point; pass --threshold")
            thresholds.append(float(thr))
    paths = _image_paths(args.images)
    lists = [[] for _ in models]
    for path in paths:
        img = read_image(path)
        for k, (params, mcfg, _) in enumerate(models):
            if args.patch_mode:
                pmap = _patch_mode_map(params, mcfg, img, path.stem)
            else:
                pmap = make_scorer(params, mcfg)(img, path.stem)
            lists[k].extend(apply_threshold(extract_candidates(pmap, cfg.detection.nms_radius), thresholds[k]))
    if len(models) == 1:
        dets = lists[0]
    else:
        dets = ensemble_vote(lists, cfg.detection.vote_radius, args.ensemble)
    save_predictions(args.out, dets)
    print(f"wrote {len(dets)} detection(s) for {len(paths)} image(s) to {args.out}")
    return EXIT_OK


def _patch_mode_map(params, mcfg, img, image_id):
    """Sliding-window reference: one patch forward per stride-8 position."""
    from .model import ProbabilityMap, forward_patch, normalize_input, receptive_field

    stride, offset = receptive_field(mcfg)
    x = normalize_input(img.transpose(2, 0, 1))
    p = mcfg.patch_size
    hm = (x.shape[1] - p) // stride + 1
    wm = (x.shape[2] - p) // stride + 1
    vals = np.zeros((hm, wm))
    for i in range(hm):
        crops = np.stack([x[:, i * stride:i * stride + p, j * stride:j * stride + p] for j in range(wm)])
        vals[i] = forward_patch(params, crops, mcfg)[0]
    return ProbabilityMap(vals, stride, offset, image_id)


def cmd_eval(args) -> int:
    from .detection import metrics_at, pr_curve

    dets = load_predictions(args.predictions)
    cases, anns = load_annotations(args.annotations)
    gts = {c.id: np.array([(a.x, a.y) for a in anns if a.image_id == c.id and a.label == "mitosis"]).reshape(-1, 2)
           for c in cases if c.labeled}
    known = set(gts)
    dets = [d for d in dets if d.image_id in known]
    thr = args.threshold if args.threshold is not None else 0.0
    m = metrics_at(dets, gts, thr, args.radius, macro=args.macro)
    curve = pr_curve(dets, gts, args.radius)
    result = {"precision": m.precision, "recall": m.recall, "f1": m.f1, "threshold": thr,
              "radius": args.radius, "detections": len(dets),
              "ground_truth": int(sum(len(g) for g in gts.values())), "macro": args.macro}
    text = json.dumps(result, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    if args.pr_out:
        write_pr_csv(args.pr_out, curve)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    from .augmentation import augment_preview

    cfg = _config(args)
    written = augment_preview(_image_paths(args.images), args.out, cfg.train.augmentation, args.seed, args.count)
    print(f"wrote {len(written)} patch(es) to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .data import Dataset, FoldSpec
    from .synthetic import rotate_dataset_90
    from .training import run_experiment

    cfg = _config(args)
    data_path = args.data or cfg.data.annotations
    if not data_path:
        raise UsageError("run needs --data (or [data] annotations in the config)")
    train_cfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    dataset = Dataset.load(data_path)
    folds = None
    folds_path = args.folds or cfg.data.folds
    if folds_path:
        folds = [FoldSpec.from_dict(i, f) for i, f in enumerate(load_folds(folds_path))]
    tests = {}
    test_path = args.test or cfg.data.test_annotations
    if test_path:
        test = Dataset.load(test_path)
        tests = {"test": test, "test_rot90": rotate_dataset_90(test)}
    summary = run_experiment(dataset, train_cfg, cfg.model, cfg.data.n_folds, args.out, tests,
                             cfg.detection.min_votes, folds)
    summary.pop("fold_results", None)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK if not summary["failures"] else EXIT_NUMERIC if any(
        "NonFinite" in v for v in summary["failures"].values()) else EXIT_DATA


def cmd_config(args) -> int:
    sys.stdout.write(default_config_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="se2mitosis", description="Rotation-invariant mitosis detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("split", help="scanner-stratified train/validation/test folds")
    p.add_argument("--data", required=True, help="annotation JSON")
    p.add_argument("--folds", type=int, default=5, help="number of folds (default 5, reference recipe)")
    p.add_argument("--ratios", default="0.8,0.1,0.1",
                   help="train,validation,test fractions (default 0.8,0.1,0.1, reference recipe)")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed (default 0)")
    p.add_argument("--out", required=True, help="fold JSON to write")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="render the synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="render seed (default 0)")
    p.add_argument("--images", type=int, default=200, help="number of images (default 200)")
    p.add_argument("--scanners", type=int, default=3, help="scanner color profiles, 1-4 (default 3)")
    p.add_argument("--size", type=int, default=256, help="image side in pixels (default 256)")
    p.add_argument("--targets", type=int, default=5, help="mitoses per image (default 5)")
    p.add_argument("--imposters", type=int, default=3, help="annotated imposters per image (default 3)")
    p.add_argument("--prefix", default="case", help="image id prefix (default 'case')")
    p.set_defaults(func=cmd_synth)

    train_defaults = ("defaults (reference recipe): batch 64 balanced 32/32, Adam lr=3e-4, "
                      "lr x0.8 every 5000 iterations, weight decay 2e-4, validation every 1000 "
                      "iterations, best-validation-loss snapshot, one hard-negative mining round "
                      "at score 0.5; print all keys with `se2mitosis config`")
    p = sub.add_parser("train", help="train one fold", description=train_defaults)
    p.add_argument("--config", help="INI run configuration (see `se2mitosis config`)")
    p.add_argument("--data", help="annotation JSON (overrides [data] annotations)")
    p.add_argument("--folds", help="fold JSON from `split` (overrides [data] folds)")
    p.add_argument("--fold", type=int, required=True, help="fold index")
    p.add_argument("--seed", type=int, help="training seed (overrides [train] seed, default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="dense detection with one model or a vote ensemble",
                       description="defaults (reference recipe): NMS radius 30 px, ensemble keeps "
                                   "detections with at least 2 votes")
    p.add_argument("--checkpoint", nargs="+", required=True, help="one or more .se2w checkpoints")
    p.add_argument("--images", nargs="+", required=True, help="image files or directories")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=float, help="score cutoff for every model")
    g.add_argument("--operating-point-file", help="JSON list of per-model thresholds")
    p.add_argument("--ensemble", type=int, default=2, metavar="MIN_VOTES",
                   help="minimum votes when several checkpoints are given (default 2, reference recipe)")
    p.add_argument("--patch-mode", action="store_true",
                   help="score by sliding 77x77 windows instead of the dense pass (slow; for checking)")
    p.add_argument("--config", help="INI run configuration for radii")
    p.add_argument("--out", required=True, help="predictions JSON to write")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="match predictions to annotations; metrics JSON and PR CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--radius", type=float, default=30.0, help="matching radius in px (default 30)")
    p.add_argument("--threshold", type=float, help="score cutoff before matching (default: keep all)")
    p.add_argument("--macro", action="store_true", help="average per-image metrics instead of pooling")
    p.add_argument("--pr-out", help="PR curve CSV (threshold,precision,recall,f1)")
    p.add_argument("--out", help="metrics JSON (also printed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment-preview", help="write augmented patches for inspection")
    p.add_argument("--images", nargs="+", required=True, help="image files or directories")
    p.add_argument("--config", help="INI run configuration ([augmentation] section)")
    p.add_argument("--seed", type=int, default=0, help="augmentation seed (default 0)")
    p.add_argument("--count", type=int, default=6, help="variants per image (default 6)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("run", help="all folds with mining, operating points and the vote ensemble",
                       description=train_defaults)
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--data", help="annotation JSON")
    p.add_argument("--folds", help="fold JSON (default: derived with the training seed)")
    p.add_argument("--test", help="held-out annotation JSON for the ensemble (also scored rotated by 90 degrees)")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("config", help="print a config file with every default")
    p.set_defaults(func=cmd_config)
    return parser


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError as exc:
        raise UsageError(f"{THREADS_ENV}={value!r} is not an integer") from exc
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[List[str]] = None) -> int:
    from .optim import NonFiniteGradientError
    from .training import NonFiniteLossError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (UsageError, ConfigError) as exc:
        print(f"se2mitosis: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, NonFiniteGradientError, FloatingPointError) as exc:
        print(f"se2mitosis: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"se2mitosis: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"se2mitosis: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
