"""Command-line front end.

Every command reads and writes the JSON formats of the library. Outputs are
written atomically. On failure a single JSON line
``{"error": <kind>, "message": <text>}`` goes to stderr and the exit status
is 1 (validation), 2 (I/O) or 3 (numerical).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .dataset import atomic_write_text, dumps_json, load_bundle, read_json, save_bundle
from .errors import DetEnsembleError, StorageError, ValidationError
from .evaluation import evaluate, format_table
from .fusion import load_weights, save_weights
from .pipeline import (PipelineConfig, cv_image, cv_video, fuse_bundle, nms_bundle,
                       refine_bundle, train_on)
from .synthetic import generate, inject_dropouts, load_profiles, make_scene, make_video

log = logging.getLogger("detensemble")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config; explicit flags take precedence")
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness (default 0)")
    p.add_argument("--threads", type=int, default=None, help="cap on per-image parallelism")
    p.add_argument("-v", "--verbose", action="store_true")
    g = p.add_argument_group("pipeline overrides")
    g.add_argument("--iou-threshold", type=float, help="clustering / NMS / pairing IoU")
    g.add_argument("--min-sources", type=int)
    g.add_argument("--rule", choices=("normalized", "linear"), help="coordinate rule")
    g.add_argument("--lr", type=float, help="SGD learning rate")
    g.add_argument("--val-fraction", type=float)
    g.add_argument("--patience", type=int)
    g.add_argument("--max-epochs", type=int)
    g.add_argument("--score-floor", type=float)
    g.add_argument("--iou-thresholds", type=float, nargs="+", help="evaluation IoUs")
    g.add_argument("--min-track-length", type=int)
    g.add_argument("--folds", type=int)
    g.add_argument("--train-size", type=int)
    g.add_argument("--segments", type=int)
    g.add_argument("--train-tail", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detensemble", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        _add_common(p)
        return p

    p = cmd("fuse-nms", "class-wise NMS over the pooled detections of every image")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = cmd("train", "learn detector weights from annotated images")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--train-ids", type=Path, required=True,
                   help="JSON list or one image_id per line")
    p.add_argument("--weights-out", type=Path, required=True)
    p.add_argument("--report-out", type=Path, help="default: <weights>.report.json")

    p = cmd("fuse", "weighted ensemble fusion of every image")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = cmd("refine", "two-stage tracking refinement of a video bundle")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = cmd("eval", "MAP of a detection bundle against ground truth")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--table", type=Path, help="default: <report>.txt")

    for name, help in (("cv-image", "k-fold harness on an image dataset"),
                       ("cv-video", "segment harness on a single video")):
        p = cmd(name, help)
        p.add_argument("--in", dest="inp", type=Path, required=True)
        p.add_argument("--report", type=Path, required=True)
        p.add_argument("--table", type=Path, help="default: <report>.txt")

    p = cmd("synth", "virtual detector outputs for a ground-truth bundle")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--profiles", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dropout-rate", type=float, default=0.0,
                   help="video only: chance per object and frame of a 1-3 frame dropout")

    p = cmd("make-scene", "random ground-truth image dataset")
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--out", type=Path, required=True)

    p = cmd("make-video", "random ground-truth video")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.from_dict(read_json(args.config)) if args.config else PipelineConfig()
    nms, fusion, train = cfg.nms, cfg.fusion, cfg.train
    refine, ev = cfg.refine, cfg.eval
    if args.iou_threshold is not None:
        nms = replace(nms, iou_threshold=args.iou_threshold)
        fusion = replace(fusion, iou_threshold=args.iou_threshold)
    if args.min_sources is not None:
        fusion = replace(fusion, min_sources=args.min_sources)
    if args.rule is not None:
        fusion = replace(fusion, coordinate_rule=args.rule)
        train = replace(train, prediction_rule=args.rule)
    for flag, name in (("lr", "learning_rate"), ("val_fraction", "val_fraction"),
                       ("patience", "patience"), ("max_epochs", "max_epochs")):
        if getattr(args, flag) is not None:
            train = replace(train, **{name: getattr(args, flag)})
    if args.score_floor is not None:
        ev = replace(ev, score_floor=args.score_floor)
    if args.iou_thresholds is not None:
        ev = replace(ev, iou_thresholds=tuple(args.iou_thresholds))
    if args.min_track_length is not None:
        refine = replace(refine, min_track_length=args.min_track_length)
    scalars = {k: getattr(args, k) for k in ("folds", "train_size", "segments", "train_tail",
                                             "seed", "threads") if getattr(args, k) is not None}
    return replace(cfg, nms=nms, fusion=fusion, train=train, refine=refine, eval=ev, **scalars)


def _check_paths(inputs: Sequence[Path | None], outputs: Sequence[Path | None]) -> None:
    ins = {os.path.realpath(p) for p in inputs if p is not None}
    outs = [os.path.realpath(p) for p in outputs if p is not None]
    if len(set(outs)) != len(outs):
        raise ValidationError("output paths must be distinct")
    for p in outs:
        if p in ins:
            raise ValidationError(f"output {p} would overwrite an input")


def _read_ids(path: Path) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    stripped = text.lstrip()
    if stripped.startswith("["):
        ids = json.loads(stripped)
        if not all(isinstance(i, str) for i in ids):
            raise ValidationError(f"{path}: image ids must be strings")
        return ids
    return [line.strip() for line in text.splitlines() if line.strip()]


def _table_path(report: Path, table: Path | None) -> Path:
    return table if table is not None else report.with_suffix(".txt")


def run(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    c = args.command
    if c == "fuse-nms":
        _check_paths([args.inp], [args.out])
        save_bundle(nms_bundle(load_bundle(args.inp), cfg.nms, cfg.threads), args.out)
    elif c == "train":
        report_out = args.report_out or args.weights_out.with_suffix(".report.json")
        _check_paths([args.inp, args.train_ids], [args.weights_out, report_out])
        bundle = load_bundle(args.inp)
        weights, report = train_on(bundle, _read_ids(args.train_ids), cfg)
        save_weights(weights, args.weights_out)
        atomic_write_text(report_out, dumps_json(report.to_dict()))
    elif c == "fuse":
        _check_paths([args.inp, args.weights], [args.out])
        bundle, weights = load_bundle(args.inp), load_weights(args.weights)
        if weights.coordinate_rule != cfg.fusion.coordinate_rule and args.rule is None:
            fusion = replace(cfg.fusion, coordinate_rule=weights.coordinate_rule)
        else:
            fusion = cfg.fusion
        save_bundle(fuse_bundle(bundle, weights, fusion, cfg.threads), args.out)
    elif c == "refine":
        _check_paths([args.inp], [args.out])
        save_bundle(refine_bundle(load_bundle(args.inp), cfg.refine), args.out)
    elif c == "eval":
        table = _table_path(args.report, args.table)
        _check_paths([args.inp, args.gt], [args.report, table])
        dets, gt = load_bundle(args.inp), load_bundle(args.gt)
        missing = {im.image_id for im in dets.images} - {im.image_id for im in gt.images}
        if missing:
            raise ValidationError(f"images without ground truth: {sorted(missing)[:3]}")
        truth = gt.subset(im.image_id for im in dets.images).ground_truth
        reports = {"all": evaluate(dets.detections, truth, cfg.eval)}
        present = sorted({d.detector_id for d in dets.detections})
        if len(present) > 1:
            for j in present:
                reports[dets.detector_names[j]] = evaluate(
                    [d for d in dets.detections if d.detector_id == j], truth, cfg.eval)
        names = gt.class_names
        atomic_write_text(args.report, dumps_json(
            {m: r.to_dict(names) for m, r in reports.items()}))
        atomic_write_text(table, format_table(reports, names))
    elif c in ("cv-image", "cv-video"):
        table = _table_path(args.report, args.table)
        _check_paths([args.inp], [args.report, table])
        bundle = load_bundle(args.inp)
        result = cv_image(bundle, cfg) if c == "cv-image" else cv_video(bundle, cfg)
        atomic_write_text(args.report, dumps_json({"config": cfg.to_dict(), **result.to_dict()}))
        atomic_write_text(table, result.table())
    elif c == "synth":
        _check_paths([args.gt, args.profiles], [args.out])
        gt = load_bundle(args.gt)
        out = generate(gt, load_profiles(args.profiles), cfg.seed)
        if args.dropout_rate > 0:
            out = inject_dropouts(out, cfg.seed, args.dropout_rate)
        save_bundle(out, args.out)
    elif c == "make-scene":
        save_bundle(make_scene(args.images, cfg.seed, n_classes=args.classes), args.out)
    elif c == "make-video":
        save_bundle(make_video(args.frames, cfg.seed, n_objects=args.objects), args.out)
    else:  # pragma: no cover - argparse restricts choices
        raise ValidationError(f"unknown command {c!r}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run(args)
    except DetEnsembleError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        # malformed config values surface here (e.g. wrong JSON types)
        print(json.dumps({"error": "validation", "message": str(exc)}), file=sys.stderr)
        return ValidationError.exit_code
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
