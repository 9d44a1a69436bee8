"""Command-line entry point: ``sketchkp {make-edgemaps,train,eval,predict,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, load_config, parse_overrides

log = logging.getLogger("sketchkp")

EXIT_OK, EXIT_ERROR, EXIT_MISSING = 0, 1, 2

# fields that change parameter shapes; a checkpoint only loads under matching values
ARCH_KEYS = (
    "encoder_backbone", "encoder_channels", "encoder_stride", "image_size",
    "locator_scales", "destyle_identity",
)


class CommandError(RuntimeError):
    pass


def _config(args) -> RunConfig:
    return load_config(args.config, args.overrides)


def _index(config: RunConfig):
    from .data import load_annotations

    if not config.dataset:
        raise CommandError("no dataset configured (set `dataset` in the config or override dataset=PATH)")
    if not Path(config.dataset).exists():
        raise CommandError(f"dataset index not found: {config.dataset}")
    return load_annotations(config.dataset)


def cmd_make_edgemaps(args) -> int:
    from .data import CacheMiss, Detector, cache_path, synthesize_edgemap
    from .data.edgemaps import read_rgb

    config = _config(args)
    cache_dir = args.cache_dir or config.cache_dir or os.environ.get("SKETCHKP_CACHE")
    if not cache_dir:
        raise CommandError("no cache dir: pass --cache-dir, set cache_dir, or export SKETCHKP_CACHE")
    index = _index(config)
    detector = Detector(args.detector)
    generated = skipped = 0
    missing = []
    for im in index.images:
        if detector is Detector.CANNY:
            if cache_path(cache_dir, im.stem, args.slot).exists():
                skipped += 1
                continue
            synthesize_edgemap(read_rgb(im.image_path), detector, cache_dir, im.stem,
                               slot=args.slot, low=config.canny_low, high=config.canny_high)
            generated += 1
        else:
            try:
                synthesize_edgemap(None, detector, cache_dir, im.stem)
                skipped += 1
            except CacheMiss:
                missing.append(str(cache_path(cache_dir, im.stem, detector.value.split("_")[1])))
    print(f"generated={generated} skipped={skipped} missing={len(missing)}")
    if missing:
        print("missing precomputed edgemaps:", file=sys.stderr)
        for path in missing:
            print(path, file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train

    config = _config(args)
    index = _index(config)
    ckpt = train(config, index, log_path=args.log, progress=args.progress)
    print(Path(config.run_dir) / "final.pt")
    log.info("trained %d iterations", ckpt.iteration)
    return EXIT_OK


def _checkpoint_and_config(args):
    from .trainer import Checkpoint

    if not Path(args.checkpoint).exists():
        raise CommandError(f"checkpoint not found: {args.checkpoint}")
    ckpt = Checkpoint.load(args.checkpoint)
    if args.config:
        config = _config(args)
        stored = ckpt.config.to_dict()
        diff = [k for k in ARCH_KEYS if stored[k] != config.to_dict()[k]]
        if diff:
            raise CommandError(
                "checkpoint/config mismatch on " + ", ".join(f"{k} ({stored[k]!r} vs {getattr(config, k)!r})" for k in diff)
            )
    else:
        config = apply_overrides(ckpt.config, parse_overrides(args.overrides))
    return ckpt, config


def cmd_eval(args) -> int:
    from .evaluator import evaluate

    ckpt, config = _checkpoint_and_config(args)
    index = _index(config)
    reports = [evaluate(ckpt, index, p, config) for p in args.protocol]
    for report in reports:
        text = report.to_json()
        if args.out:
            out = Path(args.out)
            if len(reports) > 1:
                out = out.with_name(f"{out.stem}.{report.protocol}{out.suffix}")
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(text)
        sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    import torch

    from .data import ImageStore, load_annotations, norm_to_pixel, support_views
    from .data.edgemaps import read_rgb
    from .plotting import render_overlay

    ckpt, config = _checkpoint_and_config(args)
    support_index = load_annotations(args.support)
    if len(support_index.images) < 1:
        raise CommandError(f"{args.support}: no support images")
    ids = list(range(len(support_index.keypoint_names)))
    support = [support_views(im, config)[0] for im in support_index.images]
    model = ckpt.model(config)
    store = ImageStore(support_index, config)
    cs, vs = zip(*(store.keypoints(im, ids) for im in support))
    query_paths = [str(Path(q)) for q in args.queries]
    for q in query_paths:
        if not Path(q).exists():
            raise CommandError(f"query image not found: {q}")
    pred, per_scale, proto_vis = model.predict(
        store.batch(support), torch.stack(cs), torch.stack(vs), torch.stack([store.tensor(q) for q in query_paths])
    )
    results = []
    for m, q in enumerate(query_paths):
        rgb = read_rgb(q)
        h, w = rgb.shape[:2]
        points = [list(norm_to_pixel(tuple(p), w, h)) for p in pred[m].tolist()]
        entry = {"image": q, "keypoints": points, "visible": [bool(v) for v in proto_vis.tolist()]}
        if args.debug_scales:
            entry["per_scale"] = {
                str(s): [list(norm_to_pixel(tuple(p), w, h)) for p in per_scale[i, m].tolist()]
                for i, s in enumerate(config.locator_scales)
            }
        if args.overlay_dir:
            shown = np.array([p for p, v in zip(points, proto_vis.tolist()) if v]).reshape(-1, 2)
            out = Path(args.overlay_dir) / f"{Path(q).stem}.overlay.png"
            # no ground truth at prediction time: discs mark the predicted points too
            render_overlay(rgb, shown, shown, out)
            entry["overlay"] = str(out)
        results.append(entry)
    doc = {"keypoint_names": support_index.keypoint_names, "predictions": results}
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluator import format_table, load_reports
    from .plotting import plot_reports

    reports = load_reports(args.reports)
    table = format_table(reports)
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table)
    figure = args.figure or (Path(args.out).with_suffix(".png") if args.out else None)
    if figure:
        plot_reports(reports, figure)
        print(f"figure: {figure}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sketchkp", description="Few-shot keypoint detection on photos from annotated sketches.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, required=False):
        p.add_argument("--config", required=required, help="TOML run config")
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="config overrides (dotted keys)")

    p = sub.add_parser("make-edgemaps", help="fill the edgemap cache")
    with_config(p, required=True)
    p.add_argument("--detector", default="canny_builtin",
                   choices=["canny_builtin", "external_S", "external_S1", "external_S2"])
    p.add_argument("--cache-dir", help="defaults to cache_dir from the config, then $SKETCHKP_CACHE")
    p.add_argument("--slot", default="S", choices=["S", "S1", "S2"], help="cache slot for canny output")
    p.set_defaults(func=cmd_make_edgemaps)

    p = sub.add_parser("train", help="episodic training")
    with_config(p, required=True)
    p.add_argument("--log", help="loss log path (default: <run_dir>/train_log.jsonl)")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PCK under one or more protocols")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", nargs="+", default=["seen_base"],
                   choices=["seen_base", "seen_novel", "unseen_base", "unseen_novel"])
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="localize support keypoints on query images")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support", required=True, help="annotation JSON of the K support sketches")
    p.add_argument("--queries", nargs="+", required=True, help="query image paths")
    p.add_argument("--out", help="prediction JSON path")
    p.add_argument("--overlay-dir", help="write overlay PNGs here")
    p.add_argument("--debug-scales", action="store_true", help="include per-scale decoded points")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="render eval reports as a table and figure")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.add_argument("--out", help="table text path (figure defaults alongside as .png)")
    p.add_argument("--figure", help="figure PNG path")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
