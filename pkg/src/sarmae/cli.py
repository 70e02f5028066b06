"""``sarmae`` command line: data generation, pre-training, export, fine-tuning, evaluation, images.

Any config field can be overridden with a flag named by its dotted path,
e.g. ``--pretrain.epochs 5`` or ``--model.encoder.dim=64``; values are JSON.

Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint error, 1 other.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cocoeval
from . import config as C
from . import data as D
from . import train as TR
from .checkpoint import Checkpoint
from .detector import Detector
from .errors import CheckpointError, ConfigError, DataError
from .mae import MAE, export_encoder, reconstruct_image

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_config(out: Path, cfg: C.RunConfig) -> None:
    _write_text(out / "config.json", C.dumps(cfg))


def _load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)


def _print_counts(split: str, counts: list) -> None:
    names = D.CLASS_NAMES
    body = " ".join(f"{names[i] if i < len(names) else i}={c}" for i, c in enumerate(counts))
    print(f"{split}: {body}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: C.RunConfig) -> int:
    out = Path(args.out)
    spec = cfg.data.scene
    train_n = cfg.data.train_images if args.images is None else args.images
    val_n = cfg.data.val_images if args.val_images is None else args.val_images
    splits = [("train", train_n, 0, True), ("val", val_n, cfg.data.val_offset, True)]
    if args.unlabeled:
        splits.append(("unlabeled", args.unlabeled, 2 * cfg.data.val_offset, False))
    for split, count, start, labeled in splits:
        if count <= 0:
            continue
        D.write_dataset(out, split, spec, count, start_index=start, with_labels=labeled)
        if labeled:
            _print_counts(split, D.read_ledger(out, split)["class_counts"])
        else:
            print(f"{split}: {count} images")
    _write_config(out, cfg)
    return EXIT_OK


def cmd_pretrain(args, cfg: C.RunConfig) -> int:
    dataset = D.read_dataset(args.data, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, cfg)
    with open(out / "pretrain.log", "w", encoding="utf-8") as log:
        result = TR.pretrain(cfg, dataset, out_dir=out, on_step=lambda line: log.write(line + "\n"))
    print(f"pretrain: {len(result.log)} steps, final loss {result.losses[-1]:.6f}, "
          f"checkpoint {out / 'mae.mfst'}")
    return EXIT_OK


def cmd_export(args, cfg: C.RunConfig) -> int:
    ckpt = export_encoder(_load_checkpoint(args.checkpoint))
    path = ckpt.save(args.out)
    print(f"encoder: {len(ckpt.tensors)} tensors, {path}")
    return EXIT_OK


def cmd_finetune(args, cfg: C.RunConfig) -> int:
    encoder = None
    if args.encoder:
        encoder = _load_checkpoint(args.encoder)
        TR.check_encoder(cfg, encoder)
    dataset = D.read_dataset(args.data, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, cfg)
    with open(out / "finetune.log", "w", encoding="utf-8") as log:
        result = TR.finetune(cfg, dataset, encoder, out_dir=out, on_step=lambda line: log.write(line + "\n"))
    print(f"finetune: {len(result.log)} steps, final loss {result.losses[-1]:.6f}, "
          f"checkpoint {out / 'detector.mfst'}")
    return EXIT_OK


def cmd_eval(args, cfg: C.RunConfig) -> int:
    dataset = D.read_dataset(args.data, args.split)
    category_ids = [c["id"] for c in dataset.categories]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.detections:
        if str(args.detections).endswith(".json"):
            dets = cocoeval.read_detections_json(args.detections, category_ids)
        else:
            dets = cocoeval.read_detections_text(args.detections)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --detections")
        model = Detector.from_checkpoint(_load_checkpoint(args.checkpoint))
        dets = TR.as_eval_dets(TR.run_detector(model, dataset, args.score_thresh))
    cocoeval.write_detections_text(out / "detections.txt", dets)
    cocoeval.write_detections_json(out / "detections.json", dets, category_ids)
    metrics = cocoeval.summarize(dets, TR.ground_truth(dataset), TR.eval_config(cfg),
                                 num_classes=len(category_ids))
    cocoeval.write_report(out / "metrics", metrics)
    sys.stdout.write(cocoeval.format_report(metrics))
    return EXIT_OK


def _image_paths(items) -> list:
    paths = []
    for item in items:
        p = Path(item)
        paths.extend(sorted(p.glob("*.pgm")) if p.is_dir() else [p])
    if not paths:
        raise DataError("no input images")
    return paths


def cmd_reconstruct(args, cfg: C.RunConfig) -> int:
    model = MAE.from_checkpoint(_load_checkpoint(args.checkpoint))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _image_paths(args.images)
    for k, path in enumerate(paths):
        image = D.load_image(path)
        masked, recon, original = reconstruct_image(image, model, args.seed + k)
        for tag, arr in (("masked", masked), ("recon", recon), ("original", original)):
            D.write_pgm(out / f"{path.stem}_{tag}.pgm", D.to_uint8(arr))
    print(f"reconstruct: {3 * len(paths)} images written to {out}")
    return EXIT_OK


def cmd_detect(args, cfg: C.RunConfig) -> int:
    model = Detector.from_checkpoint(_load_checkpoint(args.checkpoint))
    K = model.config.num_classes
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _image_paths(args.images)
    dets = []
    for k, path in enumerate(paths):
        pixels = D.read_pgm(path)
        d = model.detect(D.load_image(path), k, args.score_thresh)
        dets.append(cocoeval.ImageDets(k, d.boxes, d.scores, d.labels))
        D.write_pgm(out / f"{path.stem}_det.pgm", D.draw_boxes(pixels, d.boxes, d.labels, K))
    cocoeval.write_detections_text(out / "detections.txt", dets)
    _write_text(out / "images.txt", "".join(f"{k} {p}\n" for k, p in enumerate(paths)))
    print(f"detect: {sum(len(d.scores) for d in dets)} detections over {len(paths)} images")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sarmae", description=__doc__.split("\n")[0],
                                     epilog="Config fields are overridable as --<dotted.path> VALUE.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default="paper-base", choices=C.PRESETS,
                        help="built-in defaults to start from (default: paper-base)")
    common.add_argument("--config", help="JSON config file overlaid on the preset")
    common.add_argument("--print-config", action="store_true",
                        help="print the resolved configuration and exit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic train/val splits")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, help="training images (default: data.train_images)")
    p.add_argument("--val-images", type=int, help="validation images (default: data.val_images)")
    p.add_argument("--unlabeled", type=int, default=0, help="extra unlabeled images for pre-training")
    p.add_argument("--seed", type=int, help="scene seed (same as --data.scene.seed)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="MAE pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("export-encoder", parents=[common], help="keep only the encoder of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("finetune", parents=[common], help="train the detector")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--encoder", help="exported encoder checkpoint (omit to train from scratch)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="COCO-style metrics on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--checkpoint", help="detector checkpoint")
    p.add_argument("--detections", help="evaluate an existing detections file (.txt or .json)")
    p.add_argument("--score-thresh", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", parents=[common], help="masked / reconstructed / original images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="mask seed for the first image")
    p.add_argument("images", nargs="+", help="PGM files or directories")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("detect", parents=[common], help="detection overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--score-thresh", type=float)
    p.add_argument("images", nargs="+", help="PGM files or directories")
    p.set_defaults(func=cmd_detect)
    return parser


def split_overrides(argv: list) -> tuple[list, dict]:
    """Separate ``--a.b VALUE`` / ``--a.b=VALUE`` tokens from the rest of ``argv``.

    Real options never contain a dot, so any dotted long option is a config path.
    """
    rest, out, i = [], {}, 0
    while i < len(argv):
        tok = argv[i]
        key = tok[2:].split("=", 1)[0] if tok.startswith("--") else ""
        if "." not in key:
            rest.append(tok)
            i += 1
            continue
        if "=" in tok:
            text = tok.split("=", 1)[1]
            i += 1
        else:
            if i + 1 >= len(argv):
                raise ConfigError(f"missing value for --{key}")
            text = argv[i + 1]
            i += 2
        out[key] = C.parse_value(text)
    return rest, out


def resolve_config(args, overrides: dict) -> C.RunConfig:
    cfg = C.load_preset(args.preset)
    if args.config:
        cfg = C.load_file(args.config, cfg)
    overrides = dict(overrides)
    if args.command == "gen-data" and args.seed is not None:
        overrides["data.scene.seed"] = args.seed
    elif args.command in ("pretrain", "finetune") and args.seed is not None:
        cfg = C.from_dict({"seed": args.seed}, cfg)
    return C.apply_overrides(cfg, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        rest, overrides = split_overrides(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args = parser.parse_args(rest)
    try:
        cfg = resolve_config(args, overrides)
        if args.print_config:
            sys.stdout.write(C.dumps(cfg))
            return EXIT_OK
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
