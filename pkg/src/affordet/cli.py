"""Command-line entry point: ``affordet <command> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .checkpoint import load_arrays
from .core import deterministic_requested
from .data import generate_synthetic
from .data.augment import resize
from .data.convert import masks_to_heatmaps
from .data.io import DatasetError, load_dataset, read_pgm, read_ppm, write_ppm
from .metrics import EvalReport, write_per_image_csv
from .train import NumericError, Trainer, evaluate_model

log = logging.getLogger("affordet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SWEEP_PARAMS = {"topk": ("k", int), "alpha": ("alpha", float), "beta": ("beta", float), "gamma": ("gamma", float)}
OVERLAY_MIN_PEAK = 0.1
INFER_SCORE_THRESH = 0.25


def _header(command: str, cfg: cfgmod.RunConfig | None = None, **extra) -> dict:
    head = {
        "command": command,
        "deterministic": deterministic_requested(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        **extra,
    }
    if cfg is not None:
        head["config_hash"] = cfg.hash()
        head["seed"] = cfg.train.seed
    return head


def _emit_header(head: dict, out_dir: Path | None = None) -> None:
    print("# " + json.dumps(head, sort_keys=True), file=sys.stderr)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run.json").write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")


def _load_config(path) -> cfgmod.RunConfig:
    return cfgmod.load(path).validate() if path else cfgmod.RunConfig()


# commands ------------------------------------------------------------------


def cmd_config(args) -> int:
    cfg = _load_config(args.config)
    text = cfgmod.dumps(cfg, comments=True)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    data = cfg.data
    if args.num_images is not None:
        data = dataclasses.replace(data, num_images=args.num_images)
    if args.seed is not None:
        data = dataclasses.replace(data, seed=args.seed)
    data.validate()
    out = Path(args.out)
    _emit_header(_header("synth", cfg, num_images=data.num_images, data_seed=data.seed))
    samples = generate_synthetic(data, out)
    print(json.dumps({"out": str(out), "images": len(samples)}))
    return EXIT_OK


def cmd_convert(args) -> int:
    """Turn one binary mask PGM per affordance into keypoint heatmaps (16-bit PGM)."""
    from .data.io import write_pgm16

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.masks:
        mask = read_pgm(path) > 0
        heat = masks_to_heatmaps(mask[..., None], args.sigma_scale)[..., 0]
        write_pgm16(out / Path(path).name, np.round(heat * 65535).astype(np.uint16))
    print(json.dumps({"out": str(out), "converted": len(args.masks)}))
    return EXIT_OK


def _names(root: Path, cfg: cfgmod.RunConfig):
    from .data.io import load_meta

    meta = load_meta(root)
    return meta["object_classes"], meta["affordance_classes"]


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    over = {}
    if args.no_adapter:
        over["adapter.enabled"] = False
    if args.seed is not None:
        over["train.seed"] = args.seed
    if args.epochs is not None:
        over["train.epochs"] = args.epochs
    cfg = cfgmod.replace(cfg, **over).validate()
    data = Path(args.data)
    train_s, meta = load_dataset(data, "train")
    val_s, _ = load_dataset(data, "val")
    out = Path(args.out)
    ckpt = out / "checkpoint"
    if args.resume and (ckpt / "manifest.json").exists():
        trainer = Trainer.from_checkpoint(ckpt, cfg)
    else:
        trainer = Trainer(cfg, meta["object_classes"], meta["affordance_classes"])
    _emit_header(_header("train", cfg, data=str(data), start_epoch=trainer.epoch), out)
    (out / "config.ini").write_text(cfgmod.dumps(cfg))

    def progress(record, seconds):
        log.info("epoch %d done in %.1fs: total=%.4f", record["epoch"], seconds, record.get("total", float("nan")))

    trainer.fit(train_s, val_s, out, progress)
    print(json.dumps({"checkpoint": str(ckpt), "epochs": trainer.epoch}))
    return EXIT_OK


def _eval_samples(path: Path, split: str | None):
    meta_split = split
    if meta_split is None:
        from .data.io import load_meta

        meta_split = "val" if load_meta(path).get("splits", {}).get("val") else None
    return load_dataset(path, meta_split)[0]


def cmd_eval(args) -> int:
    trainer = Trainer.from_checkpoint(args.checkpoint)
    samples = _eval_samples(Path(args.data), args.split)
    _emit_header(_header("eval", trainer.cfg, checkpoint=str(args.checkpoint), mode=args.mode))
    rows = [] if args.per_image else None
    report = evaluate_model(trainer.model, samples, args.mode, per_image=rows)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if rows is not None:
        write_per_image_csv(rows, args.per_image)
    return EXIT_OK


def colormap(heat: np.ndarray) -> np.ndarray:
    """Piecewise-linear blue-cyan-yellow-red ramp; input in [0, 1], output H x W x 3."""
    h = np.clip(heat, 0.0, 1.0)[..., None]
    stops = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    colors = np.array([[0, 0, 1], [0, 1, 1], [1, 1, 0], [1, 0, 0]], dtype=np.float64)
    return np.stack([np.interp(h[..., 0], stops, colors[:, c]) for c in range(3)], -1)


def overlay(image: np.ndarray, heat: np.ndarray) -> np.ndarray:
    return 0.5 * image + 0.5 * colormap(heat)


def draw_boxes(image: np.ndarray, dets, palette) -> np.ndarray:
    out = image.copy()
    h, w = out.shape[:2]
    for d in dets:
        color = palette[d.class_id % len(palette)]
        x1, y1 = max(0, int(round(d.box.x1))), max(0, int(round(d.box.y1)))
        x2, y2 = min(w - 1, int(round(d.box.x2)) - 1), min(h - 1, int(round(d.box.y2)) - 1)
        if x2 < x1 or y2 < y1:
            continue
        out[y1, x1 : x2 + 1] = color
        out[y2, x1 : x2 + 1] = color
        out[y1 : y2 + 1, x1] = color
        out[y1 : y2 + 1, x2] = color
    return out


PALETTE = np.array([[1, 0, 0], [0, 0.8, 0], [0, 0.4, 1], [1, 0.6, 0], [0.8, 0, 0.8], [0, 0.8, 0.8]])


def cmd_infer(args) -> int:
    trainer = Trainer.from_checkpoint(args.checkpoint)
    model = trainer.model.eval()
    image = read_ppm(args.image).astype(np.float32) / 255.0
    size = model.input_size
    if image.shape[:2] != (size, size):
        from .core import Sample

        image = resize(Sample("infer", image, [], [], None), size).image
    out = Path(args.out)
    _emit_header(_header("infer", trainer.cfg, checkpoint=str(args.checkpoint), image=str(args.image), mode=args.mode), out)
    tensor = torch.from_numpy(image).permute(2, 0, 1)[None].contiguous()
    dets, maps = model.predict(tensor, args.mode)
    dets = [d for d in dets[0] if d.score >= args.score_thresh]
    write_ppm(out / "boxes.ppm", draw_boxes(image.astype(np.float64), dets, PALETTE))
    written = []
    for a, name in enumerate(model.affordance_names):
        heat = maps[0, :, :, a]
        if heat.max() > OVERLAY_MIN_PEAK:
            fname = f"heatmap_{name}.ppm"
            write_ppm(out / fname, overlay(image.astype(np.float64), heat))
            written.append(fname)
    sidecar = {
        "detections": [
            {"class": model.class_names[d.class_id], "class_id": d.class_id, "score": d.score, "box": list(d.box)} for d in dets
        ],
        "overlays": written,
    }
    (out / "boxes.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"out": str(out), "detections": len(dets), "overlays": len(written)}))
    return EXIT_OK


def sweep_rows(trainer_factory, param: str, values, samples, mode: str = "full"):
    """One EvalReport dict per value; ``trainer_factory(value)`` returns a ready trainer."""
    rows = []
    for v in values:
        trainer = trainer_factory(v)
        rep = evaluate_model(trainer.model, samples, mode)
        rows.append({param: v, **rep.to_dict()})
    return rows


def cmd_sweep(args) -> int:
    field, tp = SWEEP_PARAMS[args.param]
    values = [tp(v) for v in args.values]
    data = Path(args.data)
    samples = _eval_samples(data, args.split)
    if args.train_per_point:
        base = _load_config(args.config)
        train_s, meta = load_dataset(data, "train")

        def factory(v):
            cfg = cfgmod.replace(base, **{f"adapter.{field}": v}).validate()
            t = Trainer(cfg, meta["object_classes"], meta["affordance_classes"])
            t.fit(train_s)
            return t
        head_cfg = base
    else:
        if not args.checkpoint:
            raise cfgmod.ConfigError("sweep needs --checkpoint unless --train-per-point is given")
        trainer = Trainer.from_checkpoint(args.checkpoint)
        orig = trainer.model.adapter_cfg

        def factory(v):
            new = dataclasses.replace(orig, **{field: v})
            new.validate()
            trainer.model.adapter_cfg = new
            return trainer
        head_cfg = trainer.cfg
    _emit_header(_header("sweep", head_cfg, param=args.param, values=values, train_per_point=args.train_per_point))
    rows = sweep_rows(factory, args.param, values, samples, args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[args.param, *EvalReport.field_names()])
        writer.writeheader()
        writer.writerows(rows)
    print(json.dumps({"out": str(out), "rows": len(rows)}))
    return EXIT_OK


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="affordet", description="Joint object and affordance detection at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("config", help="print the annotated default configuration")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--num-images", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("convert", help="convert binary affordance masks (PGM) to keypoint heatmaps")
    s.add_argument("masks", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--sigma-scale", type=float, default=0.5)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-adapter", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("full", "light"), default="full")
    s.add_argument("--split", choices=("train", "val"))
    s.add_argument("--out")
    s.add_argument("--per-image", metavar="CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="run one image and write overlays")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("full", "light"), default="full")
    s.add_argument("--score-thresh", type=float, default=INFER_SCORE_THRESH)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("sweep", help="evaluate over values of one refinement parameter")
    s.add_argument("--param", choices=tuple(SWEEP_PARAMS), required=True)
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("full", "light"), default="full")
    s.add_argument("--split", choices=("train", "val"))
    s.add_argument("--train-per-point", action="store_true")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
