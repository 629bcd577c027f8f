"""Command line front end: ``msrefine {gen-data,train,inpaint,eval}``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.

``inpaint --report r.json`` writes a JSON object::

    {"image": [H, W], "refine": true, "config": {...},
     "levels": [{"level": 0, "height": 128, "width": 128, "status": "base",
                 "losses": [], "seconds": 0.02}, ...],
     "total_seconds": 0.9}

``status`` is one of base, refined, unrefined, skipped, aborted. A refined
level lists ``n_iters + 1`` loss values.

``eval --out results.csv`` writes one row per image and method, then
aggregate rows per mask class and over all images::

    scope,image_id,mask_class,method,count,masked_l1,masked_psnr

``scope`` is ``image``, ``class`` or ``all``; ``image_id`` is empty on
aggregate rows. Methods are ``lowres-upscaled`` (coarsest pyramid level
upscaled bilinearly), ``direct-highres`` (one forward pass at full size) and
``refined``. All outputs are composited over the known pixels.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .errors import DegenerateMaskError, FormatError, ParameterError, ShapeError, TrainingError
from .image_ops import bilinear_resize, build_pyramid, downscale, downscale_mask
from .net import InpaintNet, NetConfig, TrainingConfig, load_weights, save_weights, train
from .refine import RefinementConfig, multiscale_inpaint, predict
from .synth import (
    MASK_CLASSES,
    evaluate,
    load_dataset,
    load_image_png,
    load_mask_png,
    make_samples,
    save_image_png,
    write_dataset,
)

log = logging.getLogger("msrefine")

METHODS = ("lowres-upscaled", "direct-highres", "refined")
CSV_HEADER = ("scope", "image_id", "mask_class", "method", "count", "masked_l1", "masked_psnr")


class CliError(Exception):
    """Runtime failure reported to the user with exit code 1."""


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text}")
    return value


def _add_refine_flags(p):
    p.add_argument("--n-iters", type=_non_negative_int, default=15)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--factor", type=float, default=2.0)
    p.add_argument("--smallest-scale", type=_positive_int, default=None,
                   help="coarsest pyramid size (default: the model's training resolution)")
    p.add_argument("--erode", type=_non_negative_int, default=15, help="erosion radius in px at guide scale")


def build_parser():
    parser = argparse.ArgumentParser(prog="msrefine", description="Multiscale featuremap refinement for inpainting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--size", type=_positive_int, default=256)
    p.add_argument("--mask-class", choices=MASK_CLASSES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the inpainting network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=_non_negative_int, default=30)
    p.add_argument("--res", type=_positive_int, default=128, help="training resolution (multiple of 8)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--learning-rate", type=float, default=1e-3)

    p = sub.add_parser("inpaint", help="inpaint one image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--refine", action="store_true")
    _add_refine_flags(p)
    p.add_argument("--report", default=None, help="write a JSON report of the run")

    p = sub.add_parser("eval", help="score the three methods on a dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_refine_flags(p)
    p.add_argument("--threads", type=_positive_int, default=1)
    return parser


def _refine_config(args):
    try:
        return RefinementConfig(n_iters=args.n_iters, lr=args.lr, factor=args.factor,
                                smallest_scale=args.smallest_scale, erosion_radius=args.erode)
    except ParameterError as exc:
        raise CliError(str(exc)) from exc


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    write_dataset(args.out, make_samples(args.count, args.size, args.mask_class, args.seed))
    print(f"wrote {args.count} samples to {args.out}")


def _resize_pair(img, mask, res):
    """Bring a dataset image and mask to ``res x res``."""
    if img.shape[-2:] == (res, res):
        return img, mask
    if min(img.shape[-2:]) > res:
        img = downscale(T.Tensor(img), img.shape[-1] / res, size=(res, res)).data
        mask = downscale_mask(mask, res, res)
    else:
        img = bilinear_resize(T.Tensor(img), res, res).data
        mask = (bilinear_resize(T.Tensor(mask.astype(np.float32)[None]), res, res).data[0] >= 0.5).astype(np.uint8)
    return img, mask


def _load(data_dir):
    if not os.path.isfile(os.path.join(data_dir, "manifest.txt")):
        raise CliError(f"no dataset found in {data_dir} (missing manifest.txt)")
    items = load_dataset(data_dir)
    if not items:
        raise CliError(f"dataset {data_dir} is empty")
    return items


def cmd_train(args):
    if args.res % 8:
        raise CliError(f"--res must be a multiple of 8, got {args.res}")
    triples = []
    for _, img, mask in _load(args.data):
        img, mask = _resize_pair(img, mask, args.res)
        triples.append((img * (1 - mask[None]).astype(np.float32), mask, img))
    model = InpaintNet(NetConfig(training_resolution=args.res), seed=args.seed)
    cfg = TrainingConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate,
                         seed=args.seed, training_resolution=args.res)

    def on_epoch(epoch, loss):
        print(f"epoch={epoch} loss={loss:.6f}", flush=True)

    train(model, triples, cfg, on_epoch=on_epoch)
    save_weights(model, args.out)


def _composite(pred, image, mask):
    return np.where(mask[None] > 0, pred.astype(image.dtype), image)


def cmd_inpaint(args):
    model = load_weights(args.weights)
    image = load_image_png(args.image)
    mask = load_mask_png(args.mask)
    if mask.shape != image.shape[-2:]:
        raise CliError(f"mask {mask.shape} does not match image {image.shape[-2:]}")
    t0 = time.perf_counter()
    if args.refine:
        cfg = _refine_config(args)
        out, report = multiscale_inpaint(image, mask, model, cfg)
        levels = report.levels
        config = {"n_iters": cfg.n_iters, "lr": cfg.lr, "factor": cfg.factor,
                  "smallest_scale": cfg.smallest_scale or model.config.training_resolution,
                  "erosion_radius": cfg.erosion_radius}
    else:
        out = _composite(predict(model, image, mask), image, mask)
        h, w = image.shape[-2:]
        levels = [{"level": 0, "height": h, "width": w, "status": "base", "losses": [],
                   "seconds": time.perf_counter() - t0}]
        config = {}
    save_image_png(args.out, out)
    if args.report:
        doc = {"image": list(image.shape[-2:]), "refine": bool(args.refine), "config": config,
               "levels": levels, "total_seconds": time.perf_counter() - t0}
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)


def eval_image(model, sample, truth, mask, cfg):
    """Scores of the three methods on one image, or None for an empty mask."""
    if not mask.any():
        log.warning("image %d has an empty mask; excluded", sample.id)
        return None
    image = truth * (1 - mask[None]).astype(truth.dtype)
    H, W = truth.shape[-2:]
    smallest = cfg.smallest_scale or model.config.training_resolution
    pyr = build_pyramid(image, mask, smallest, cfg.factor, cfg.sigma_policy)
    low = predict(model, pyr.images[0], pyr.masks[0])
    outputs = {
        "lowres-upscaled": bilinear_resize(T.Tensor(low), H, W).data,
        "direct-highres": predict(model, image, mask),
    }
    outputs = {k: _composite(v, image, mask) for k, v in outputs.items()}
    outputs["refined"], _ = multiscale_inpaint(image, mask, model, cfg)
    return {k: evaluate(outputs[k], truth, mask) for k in METHODS}


def cmd_eval(args):
    model = load_weights(args.weights)
    cfg = _refine_config(args)
    items = _load(args.data)

    def job(item):
        sample, truth, mask = item
        return eval_image(model, sample, truth, mask, cfg)

    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            scores = list(pool.map(job, items))
    else:
        scores = [job(item) for item in items]

    rows, groups = [], {}
    for (sample, _, _), rec in zip(items, scores):
        if rec is None:
            continue
        cls = sample.mask.mask_class
        for method in METHODS:
            r = rec[method]
            rows.append(("image", sample.id, cls, method, 1, r["masked_l1"], r["masked_psnr"]))
            groups.setdefault((cls, method), []).append(r)
            groups.setdefault(("all", method), []).append(r)
    if not rows:
        raise CliError("no image with a non-empty mask to evaluate")
    for cls in MASK_CLASSES + ("all",):
        for method in METHODS:
            recs = groups.get((cls, method))
            if recs:
                rows.append(("class" if cls != "all" else "all", "", cls, method, len(recs),
                             float(np.mean([r["masked_l1"] for r in recs])),
                             float(np.mean([r["masked_psnr"] for r in recs]))))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    for row in rows:
        if row[0] != "image":
            print(f"{row[2]:>6} {row[3]:<16} l1={row[5]:.4f} psnr={row[6]:.2f}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "inpaint": cmd_inpaint, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (CliError, OSError, FormatError, ShapeError, ParameterError, TrainingError,
            DegenerateMaskError) as exc:
        print(f"msrefine {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
