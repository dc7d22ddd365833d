"""Batch command-line front end.

Subcommands: ``make-data``, ``train``, ``inpaint``, ``segment``, ``eval``.
Exit codes: 0 success, 1 some evaluation samples failed, 2 usage or
configuration error, 3 numerical failure.

Training reads a flat ``key = value`` config file (``#`` starts a comment).
Precedence, lowest first: built-in defaults, the ``PCONV_SEED`` environment
variable, the config file, then ``--seed`` and ``--set KEY=VALUE`` flags.
"""
import argparse
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import imageproc
from .errors import ConfigError, ConfigMismatchError, DimensionError, FormatError, NumericalError
from .imageproc import (read_manifest, read_mask, read_pgm, synthesize_blobs, synthesize_masks,
                        synthesize_textures, write_manifest, write_mask, write_pgm)
from .metrics import MetricReport, dice, format_value, psnr, ssim
from .model import ModelConfig, inpaint_forward, seg_forward
from .trainer import (PairedDataset, TrainConfig, history_columns, load_checkpoint,
                      model_from_checkpoint, parse_config_text, save_checkpoint, train_inpaint,
                      train_segment)

log = logging.getLogger("pconvnet")

MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"seed"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
RUN_KEYS = {"seed", "dataset", "checkpoint", "loss_log", "resume"}
PATH_KEYS = {"dataset", "checkpoint", "loss_log", "resume"}


class ExitError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def default_seed():
    raw = os.environ.get("PCONV_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ExitError(2, f"PCONV_SEED must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------- make-data

def cmd_make_data(args):
    seed = default_seed() if args.seed is None else args.seed
    out = args.out
    try:
        os.makedirs(out, exist_ok=True)
        probe = os.path.join(out, ".write-test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise ExitError(2, f"cannot write to {out}: {exc.strerror}") from None
    rows = []
    n, size = args.count, args.size
    coverage = (args.coverage_min, args.coverage_max)
    if args.kind == "textures":
        images = synthesize_textures(seed, size, n)
        masks = synthesize_masks(seed + 1, size, size, n, coverage) if n else []
        for k in range(n):
            img, msk = f"image_{k:04d}.pgm", f"mask_{k:04d}.pgm"
            write_pgm(os.path.join(out, img), images[k])
            write_mask(os.path.join(out, msk), masks[k])
            rows.append((img, msk))
    elif args.kind == "blobs":
        images, labels = synthesize_blobs(seed, size, n)
        for k in range(n):
            img, lab = f"image_{k:04d}.pgm", f"label_{k:04d}.pgm"
            write_pgm(os.path.join(out, img), images[k])
            write_mask(os.path.join(out, lab), labels[k])
            rows.append((img, lab))
    else:
        masks = synthesize_masks(seed, size, size, n, coverage) if n else []
        for k in range(n):
            msk = f"mask_{k:04d}.pgm"
            write_mask(os.path.join(out, msk), masks[k])
            rows.append((msk,))
    write_manifest(os.path.join(out, "manifest.tsv"), rows)
    log.info("wrote %d %s samples to %s", n, args.kind, out)
    return 0


# ---------------------------------------------------------------- train

def build_run_config(config_path, overrides, seed_flag):
    """Merge defaults, env, file and flags into (model_cfg, train_cfg, run dict)."""
    try:
        with open(config_path, encoding="utf-8") as fh:
            file_keys = parse_config_text(fh.read())
    except OSError as exc:
        raise ExitError(2, f"cannot read config {config_path}: {exc.strerror}") from None
    except ConfigError as exc:
        raise ExitError(2, f"malformed config: {exc.violations[0]}") from None
    base = os.path.dirname(os.path.abspath(config_path))
    merged = {"seed": str(default_seed())}
    merged.update(file_keys)
    for item in overrides:
        if "=" not in item:
            raise ExitError(2, f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        merged[key] = value
    if seed_flag is not None:
        merged["seed"] = str(seed_flag)
    for key in merged:
        if key not in MODEL_KEYS | TRAIN_KEYS | RUN_KEYS:
            raise ExitError(2, f"malformed config: unknown key {key!r}")
    model_keys = {k: v for k, v in merged.items() if k in MODEL_KEYS}
    train_keys = {k: v for k, v in merged.items() if k in TRAIN_KEYS}
    try:
        model_keys["seed"] = train_keys["seed"] = merged["seed"]
        model_cfg = ModelConfig.from_mapping(model_keys)
        train_cfg = TrainConfig.from_mapping(train_keys)
    except ConfigError as exc:
        raise ExitError(2, f"malformed config: {exc.violations[0]}") from None
    run = {}
    for key in PATH_KEYS:
        value = merged.get(key)
        if value:
            run[key] = value if os.path.isabs(value) else os.path.join(base, value)
    run.setdefault("checkpoint", os.path.join(base, "checkpoint.pcv"))
    run.setdefault("loss_log", os.path.join(base, "loss_log.tsv"))
    if "dataset" not in run:
        raise ExitError(2, "malformed config: missing key 'dataset'")
    if not os.path.isfile(run["dataset"]):
        raise ExitError(2, f"dataset manifest not found: {run['dataset']}")
    if "resume" in run and not os.path.isfile(run["resume"]):
        raise ExitError(2, f"resume checkpoint not found: {run['resume']}")
    for key in ("checkpoint", "loss_log"):
        parent = os.path.dirname(run[key]) or "."
        if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
            raise ExitError(2, f"{key} directory is not writable: {parent}")
    return model_cfg, train_cfg, run


def load_dataset(manifest):
    images, targets = [], []
    try:
        for row in read_manifest(manifest):
            if len(row) < 2:
                raise ExitError(2, f"manifest row needs image and mask/label paths: {row}")
            images.append(read_pgm(row[0]).pixels)
            targets.append(read_mask(row[1]))
    except (OSError, FormatError) as exc:
        raise ExitError(2, f"cannot load dataset: {exc}") from None
    if not images:
        raise ExitError(2, f"dataset {manifest} is empty")
    shapes = {im.shape for im in images} | {t.shape for t in targets}
    if len(shapes) != 1:
        raise ExitError(2, f"dataset images and masks differ in size: {sorted(shapes)}")
    return PairedDataset(np.stack(images), np.stack(targets))


def cmd_train(args):
    model_cfg, train_cfg, run = build_run_config(args.config, args.set or [], args.seed)
    if args.dry_run:
        print(f"config ok: variant={model_cfg.variant} max_iters={train_cfg.max_iters} "
              f"dataset={run['dataset']}")
        return 0
    segment = model_cfg.variant == "seg_unet"
    dataset = load_dataset(run["dataset"])
    resume = None
    if "resume" in run:
        try:
            resume = load_checkpoint(run["resume"])
        except (OSError, FormatError, ConfigError) as exc:
            raise ExitError(2, f"bad resume checkpoint: {exc}") from None
    cols = history_columns("segment" if segment else "inpaint")
    log_fh = open(run["loss_log"], "w", encoding="utf-8", newline="\n")
    log_fh.write("\t".join(cols) + "\n")

    def on_step(rec):
        log_fh.write("\t".join(str(rec[c]) if c == "iter" else f"{rec[c]:.9g}" for c in cols) + "\n")

    def on_checkpoint(ckpt):
        save_checkpoint(run["checkpoint"], ckpt)
        log_fh.flush()

    trainer = train_segment if segment else train_inpaint
    try:
        result = trainer(dataset, model_cfg, train_cfg, resume=resume,
                         on_checkpoint=on_checkpoint, on_step=on_step)
    except NumericalError as exc:
        raise ExitError(3, f"numerical failure: {exc}") from None
    except (DimensionError, ConfigError, ConfigMismatchError) as exc:
        raise ExitError(2, str(exc)) from None
    finally:
        log_fh.close()
    save_checkpoint(run["checkpoint"], result.checkpoint)
    log.info("trained %d iterations; checkpoint %s", len(result.history), run["checkpoint"])
    return 0


# ---------------------------------------------------------------- inpaint / segment

def _check_out(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
        raise ExitError(2, f"output directory is not writable: {parent}")


def _load_model(path, variant):
    try:
        ckpt = load_checkpoint(path)
        model = model_from_checkpoint(ckpt)
    except OSError as exc:
        raise ExitError(2, f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (FormatError, ConfigError, ConfigMismatchError) as exc:
        raise ExitError(2, f"bad checkpoint {path}: {exc}") from None
    if ckpt.model_config.variant != variant:
        raise ExitError(2, f"checkpoint holds a {ckpt.model_config.variant} model, "
                           f"this command needs {variant}")
    return model


def _read_inputs(image_path, mask_path=None):
    try:
        image = read_pgm(image_path)
        mask = read_mask(mask_path) if mask_path else None
    except (OSError, FormatError) as exc:
        raise ExitError(2, f"cannot read input: {exc}") from None
    if mask is not None and mask.shape != image.pixels.shape:
        raise ExitError(2, f"mask {mask.shape} and image {image.pixels.shape} differ in size")
    return image, mask


def cmd_inpaint(args):
    _check_out(args.out)
    model = _load_model(args.checkpoint, "pconv_unet")
    image, mask = _read_inputs(args.image, args.mask)
    x = image.pixels[None, None].astype(np.float32)
    m = mask[None, None]
    try:
        out, _ = inpaint_forward(model, x * m, m)
    except DimensionError as exc:
        raise ExitError(2, str(exc)) from None
    recovered = np.where(mask > 0, image.pixels, np.clip(out.data[0, 0], 0.0, 1.0))
    write_pgm(args.out, imageproc.GrayImage(recovered, image.maxval))
    return 0


def cmd_segment(args):
    _check_out(args.out)
    model = _load_model(args.checkpoint, "seg_unet")
    image, _ = _read_inputs(args.image)
    try:
        prob = seg_forward(model, image.pixels[None, None].astype(np.float32))
    except DimensionError as exc:
        raise ExitError(2, str(exc)) from None
    tumor = prob.data[0, 0] > args.threshold
    mask = (~tumor).astype(np.float32)
    if args.dilate:
        mask = imageproc.dilate(mask, args.dilate, "hole")
    write_mask(args.out, mask)
    return 0


# ---------------------------------------------------------------- eval

def _region_select(region, mask):
    if region == "whole":
        return None
    if mask is None:
        raise ValueError(f"region {region!r} needs a mask column in the manifest")
    return (mask == 0) if region == "hole" else (mask == 1)


def _evaluate_row(row, metrics, region, peak, label):
    from .imageproc import read_labels
    mask = read_mask(row[2]) if len(row) > 2 else None
    values = {}
    sel = _region_select(region, mask)
    for metric in metrics:
        if metric == "dice":
            a, b = read_labels(row[0]), read_labels(row[1])
            if label is None:
                a, b, lab = a != 0, b != 0, True
            else:
                lab = label
            excl = None if sel is None else ~sel
            values[metric] = dice(a, b, lab, excl)
        else:
            a, b = read_pgm(row[0]).pixels, read_pgm(row[1]).pixels
            if metric == "psnr":
                values[metric] = psnr(a, b, peak, sel)
            else:
                values[metric] = ssim(a, b, peak, region=sel)
    return values


def cmd_eval(args):
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        if m not in ("psnr", "ssim", "dice"):
            raise ExitError(2, f"unknown metric {m!r}")
    try:
        rows = read_manifest(args.manifest)
    except OSError as exc:
        raise ExitError(2, f"cannot read manifest: {exc.strerror}") from None
    out = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    collected = {m: [] for m in metrics}
    failed = 0
    try:
        for row in rows:
            sample = os.path.splitext(os.path.basename(row[0]))[0]
            try:
                if len(row) < 2:
                    raise ValueError("row needs recovered and reference paths")
                values = _evaluate_row(row, metrics, args.region, args.peak, args.label)
            except Exception as exc:  # any unreadable sample is reported, not fatal
                log.warning("sample %s failed: %s", sample, exc)
                failed += 1
                for m in metrics:
                    out.write(f"{sample}\t{m}\t{args.region}\terror\n")
                continue
            for m in metrics:
                collected[m].append(values[m])
                out.write(MetricReport(sample, m, args.region, values[m]).line() + "\n")
        for m in metrics:
            vals = np.array(collected[m], dtype=np.float64)
            if vals.size == 0:
                mean = std = float("nan")
            elif np.isinf(vals).any():
                mean, std = float(vals.mean()), float("nan")
            else:
                mean, std = float(vals.mean()), float(vals.std())
            out.write(f"summary\t{m}\t{args.region}\t{format_value(mean)}\t{format_value(std)}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 1 if failed else 0


# ---------------------------------------------------------------- entry point

def build_parser():
    parser = argparse.ArgumentParser(prog="pconvnet",
                                     description="Partial-convolution inpainting toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more log output (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write a synthetic dataset and manifest")
    p.add_argument("--kind", choices=("textures", "blobs", "masks"), required=True,
                   help="textures: images + hole masks; blobs: images + labels; masks: masks only")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=100, help="number of samples (default 100)")
    p.add_argument("--size", type=int, default=64, help="square image side in pixels")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default $PCONV_SEED or 0)")
    p.add_argument("--coverage-min", type=float, default=0.05, help="minimum hole fraction")
    p.add_argument("--coverage-max", type=float, default=0.25, help="maximum hole fraction")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a model from a key = value config file")
    p.add_argument("config", help="config file path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override the seed")
    p.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inpaint", help="recover the hole region of one image")
    p.add_argument("--checkpoint", required=True, help="pconv_unet checkpoint")
    p.add_argument("--image", required=True, help="input P5 graymap")
    p.add_argument("--mask", required=True, help="mask graymap, 255 = valid, 0 = hole")
    p.add_argument("--out", required=True, help="output graymap")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("segment", help="segment one image into a hole mask")
    p.add_argument("--checkpoint", required=True, help="seg_unet checkpoint")
    p.add_argument("--image", required=True, help="input P5 graymap")
    p.add_argument("--out", required=True, help="output mask, 255 = valid, 0 = segmented")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="probabilities above this are foreground (default 0.5)")
    p.add_argument("--dilate", type=int, default=0, metavar="N",
                   help="grow the segmented region by N pixels")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="compute metrics over a manifest of image pairs")
    p.add_argument("--manifest", required=True,
                   help="rows: recovered<TAB>reference[<TAB>mask]")
    p.add_argument("--metrics", default="psnr,ssim", help="comma list of psnr, ssim, dice")
    p.add_argument("--region", choices=("whole", "hole", "valid"), default="whole",
                   help="restrict metrics to part of the image (needs the mask column)")
    p.add_argument("--peak", type=float, default=1.0, help="intensity peak for PSNR/SSIM")
    p.add_argument("--label", type=int, default=None,
                   help="label value for Dice (default: any nonzero value)")
    p.add_argument("--out", default=None, help="report file (default stdout)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ExitError as exc:
        print(f"pconvnet {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
