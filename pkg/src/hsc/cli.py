"""Command-line entry point: ``python -m hsc <subcommand>``.

Exit codes: 0 ok, 1 usage or config error, 2 I/O error, 3 malformed or
mismatched file, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import os
import sys


from . import arith
from .autodiff import NonFiniteError
from .autodiff.checkpoint import CheckpointFormatError
from .codec import Bitstream, CodecConfig, FormatError, HierarchicalCodec, compress, decompress
from .config import ConfigError, build, read_file
from .corpus import load_corpus
from .imageio import ImageFormatError, read_pgm, read_ppm, write_ppm
from .masking import SaliencyMask
from .metrics import (
    ChannelWeights, IdentityExtractor, VGG16Extractor, default_extractor, dpl_value, fit_channel_weights,
    load_records, ms_ssim, mse8, psnr, synthetic_records, twoafc_score,
)
from .train import SweepFailed, TrainConfig, TrainingDiverged, rd_csv, rd_sweep, train

EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- configuration ---------------------------------------------------------------------

def _split_settings(values: dict) -> tuple[dict, dict]:
    """Route flat key=value settings to TrainConfig or CodecConfig; ``seed`` feeds both."""
    tfields = {f.name for f in dataclasses.fields(TrainConfig)}
    cfields = {f.name for f in dataclasses.fields(CodecConfig)}
    tvals, cvals = {}, {}
    for key, value in values.items():
        if key not in tfields and key not in cfields:
            raise ConfigError(f"unknown setting {key!r}")
        if key in tfields:
            tvals[key] = value
        if key in cfields:
            cvals[key] = value
    return tvals, cvals


def _settings(args) -> dict:
    values = read_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    return values


def _configs(args) -> tuple[TrainConfig, CodecConfig]:
    tvals, cvals = _split_settings(_settings(args))
    try:
        return build(TrainConfig, tvals), build(CodecConfig, cvals)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _extractor(args):
    kind = getattr(args, "extractor", "lab")
    if kind == "identity":
        return IdentityExtractor()
    if kind == "vgg16":
        ext = VGG16Extractor()
        if not args.vgg_weights:
            raise ConfigError("--extractor vgg16 needs --vgg-weights")
        ext.load_weights(args.vgg_weights)
        return ext
    return default_extractor(args.seed or 0)


def _records(spec: str, seed):
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        count = int(parts[1])
        return synthetic_records(count, int(parts[2]) if len(parts) > 2 else (seed or 0))
    if not os.path.isdir(spec):
        raise FileNotFoundError(f"2AFC record directory not found: {spec}")
    return load_records(spec)


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)


# -- subcommands -----------------------------------------------------------------------

def cmd_train(args) -> int:
    tcfg, cfg = _configs(args)
    if args.corpus:
        tcfg = dataclasses.replace(tcfg, corpus=args.corpus)

    def progress(rec):
        if args.verbose:
            print(f"epoch {rec.epoch} step {rec.step} bpp {rec.bpp:.4f} mse {rec.mse:.5f}", file=sys.stderr)

    log_path = args.log or os.path.join(args.out, "train_log.csv")
    os.makedirs(args.out, exist_ok=True)
    train(tcfg, cfg, out_dir=args.out, log_path=log_path, progress=progress)
    print(os.path.join(args.out, "final.hsc1"))
    return 0


def _saliency_grid(path, image_shape):
    pixels = read_pgm(path)
    if pixels.shape != image_shape[:2]:
        raise FormatError(f"saliency map {pixels.shape} does not match image {image_shape[:2]}")
    return SaliencyMask.from_pixels(pixels)


def cmd_compress(args) -> int:
    model = HierarchicalCodec.load(args.model)
    image = read_ppm(args.image)
    saliency = _saliency_grid(args.saliency, image.shape) if args.saliency else None
    stream = compress(image, model, saliency)
    out = args.output or os.path.splitext(args.image)[0] + ".hsc"
    with open(out, "wb") as fh:
        fh.write(stream.to_bytes())
    print(f"{out} {stream.payload_bits} bits {stream.bpp:.6f} bpp")
    return 0


def cmd_decompress(args) -> int:
    model = HierarchicalCodec.load(args.model)
    with open(args.stream, "rb") as fh:
        data = fh.read()
    stream = Bitstream.from_bytes(data)
    image = decompress(stream, model)
    out = args.output or os.path.splitext(args.stream)[0] + ".dec.ppm"
    write_ppm(out, image)
    print(out)
    return 0


EVAL_FIELDS = ["name", "psnr", "ms_ssim", "dpl", "mse"]


def _pairs(reference, reconstructed):
    if os.path.isdir(reference):
        if not os.path.isdir(reconstructed):
            raise ConfigError("reference is a directory, so the reconstruction must be one too")
        names = sorted(f for f in os.listdir(reference) if f.lower().endswith(".ppm"))
        pairs = []
        for name in names:
            stem = name[:-4]
            for cand in (name, stem + ".dec.ppm"):
                path = os.path.join(reconstructed, cand)
                if os.path.exists(path):
                    pairs.append((stem, os.path.join(reference, name), path))
                    break
        if not pairs:
            raise FileNotFoundError("no reconstructions match the reference images")
        return pairs
    stem = os.path.splitext(os.path.basename(reference))[0]
    return [(stem, reference, reconstructed)]


def cmd_eval(args) -> int:
    extractor = _extractor(args)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVAL_FIELDS)
    for name, ref_path, rec_path in _pairs(args.reference, args.reconstructed):
        ref, rec = read_ppm(ref_path), read_ppm(rec_path)
        if ref.shape != rec.shape:
            raise FormatError(f"{name}: reconstruction {rec.shape} does not match reference {ref.shape}")
        value = psnr(ref, rec)
        writer.writerow([name, repr(value), repr(ms_ssim(ref, rec)), repr(dpl_value(ref, rec, extractor)),
                         repr(mse8(ref, rec) / 255.0 ** 2)])
    _write_text(args.output, buf.getvalue())
    return 0


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()] if text else []


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()] if text else []


def cmd_sweep(args) -> int:
    eval_samples = load_corpus(args.eval_corpus)
    if args.models:
        runs = [HierarchicalCodec.load(p) for p in args.models.split(",")]
    else:
        tcfg, cfg = _configs(args)
        if args.corpus:
            tcfg = dataclasses.replace(tcfg, corpus=args.corpus)
        targets = _floats(args.targets) or [cfg.target_bpp]
        channels = _ints(args.channels) or [cfg.C1]
        runs = []
        for c1 in channels:
            for t in targets:
                variant = dataclasses.replace(cfg, C1=c1, C2=c1, target_bpp=t)
                out_dir = os.path.join(args.out_dir, f"C{c1}_t{t!r}") if args.out_dir else None
                runs.append((tcfg, variant, out_dir))
        if len(runs) < 2 and not args.allow_single:
            raise ConfigError("a sweep needs at least two configurations (or --allow-single)")
    dat = args.dat or (os.path.splitext(args.csv)[0] + ".dat" if args.csv not in (None, "-") else None)
    csv_path = None if args.csv in (None, "-") else args.csv
    points = rd_sweep(runs, eval_samples, csv_path=csv_path, dat_path=dat, extractor=_extractor(args))
    if csv_path is None:
        sys.stdout.write(rd_csv(points))
    return 0


def cmd_fit_metric(args) -> int:
    records = _records(args.records, args.seed)
    extractor = _extractor(args)
    weights = fit_channel_weights(records, extractor, steps=args.steps, lr=args.lr)
    weights.save(args.output)
    score = twoafc_score(lambda a, b: dpl_value(a, b, extractor, weights), records)
    print(f"{args.output} 2afc={score:.6f}")
    return 0


def _metric(name, extractor, weights):
    if name == "mse":
        return mse8
    if name == "psnr":
        return lambda a, b: -psnr(a, b)
    if name == "ms_ssim":
        return lambda a, b: 1.0 - ms_ssim(a, b)
    if name == "dpl":
        return lambda a, b: dpl_value(a, b, extractor, weights)
    raise ConfigError(f"unknown metric {name!r}")


def cmd_score_2afc(args) -> int:
    records = _records(args.records, args.seed)
    weights = ChannelWeights.load(args.weights) if args.weights else None
    extractor = _extractor(args) if args.metric == "dpl" else None
    score = twoafc_score(_metric(args.metric, extractor, weights), records)
    _write_text(args.output, f"{args.metric} 2afc={score!r}\n")
    return 0


# -- parser ----------------------------------------------------------------------------

def _common(p, settings=False):
    p.add_argument("--seed", type=int, default=None, help="seed for every random choice")
    p.add_argument("--config", default=None, help="key = value settings file")
    if settings:
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")


def _extractor_args(p):
    p.add_argument("--extractor", choices=("lab", "identity", "vgg16"), default="lab",
                   help="feature extractor behind dpl (default: the built-in lab network)")
    p.add_argument("--vgg-weights", default=None, help="HSC1 weight file for --extractor vgg16")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hsc", description="Saliency-aware learned image codec and metric lab.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a codec and write per-epoch checkpoints")
    _common(p, settings=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--corpus", default=None, help="synthetic:N[:seed], halftexture:N[:seed] or a directory")
    p.add_argument("--log", default=None, help="training log CSV (default OUT/train_log.csv)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="code a PPM image into a bitstream")
    _common(p)
    p.add_argument("image")
    p.add_argument("--model", required=True)
    p.add_argument("--saliency", default=None, help="PGM mask at image resolution (255 = salient)")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="rebuild a PPM image from a bitstream")
    _common(p)
    p.add_argument("stream")
    p.add_argument("--model", required=True)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="quality metrics of reconstructions as CSV")
    _common(p)
    _extractor_args(p)
    p.add_argument("reference", help="PPM file or directory")
    p.add_argument("reconstructed", help="PPM file or directory")
    p.add_argument("-o", "--output", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train or load several codecs and write an R-D CSV")
    _common(p, settings=True)
    _extractor_args(p)
    p.add_argument("--targets", default=None, help="comma-separated target bpp values")
    p.add_argument("--channels", default=None, help="comma-separated bottleneck sizes C1")
    p.add_argument("--models", default=None, help="comma-separated checkpoints instead of training")
    p.add_argument("--corpus", default=None, help="training corpus")
    p.add_argument("--eval-corpus", default="synthetic:30:12345")
    p.add_argument("--out-dir", default=None, help="keep the trained checkpoints here")
    p.add_argument("--csv", default=None, help="R-D CSV path (default stdout)")
    p.add_argument("--dat", default=None, help="gnuplot data path (default next to the CSV)")
    p.add_argument("--allow-single", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit-metric", help="learn dpl channel weights from 2AFC records")
    _common(p)
    _extractor_args(p)
    p.add_argument("records", help="record directory or synthetic:N[:seed]")
    p.add_argument("-o", "--output", required=True, help="weights file")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.05)
    p.set_defaults(func=cmd_fit_metric)

    p = sub.add_parser("score-2afc", help="2AFC agreement of a metric on records")
    _common(p)
    _extractor_args(p)
    p.add_argument("records", help="record directory or synthetic:N[:seed]")
    p.add_argument("--metric", choices=("mse", "psnr", "ms_ssim", "dpl"), default="dpl")
    p.add_argument("--weights", default=None, help="channel weights for dpl")
    p.add_argument("-o", "--output", default=None, help="write the score here instead of stdout")
    p.set_defaults(func=cmd_score_2afc)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, SweepFailed) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, (FormatError, arith.CorruptPayload, ImageFormatError, CheckpointFormatError)):
        return EXIT_FORMAT
    if isinstance(exc, (TrainingDiverged, NonFiniteError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("hsc: a subcommand is required (see --help)")
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code = _exit_code(exc)
        if code == 0:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
