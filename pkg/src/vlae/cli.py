"""Operator surface: train / eval / sample / reconstruct / rf-check.

Exit codes are a stable contract: 0 success, 1 causality or assertion
failure, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as data_mod
from . import evaluation as ev
from .autodiff import NumericError
from .config import ConfigError, parse_config_text, resolve
from .images import write_grid
from .masks import assert_causality, gray_projection_deviation
from .model import UnconditionalAR
from .train import build_dataset, build_model, load_model, run_training

EXIT_OK = 0
EXIT_ASSERT = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_config(args) -> dict:
    file_values = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_values = parse_config_text(fh.read())
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["run.steps"] = args.steps
    if getattr(args, "k", None) is not None:
        overrides["run.k"] = args.k
    return resolve(file_values, overrides)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = run_training(cfg, args.out, resume=args.resume)
    print(f"trained to step {out['step']}; artifacts in {args.out}")
    if out["last"]:
        m = out["last"]
        print(f"final: recon={m['recon']:.3f} kl={m['kl']:.3f} "
              f"elbo={m['elbo']:.3f} gamma={m['gamma']:.4g}")
    return EXIT_OK


def _eval_dataset(cfg: dict, split_name: str) -> np.ndarray:
    base = build_dataset(cfg)
    if split_name != "all":
        parts = dict(zip(("train", "valid", "test"),
                         data_mod.split(base, (0.8, 0.1, 0.1), cfg["data.seed"])))
        base = parts[split_name]
    if base.binarization == "dynamic":
        rng = np.random.default_rng([cfg["data.seed"], 104729])
        base = data_mod.binarize(base.images, "dynamic", rng)
    return base.batched()


def cmd_eval(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, polyak=args.polyak)
    images = _eval_dataset(cfg, args.split)
    if args.limit:
        images = images[: args.limit]
    if images.shape[1:] != model.image_shape:
        raise ConfigError(f"dataset shape {images.shape[1:]} does not match "
                          f"checkpoint image shape {model.image_shape}")
    k = args.k if args.k is not None else cfg["run.k"]
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    est = ev.is_nll(model, images, k, rng)
    n_dims = int(np.prod(model.image_shape))
    lines = [
        f"weights: {'polyak' if args.polyak else 'raw'}",
        f"images: {images.shape[0]}  k: {k}",
        f"nll: {est.value:.4f} nats = {ev.nats_to_bits(est.value):.4f} bits "
        f"({ev.bits_per_dim(est.value, n_dims):.4f} bits/dim)  "
        f"stderr: {est.std_error:.4f} nats",
    ]
    if not isinstance(model, UnconditionalAR):
        usage = ev.kl_usage_meter(model, images, rng)
        report = ev.bitsback_accounting(model, images, rng)
        lines += [
            f"kl usage: {usage['nats']:.4f} nats = {usage['bits']:.4f} bits "
            f"(decoder: {usage['decoder']})",
            f"naive code length: {report.naive_len:.4f} nats",
            f"bits-back code length: {report.bitsback_len:.4f} nats "
            f"(savings {report.savings:.4f} nats)",
        ]
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, _, _ = load_model(args.checkpoint, polyak=args.polyak)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    images = model.generate(rng, args.n)
    cols = args.cols or int(np.ceil(np.sqrt(args.n)))
    write_grid(args.out, images, cols)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    model, cfg, _ = load_model(args.checkpoint, polyak=args.polyak)
    images = _eval_dataset(cfg, args.split)[: args.n_images]
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    rows = []
    for i in range(images.shape[0]):
        row = [images[i]]
        for _ in range(args.n_variants):
            row.append(model.reconstruct_lossy(images[i: i + 1], rng)[0])
        rows.extend(row)
    write_grid(args.out, np.stack(rows), cols=1 + args.n_variants)
    print(f"wrote {images.shape[0]} originals x {args.n_variants} decompressions "
          f"to {args.out}")
    return EXIT_OK


def cmd_rf_check(args) -> int:
    cfg = _load_config(args)
    # the probe side length defines the model's spatial extent for this check
    cfg["data.height"] = cfg["data.width"] = args.probe
    model = build_model(cfg)
    decoder = model.decoder
    probe = model.image_shape
    rf = decoder.predicted_field()
    print(f"predicted window: {rf.describe()}")
    seed = args.seed if args.seed is not None else 0
    # zero-initialized output heads would make the Jacobian probe vacuous,
    # so jitter the fresh weights first (masks are applied in the forward
    # pass, so the jitter cannot open a masked path)
    jitter = np.random.default_rng(seed + 1)
    for p in decoder.parameters():
        p.data += 0.1 * jitter.standard_normal(p.data.shape)
    report = assert_causality(decoder, probe, np.random.default_rng(seed))
    print(report.describe())
    if cfg["model.decoder"] == "grayscale-local-ar" and c == 3:
        dev = gray_projection_deviation(decoder, probe, np.random.default_rng(seed))
        ok = dev < 1e-10
        print(f"grayscale projection: max off-luminance gradient component "
              f"{dev:.3e} ({'pass' if ok else 'FAIL'})")
        if not ok:
            return EXIT_ASSERT
    return EXIT_OK if report.passed else EXIT_ASSERT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlae",
        description="Lossy-autoencoder lab: training, evaluation, sampling, "
                    "and decoder causality checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, checkpoint=False):
        if config:
            p.add_argument("--config", help="config file (key = value lines)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key")
        if checkpoint:
            p.add_argument("checkpoint", help="checkpoint directory")
            p.add_argument("--polyak", action="store_true",
                           help="use Polyak-averaged weights")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train a model into a run directory")
    common(p, config=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="NLL, KL usage, and bits-back report")
    common(p, checkpoint=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--split", choices=("train", "valid", "test", "all"), default="all")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="ancestral samples as an image grid")
    common(p, checkpoint=True)
    p.add_argument("-n", type=int, default=16)
    p.add_argument("--cols", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reconstruct", help="originals beside lossy decompressions")
    common(p, checkpoint=True)
    p.add_argument("--n-images", type=int, default=8)
    p.add_argument("--n-variants", type=int, default=1)
    p.add_argument("--split", choices=("train", "valid", "test", "all"), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("rf-check", help="verify decoder causality on a probe image")
    common(p, config=True)
    p.add_argument("--probe", type=int, default=8, help="probe image side length")
    p.set_defaults(func=cmd_rf_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AssertionError as exc:
        print(f"assertion failure: {exc}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
