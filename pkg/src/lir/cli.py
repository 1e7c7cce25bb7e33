"""Command-line interface: ``lir <command> ...``.

Exit codes: 0 success, 2 configuration/weights error, 3 data error,
4 training divergence, 5 some inputs failed (the rest were processed).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from lir.config import RunConfig, dump_config, load_config
from lir.imaging import (
    ImageDecodeError,
    NoiseSpec,
    add_noise,
    load_image,
    load_image_depth,
    rng_stream,
    save_image,
    split_unpaired,
)
from lir.losses import TrainingDivergence
from lir.models import ConfigError, WeightFileError, load_weights
from lir.restoration import evaluate, render_table, restore, table_to_csv
from lir.training import CURVE_FIELDS, VARIANTS, apply_ablation, read_curves, run_training, write_curves

log = logging.getLogger("lir")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4, 5
IMAGE_SUFFIXES = (".png", ".pgm", ".rawf")


class DataError(RuntimeError):
    pass


def _configure_threads(deterministic: bool):
    env = os.environ.get("LIR_NUM_THREADS")
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif env:
        torch.set_num_threads(int(env))


def _list_images(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise DataError(f"{path}: no such file or directory")
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _load_dir(path: str, what: str, channels: int | None = None) -> list[np.ndarray]:
    if not path:
        raise DataError(f"no {what} directory configured")
    files = _list_images(Path(path))
    if not files:
        raise DataError(f"{what} directory {path} holds no images")
    out = []
    for f in files:
        try:
            img = load_image(f)
        except ImageDecodeError as exc:
            raise DataError(str(exc)) from exc
        if channels is not None and img.shape[2] != channels:
            if img.shape[2] == 1 and channels == 3:
                img = np.repeat(img, 3, axis=2)
            else:
                raise DataError(f"{f}: {img.shape[2]} channels, model expects {channels}")
        out.append(img)
    return out


def _load_weights(path) -> "ModelSet":  # noqa: F821
    try:
        return load_weights(path)
    except (WeightFileError, ConfigError, OSError) as exc:
        raise ConfigError(f"cannot load weights {path}: {exc}") from exc


def _training_pools(cfg: RunConfig):
    ch = cfg.model.image_channels
    d = cfg.data
    if d.dataset_dir:
        data = _load_dir(d.dataset_dir, "dataset", ch)
        if len(data) < 2:
            raise DataError("dataset needs at least two images to split")
        noisy, clean = split_unpaired(data, d.split_ratio, d.split_seed)
        lo, hi = cfg.noise.sigma_range
        sig_rng = rng_stream(cfg.noise.seed, "train_noise:sigma")
        noisy = [add_noise(img, cfg.noise.kind, float(sig_rng.uniform(lo, hi)),
                           rng_stream(cfg.noise.seed, "train_noise", i)) for i, img in enumerate(noisy)]
        return noisy, clean
    return _load_dir(d.noisy_dir, "noisy", ch), _load_dir(d.clean_dir, "clean", ch)


def _eval_pairs(cfg: RunConfig):
    if not cfg.eval.clean_dir:
        return None
    clean = _load_dir(cfg.eval.clean_dir, "eval", cfg.model.image_channels)
    sigma = cfg.eval.sigmas[0] if cfg.eval.sigmas else 25.0
    return [(add_noise(c, cfg.noise.kind, sigma, rng_stream(cfg.eval.seed, "train_eval", i)), c)
            for i, c in enumerate(clean)]


def _train_one(cfg: RunConfig, out: Path, resume=None):
    noisy, clean = _training_pools(cfg)
    for img in noisy + clean:
        if min(img.shape[:2]) < cfg.train.patch:
            raise DataError(f"training image of size {img.shape[:2]} smaller than patch {cfg.train.patch}")
    ev = _eval_pairs(cfg)
    out.mkdir(parents=True, exist_ok=True)
    text = dump_config(cfg)
    (out / "config.ini").write_text(text)
    return run_training(cfg.train, noisy, clean, ev, out_dir=out, resume=resume,
                        echo_extra={"run_config": text})


def _resolve_train_config(args) -> RunConfig:
    cfg = load_config(args.config)
    train = cfg.train
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    variant = args.variant or train.variant
    train = apply_ablation(train, variant)
    return dataclasses.replace(cfg, train=train)


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    res = _train_one(cfg, Path(args.out), resume=args.resume)
    print(f"trained {res.state.iteration} iterations; weights: {res.final_weights}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    if args.seed is not None:
        base = dataclasses.replace(base, train=dataclasses.replace(base.train, seed=args.seed))
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    rows = []
    for v in variants:
        cfg = dataclasses.replace(base, train=apply_ablation(base.train, v))
        res = _train_one(cfg, Path(args.out) / v)
        last = res.curves[-1] if res.curves else {}
        rows.append({"variant": v, "iterations": res.state.iteration,
                     "psnr_mean": last.get("psnr_mean"), "ssim_mean": last.get("ssim_mean"),
                     "total_g": last.get("total_g")})
    fields = ("variant", "iterations", "psnr_mean", "ssim_mean", "total_g")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r[k] is None else r[k]) for k in fields})
    (Path(args.out) / "ablation.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _out_path(src: Path, out: Path, single: bool) -> Path:
    if single and out.suffix.lower() in IMAGE_SUFFIXES:
        return out
    return out / src.name


def cmd_restore(args) -> int:
    models = _load_weights(args.weights)
    src = Path(args.inp)
    files = _list_images(src)
    if not files:
        raise DataError(f"{src}: no images")
    out = Path(args.out)
    single = src.is_file()
    if not (single and out.suffix.lower() in IMAGE_SUFFIXES):
        out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for f in files:
        try:
            img, depth = load_image_depth(f)
            if img.shape[2] != models.config.image_channels:
                raise ImageDecodeError(f"{f}: {img.shape[2]} channels, model expects {models.config.image_channels}")
            restored = restore(models, img)
            save_image(restored, _out_path(f, out, single), bit_depth=min(depth, 16))
        except (ImageDecodeError, OSError, ValueError) as exc:
            failed += 1
            print(f"error: {exc}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def _parse_sigmas(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad sigma list {text!r}") from exc


def cmd_evaluate(args) -> int:
    if args.identity:
        restorer = lambda img: img  # noqa: E731
    elif args.weights:
        restorer = _load_weights(args.weights)
    else:
        raise ConfigError("evaluate needs --weights or --identity")
    files = _list_images(Path(args.clean))
    if not files:
        raise DataError(f"{args.clean}: no images")
    clean, failed = [], 0
    for f in files:
        try:
            clean.append(load_image(f))
        except ImageDecodeError as exc:
            failed += 1
            print(f"error: {exc}", file=sys.stderr)
    if not clean:
        raise DataError("no decodable clean images")
    spec = NoiseSpec(kind=args.noise, seed=args.seed)
    table = evaluate(restorer, clean, spec, _parse_sigmas(args.sigmas), metric_mode=args.metric_mode)
    if args.out:
        Path(args.out).write_text(table_to_csv(table))
    sys.stdout.write(render_table(table))
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_add_noise(args) -> int:
    files = _list_images(Path(args.inp))
    if not files:
        raise DataError(f"{args.inp}: no images")
    if args.sigma is not None and args.sigma_range is not None:
        raise ConfigError("use either --sigma or --sigma-range")
    if args.sigma_range is not None:
        lo, hi = _parse_sigmas(args.sigma_range)
    else:
        lo = hi = float(args.sigma if args.sigma is not None else 0.0)
    NoiseSpec(kind=args.kind, sigma_range=(lo, hi), seed=args.seed)  # validates
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sig_rng = rng_stream(args.seed, "add_noise:sigma")
    failed = 0
    manifest = [("file", "kind", "sigma")]
    for i, f in enumerate(files):
        sigma = float(sig_rng.uniform(lo, hi)) if hi > lo else lo
        try:
            img, depth = load_image_depth(f)
            noisy = add_noise(img, args.kind, sigma, rng_stream(args.seed, "add_noise", i))
            save_image(noisy, out / f.name, bit_depth=min(depth, 16))
            manifest.append((f.name, args.kind, f"{sigma:.6f}" if args.kind == "awgn" else ""))
        except (ImageDecodeError, OSError, ValueError) as exc:
            failed += 1
            print(f"error: {exc}", file=sys.stderr)
    with open(out / "manifest.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(manifest)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_export_curves(args) -> int:
    path = Path(args.run) / "curves.csv"
    if not path.is_file():
        raise DataError(f"{path}: no curve file")
    rows = read_curves(path)
    if not rows:
        raise DataError(f"{path}: curve file has no rows")
    write_curves(rows, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lir", description="Unsupervised image restoration.")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train every ablation variant and tabulate them")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--variants", help="comma-separated subset of " + ",".join(VARIANTS))
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("restore", help="restore one image or a directory")
    r.add_argument("--weights", required=True)
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("evaluate", help="PSNR/SSIM table on a clean set")
    e.add_argument("--weights")
    e.add_argument("--identity", action="store_true", help="score the noisy input itself (baseline)")
    e.add_argument("--clean", required=True)
    e.add_argument("--noise", choices=("awgn", "poisson", "none"), default="awgn")
    e.add_argument("--sigmas", default="25,35,50")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--metric-mode", choices=("float", "uint8"), default="float")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    n = sub.add_parser("add-noise", help="write corrupted copies of a directory")
    n.add_argument("--in", dest="inp", required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--kind", choices=("awgn", "poisson"), default="awgn")
    n.add_argument("--sigma", type=float)
    n.add_argument("--sigma-range")
    n.add_argument("--seed", type=int, default=0)
    n.set_defaults(func=cmd_add_noise)

    c = sub.add_parser("export-curves", help="export a run's training curves as CSV")
    c.add_argument("--run", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_export_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _configure_threads(args.deterministic)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
