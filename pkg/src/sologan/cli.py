"""Command-line entry point: ``sologan {train,translate,guide,evaluate,make-synthetic}``.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime/data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_checkpoint, model_from_bundle, restore_trainer
from .config import build_section, dump_config, load_document, load_run_config
from .data import SyntheticSpec, load_dataset, load_split_tensor, make_synthetic, preprocess, to_uint8
from .errors import ConfigurationError, SoloGANError
from .evaluate import EvalProtocol, model_translator, run_protocol
from .metrics import load_extractor, probe_accuracy, save_extractor, train_probe
from .train import Trainer, build_model

log = logging.getLogger("sologan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SEPARATOR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Image grids


def make_grid(rows, cell: int, sep: int = SEPARATOR) -> np.ndarray:
    """Tile ``rows`` (lists of HxWx3 uint8 arrays or None for blank cells) with white separators."""
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    h = n_rows * cell + (n_rows - 1) * sep
    w = n_cols * cell + (n_cols - 1) * sep
    canvas = np.full((h, w, 3), 255, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            if img is not None:
                top, left = i * (cell + sep), j * (cell + sep)
                canvas[top:top + cell, left:left + cell] = img
    return canvas


def save_png(arr: np.ndarray, path: Path):
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


# ---------------------------------------------------------------------------
# Helpers


def _load_model(path):
    bundle = load_checkpoint(path)
    model = model_from_bundle(bundle)
    domains = bundle.domains or [str(i) for i in range(model.cfg.domain_count)]
    return model, list(domains)


def _domain_label(domains, name):
    if name in domains:
        return domains.index(name)
    raise ConfigurationError(f"unknown domain {name!r}; available domains: {', '.join(domains)}")


def _image_size(args, model):
    size = args.image_size or model.cfg.image_size
    if size % 16:
        raise ConfigurationError(f"--image-size must be divisible by 16, got {size}")
    return size


@contextmanager
def _lock(out_dir: Path):
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise SoloGANError(f"{out_dir} is locked by another training run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    overrides = {
        "output_dir": args.output_dir,
        "train.seed": args.seed,
        "network.image_size": args.image_size,
    }
    cfg = load_run_config(args.config, overrides)
    if cfg.dataset_root is None:
        raise ConfigurationError("dataset_root is required")
    root = Path(cfg.dataset_root)
    if not root.exists() and cfg.synthetic is not None:
        log.info("generating synthetic dataset at %s", root)
        make_synthetic(cfg.synthetic, root)
    ds = load_dataset(root, cfg.domains)
    if ds.domain_count != cfg.network.domain_count:
        raise ConfigurationError(
            f"network.domain_count is {cfg.network.domain_count} but {root} has {ds.domain_count} domains"
        )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _lock(out):
        dump_config(cfg, out / "config.json")
        if args.checkpoint:
            trainer = restore_trainer(load_checkpoint(args.checkpoint), cfg.network, cfg.train)
            if trainer.domains is not None and list(trainer.domains) != list(ds.domains):
                raise ConfigurationError(f"checkpoint domains {trainer.domains} differ from dataset {list(ds.domains)}")
            log.info("resuming after epoch %d (step %d)", trainer.epoch, trainer.step)
        else:
            trainer = Trainer(build_model(cfg.network, cfg.train.seed), cfg.train)
        trainer.domains = list(ds.domains)
        trainer.fit(ds, out, stop_epoch=args.stop_epoch)
    print(json.dumps({"epochs": trainer.epoch, "steps": trainer.step, "checkpoint": str(out / "latest.npz")}))
    return EXIT_OK


@torch.no_grad()
def cmd_translate(args) -> int:
    model, domains = _load_model(args.checkpoint)
    target = _domain_label(domains, args.target_domain)
    size = _image_size(args, model)
    if args.num_samples < 1:
        raise ConfigurationError("--num-samples must be >= 1")
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(args.seed)
    rows, written = [], []
    for path in args.inputs:
        x = preprocess(path, size, train_mode=False).unsqueeze(0)
        z = torch.randn(args.num_samples, model.cfg.style_dim, generator=gen)
        c = model.encode_content(x)
        outputs = model.generate(c.expand(args.num_samples, *c.shape[1:]), z, target)
        row = [to_uint8(x[0])]
        for i, img in enumerate(outputs):
            arr = to_uint8(img)
            name = out / f"{Path(path).stem}_to_{args.target_domain}_{i:03d}.png"
            save_png(arr, name)
            written.append(str(name))
            row.append(arr)
        rows.append(row)
    save_png(make_grid(rows, size), out / "grid.png")
    print(json.dumps({"outputs": len(written), "grid": str(out / "grid.png")}))
    return EXIT_OK


@torch.no_grad()
def cmd_guide(args) -> int:
    model, domains = _load_model(args.checkpoint)
    size = _image_size(args, model)
    style_domains = args.style_domain
    if len(style_domains) == 1:
        style_domains = style_domains * len(args.style)
    if len(style_domains) != len(args.style):
        raise ConfigurationError("give one --style-domain, or one per --style image")
    labels = [_domain_label(domains, d) for d in style_domains]
    contents = torch.stack([preprocess(p, size, train_mode=False) for p in args.content])
    styles = torch.stack([preprocess(p, size, train_mode=False) for p in args.style])
    codes = model.encode_style(styles, torch.tensor(labels))
    c = model.encode_content(contents)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"cells": []}
    header = [None] + [to_uint8(s) for s in styles]
    rows = [header]
    for i, cp in enumerate(args.content):
        row = [to_uint8(contents[i])]
        for j, sp in enumerate(args.style):
            img = model.generate(c[i:i + 1], codes[j:j + 1], labels[j])[0]
            arr = to_uint8(img)
            name = out / f"{Path(cp).stem}__{Path(sp).stem}.png"
            save_png(arr, name)
            cell = {"content": cp, "style": sp, "output": str(name),
                    "l1_to_content": float((img - contents[i]).abs().mean())}
            summary["cells"].append(cell)
            row.append(arr)
        rows.append(row)
    if len(args.content) * len(args.style) > 1:
        save_png(make_grid(rows, size), out / "grid.png")
        summary["grid"] = str(out / "grid.png")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, _ = _load_model(args.checkpoint)
    model_domains = load_checkpoint(args.checkpoint).domains
    raw = load_document(args.config) if args.config else {}
    protocol_raw = dict(raw.get("protocol") or {})
    if args.seed is not None:
        protocol_raw["seed"] = args.seed
    for key in ("inputs_per_domain", "is_samples", "fid_samples", "lpips_samples", "cls_samples"):
        value = getattr(args, key)
        if value is not None:
            protocol_raw[key] = value
    protocol = build_section(EvalProtocol, protocol_raw, "protocol")
    root = args.dataset_root or raw.get("dataset_root")
    if root is None:
        raise ConfigurationError("--dataset-root (or dataset_root in --config) is required")
    ds = load_dataset(root, model_domains)
    size = _image_size(args, model)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.extractor:
        extractor = load_extractor(args.extractor)
    else:
        images, labels = load_split_tensor(ds, "train", size)
        extractor = train_probe(images, labels, ds.domain_count, seed=protocol.seed)
        save_extractor(extractor, out / "extractor.npz")
        test_x, test_y = load_split_tensor(ds, "test", size)
        log.info("probe test accuracy %.4f", probe_accuracy(extractor, test_x, test_y))
    report = run_protocol(model_translator(model), ds, extractor, protocol, size, model.cfg.style_dim)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report))
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    raw = load_document(args.config) if args.config else {}
    if "synthetic" in raw:
        raw = dict(raw["synthetic"] or {})
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.image_size is not None:
        raw["image_size"] = args.image_size
    spec = build_section(SyntheticSpec, raw, "synthetic")
    ds = make_synthetic(spec, args.output_dir)
    print(json.dumps({"root": str(ds.root), "domains": list(ds.domains),
                      "train": ds.counts("train"), "test": ds.counts("test")}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sologan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--stop-epoch", type=int, help="stop after this many completed epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="multimodal translation of input images into a target domain")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target-domain", required=True)
    p.add_argument("--num-samples", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("guide", help="example-guided translation: content of one image, style of another")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--content", nargs="+", required=True)
    p.add_argument("--style", nargs="+", required=True)
    p.add_argument("--style-domain", nargs="+", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_guide)

    p = sub.add_parser("evaluate", help="FID / IS / CIS / LPIPS / classification error report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset-root")
    p.add_argument("--config")
    p.add_argument("--extractor", help="saved probe classifier; trained on the dataset if omitted")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--image-size", type=int)
    for key in ("inputs_per_domain", "is_samples", "fid_samples", "lpips_samples", "cls_samples"):
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-synthetic", help="render the synthetic shapes dataset")
    p.add_argument("--config", help="SyntheticSpec document (or a run config with a synthetic section)")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"sologan {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SoloGANError, OSError) as exc:
        print(f"sologan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
