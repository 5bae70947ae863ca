"""Command-line entry point: train, eval, predict, bench, inspect.

Exit codes: 0 success, 1 configuration error, 2 data/file error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint
from .data import DataError, load_split, read_image, read_mask
from .inference import benchmark, predict_probability
from .metrics import binarize, evaluate_set, render_overlay
from .model import VARIANTS, ModelConfig, build, count_flops, param_table
from .training import LossConfig, NumericalError, Schedule, fit, restore

logger = logging.getLogger("rhanet")


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    data_root: Optional[str] = None
    train_list: Optional[str] = None
    val_list: Optional[str] = None
    list: Optional[str] = None
    variant: str = "rha"
    width: int = 16
    lr: float = 1e-3
    batch: int = 8
    epochs: int = 500
    seed: int = 0
    tolerance: float = 2.0
    threshold: float = 0.5
    omega_p: str = "auto"
    out: str = "runs"
    checkpoint_interval: int = 50
    augment: bool = True
    checkpoint: Optional[str] = None
    pred_dir: Optional[str] = None
    overlays: Optional[str] = None
    image: Optional[str] = None
    mask: Optional[str] = None
    iters: int = 10
    shape: Optional[str] = None

    @classmethod
    def keys(cls) -> set:
        return {f.name for f in fields(cls)}


def _coerce(key: str, raw):
    f = {f.name: f for f in fields(RunConfig)}[key]
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if "bool" in kind:
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"invalid value for '{key}': {raw!r}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in RunConfig.keys():
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key in RunConfig.keys():
        v = getattr(args, key, None)
        if v is not None:
            values[key] = _coerce(key, v)
    cfg = RunConfig(**values)
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"invalid value for 'variant': {cfg.variant!r}")
    for key in ("width", "batch", "epochs", "checkpoint_interval", "iters"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"'{key}' must be >= 1")
    if cfg.tolerance < 0:
        raise ConfigError("'tolerance' must be >= 0")
    if not 0 <= cfg.threshold <= 1:
        raise ConfigError("'threshold' must be in [0, 1]")
    if cfg.omega_p != "auto":
        try:
            if float(cfg.omega_p) <= 0:
                raise ValueError
        except ValueError:
            raise ConfigError(f"invalid value for 'omega_p': {cfg.omega_p!r}") from None
    return cfg


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if getattr(cfg, key) in (None, ""):
            raise ConfigError(f"missing required setting '{key}' (flag --{key.replace('_', '-')})")


def _parse_shape(text: Optional[str], default: tuple) -> tuple:
    if not text:
        return default
    try:
        dims = tuple(int(d) for d in text.lower().replace(",", "x").split("x"))
    except ValueError:
        raise ConfigError(f"invalid value for 'shape': {text!r}") from None
    if len(dims) == 3:
        dims = (1, *dims)
    if len(dims) != 4 or min(dims) < 1:
        raise ConfigError(f"invalid value for 'shape': {text!r} (want CxHxW or NxCxHxW)")
    return dims


def _load_model(cfg: RunConfig):
    path = Path(cfg.checkpoint)
    if not path.is_file():
        raise DataError(f"cannot read checkpoint {path}: no such file")
    try:
        ckpt = load_checkpoint(path)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    model, _ = restore(ckpt)
    model.eval()
    return model


def _save_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _write_history(path: Path, rows: list) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_f1"])
        for r in rows:
            w.writerow([r["epoch"], repr(r["train_loss"]), "" if r["val_f1"] is None else repr(r["val_f1"])])


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "data_root", "train_list")
    train = load_split(cfg.train_list, cfg.data_root)
    if not train:
        raise DataError(f"training list {cfg.train_list} is empty")
    val = load_split(cfg.val_list, cfg.data_root) if cfg.val_list else []
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build(ModelConfig(cfg.variant, cfg.width), seed=cfg.seed)
    sched = Schedule(
        epochs=cfg.epochs, batch_size=cfg.batch, lr=cfg.lr, seed=cfg.seed, augment=cfg.augment,
        checkpoint_interval=cfg.checkpoint_interval, out_dir=out, loss=LossConfig(cfg.omega_p),
        threshold=cfg.threshold, tolerance=cfg.tolerance,
    )
    hist = fit(model, train, val, sched, on_epoch=lambda r: logger.info(
        "epoch %d  loss %.6f  val_f1 %s", r["epoch"], r["train_loss"], r["val_f1"]))
    _write_history(out / "history.csv", hist.rows)
    report = evaluate_set(model, val or train, cfg.threshold, cfg.tolerance)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    best = hist.best_checkpoint()
    print(f"omega_p {hist.omega_p:.6g}; final macro F1 {report.macro['f1']:.4f}"
          + (f"; best checkpoint epoch_{best}.rhac" if best else ""))
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "data_root", "list")
    if not cfg.checkpoint and not cfg.pred_dir:
        raise ConfigError("missing required setting 'checkpoint' (or 'pred_dir')")
    samples = load_split(cfg.list, cfg.data_root)
    if not samples:
        raise DataError(f"evaluation list {cfg.list} is empty")
    source = _load_model(cfg) if cfg.checkpoint else Path(cfg.pred_dir)
    report = evaluate_set(source, samples, cfg.threshold, cfg.tolerance)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    if cfg.overlays:
        for s in samples:
            if cfg.checkpoint:
                prob = predict_probability(source, s.image)
            else:
                prob = np.asarray(Image.open(Path(cfg.pred_dir) / f"{s.name}.png").convert("L")) / 255.0
            overlay = render_overlay(binarize(prob, cfg.threshold), s.mask > 0.5, cfg.tolerance, s.image)
            _save_png(Path(cfg.overlays) / f"{s.name}.png", overlay)
    m = report.macro
    print(f"macro Pr {m['pr']:.4f}  Re {m['re']:.4f}  F1 {m['f1']:.4f}  ({len(samples)} images)")
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "image")
    model = _load_model(cfg)
    image = read_image(cfg.image)
    pred = binarize(predict_probability(model, image), cfg.threshold)
    out = Path(cfg.out)
    stem = Path(cfg.image).stem
    _save_png(out / f"{stem}_mask.png", (pred * 255).astype(np.uint8))
    if cfg.overlays or cfg.mask:
        gt = read_mask(cfg.mask) > 0.5 if cfg.mask else pred
        if gt.shape != pred.shape:
            raise DataError(f"mask {cfg.mask} size {gt.shape} != image size {pred.shape}")
        target = Path(cfg.overlays) if cfg.overlays else out
        _save_png(target / f"{stem}_overlay.png", render_overlay(pred, gt, cfg.tolerance, image))
    print(f"{out / (stem + '_mask.png')}: {int(pred.sum())} crack pixels")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    model = _load_model(cfg) if cfg.checkpoint else build(ModelConfig(cfg.variant, cfg.width), seed=cfg.seed)
    shape = _parse_shape(cfg.shape, (1, 3, 256, 256))
    if shape[2] % 16 or shape[3] % 16:
        raise ConfigError("'shape' spatial extents must be divisible by 16")
    res = benchmark(model, shape, cfg.iters, cfg.seed)
    res["variant"] = model.cfg.variant
    res["width"] = model.cfg.base_width
    res["flops"] = count_flops(model, shape)
    print(json.dumps(res))
    return 0


def cmd_inspect(cfg: RunConfig) -> int:
    shape = _parse_shape(cfg.shape, (1, 3, 640, 480))
    rows = sorted(param_table(cfg.width, shape), key=lambda r: r["params"])
    print(f"{'variant':<14}{'params':>12}{'GFLOPs':>12}   (width {cfg.width}, input {'x'.join(map(str, shape[1:]))})")
    for r in rows:
        print(f"{r['variant']:<14}{r['params']:>12,}{r['flops'] / 1e9:>12.3f}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad flags are configuration errors (exit 1), not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: config error: {message}\n")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "bench": cmd_bench, "inspect": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rhanet", description="Pavement crack segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    shared = _Parser(add_help=False)
    shared.add_argument("--config", help="key = value settings file (flags override it)")
    shared.add_argument("--data-root", dest="data_root")
    shared.add_argument("--variant", choices=VARIANTS)
    shared.add_argument("--width", type=int)
    shared.add_argument("--seed", type=int)
    shared.add_argument("--threshold", type=float)
    shared.add_argument("--tolerance", type=float)
    shared.add_argument("--out")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("train", parents=[shared], help="train a model")
    p.add_argument("--train-list", dest="train_list")
    p.add_argument("--val-list", dest="val_list")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--omega-p", dest="omega_p")
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)

    p = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint or a prediction directory")
    p.add_argument("--list", help="split list of image<TAB>mask pairs")
    p.add_argument("--checkpoint")
    p.add_argument("--pred-dir", dest="pred_dir")
    p.add_argument("--overlays", help="directory for overlay PNGs")

    p = sub.add_parser("predict", parents=[shared], help="segment one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--mask", help="optional ground truth for a tolerance overlay")
    p.add_argument("--overlays", help="directory for the overlay PNG")

    p = sub.add_parser("bench", parents=[shared], help="forward latency")
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int)
    p.add_argument("--shape", help="CxHxW or NxCxHxW (default 1x3x256x256)")

    p = sub.add_parser("inspect", parents=[shared], help="params and FLOPs of all variants")
    p.add_argument("--shape", help="CxHxW or NxCxHxW (default 3x640x480)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
