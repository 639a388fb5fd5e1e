"""Command-line entry point: train, eval, infer, summary, gradcheck.

Settings come from built-in defaults, then an optional ``--config`` file of
``key=value`` lines (keys are flag names without dashes), then flags.
Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import data_io, metrics
from .model import (
    ABLATIONS,
    CheckpointError,
    ConfigError,
    MiniSegConfig,
    apply_weights,
    build,
    count_flops,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .model.audit import FLOP_BAND, PAPER_FLOPS, PAPER_PARAMS, PARAM_BAND
from .tensor import Tensor
from .tensor.ops import ShapeError
from .training import NumericError, TrainConfig, fit, kfold_split

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, help="dataset root (images/, masks/) or image path")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--ckpt", type=Path, help="checkpoint file")
    p.add_argument("--seed", type=int, help="seed for init, folds, augmentation (default 0)")
    p.add_argument("--size", type=int, help="input size for summary (default 512)")
    p.add_argument("--fold", type=int, help="run a single fold index")
    p.add_argument("--ablate", help="comma-separated ablation flags: " + ",".join(ABLATIONS))
    p.add_argument("--config", type=Path, help="key=value settings file")
    p.add_argument("--json", action="store_true", default=None, help="machine-readable output")
    p.add_argument("--overlays", action="store_true", default=None, help="write overlay PNGs")
    p.add_argument("--workers", type=int, help="threads for data loading (default 1)")


def _train_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, help="training epochs (default 80)")
    p.add_argument("--batch-size", type=int, help="batch size (default 5)")
    p.add_argument("--lr", type=float, help="initial learning rate (default 1e-3)")
    p.add_argument("--weight-decay", type=float, help="decoupled weight decay (default 1e-4)")
    p.add_argument("--crop-size", type=int, help="train crop size, 0 disables (default 256)")
    p.add_argument("--folds", type=int, help="number of cross-validation folds (default 5)")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="miniseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "k-fold (or single --fold) training",
        "eval": "evaluate a checkpoint on a fold or directory",
        "infer": "predict masks and overlays for images",
        "summary": "parameter / FLOP / latency report",
        "gradcheck": "finite-difference check of every tensor op",
    }
    parser.commands = {}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _shared(p)
        if name in ("train", "eval"):
            _train_opts(p)
        parser.commands[name] = p
    return parser


DEFAULTS = {
    "seed": 0,
    "size": 512,
    "json": False,
    "overlays": False,
    "workers": 1,
    "epochs": 80,
    "batch_size": 5,
    "lr": 1e-3,
    "weight_decay": 1e-4,
    "crop_size": 256,
    "folds": 5,
}


def read_config_file(path: Path, parser: argparse.ArgumentParser, command: str) -> Dict[str, object]:
    sub = parser.commands[command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    out: Dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in actions:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r} for command {command}")
        action = actions[dest]
        if action.type is None and action.const is True:
            out[dest] = value.lower() in ("1", "true", "yes", "on")
        else:
            out[dest] = (action.type or str)(value)
    return out


def resolve(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = make_parser()
    args = parser.parse_args(argv)
    settings = {key: None for key in vars(args)}
    settings.update(DEFAULTS)
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file {args.config} not found")
        settings.update(read_config_file(args.config, parser, args.command))
    for key, value in vars(args).items():
        if value is not None:
            settings[key] = value
    return argparse.Namespace(**settings)


def model_config(args) -> MiniSegConfig:
    flags = [f.strip() for f in (getattr(args, "ablate", None) or "").split(",") if f.strip()]
    try:
        return MiniSegConfig(flags=frozenset(flags))
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def train_config(args) -> TrainConfig:
    return TrainConfig(
        initial_lr=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        crop_size=args.crop_size or None,
    )


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n} is required for {args.command}")


def _load_samples(index: data_io.DatasetIndex, ids: List[str], workers: int) -> List[data_io.Sample]:
    if workers <= 1:
        return index.load_all(ids)
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(index.load, ids))


def fold_partitions(index: data_io.DatasetIndex, k: int, seed: int):
    """(train_ids, val_ids) per fold, from folds.csv when present."""
    if index.folds:
        n_folds = max(index.folds.values()) + 1
        parts = []
        for f in range(n_folds):
            val = [s for s in index.ids if index.folds.get(s) == f]
            parts.append(([s for s in index.ids if s not in set(val)], val))
        return parts
    return kfold_split(index.ids, k, seed)


def _select_folds(parts, fold: Optional[int]):
    if fold is None:
        return list(enumerate(parts))
    if not 0 <= fold < len(parts):
        raise UsageError(f"--fold {fold} out of range for {len(parts)} folds")
    return [(fold, parts[fold])]


def _evaluate_slices(model, samples, fold, out: Optional[Path], overlays: bool):
    rows = []
    for s in samples:
        x, pad = data_io.preprocess(s)
        pred = data_io.unpad(data_io.binarize_prediction(model.forward(x, mode="infer").data), pad)
        rows.append((s.id, fold, metrics.slice_analysis(pred, s.mask)))
        if overlays and out is not None:
            data_io.write_overlay(s.image, pred, s.mask, out / f"{s.id}_overlay.png")
    return rows


def _banner(model, cfg: MiniSegConfig) -> str:
    total = count_parameters(model).total
    flags = ",".join(sorted(cfg.flags)) or "none"
    return f"MiniSeg [ablations: {flags}] learnable parameters: {total} ({total / 1e3:.2f}K)"


def cmd_train(args) -> int:
    _require(args, "data", "out")
    index = data_io.load_dataset(args.data)
    cfg = model_config(args)
    tcfg = train_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    parts = fold_partitions(index, args.folds, args.seed)
    rows = []
    for f, (train_ids, val_ids) in _select_folds(parts, args.fold):
        model = build(cfg, args.seed)
        print(_banner(model, cfg))
        print(f"fold {f}: {len(train_ids)} train / {len(val_ids)} val slices")
        train = _load_samples(index, train_ids, args.workers)
        val = _load_samples(index, val_ids, args.workers)
        log_path = args.out / f"fold{f}_log.csv"
        if log_path.exists():
            log_path.unlink()
        fit(
            model, train, tcfg, val, log_path,
            on_epoch=lambda e: print(
                f"  epoch {e.epoch}: loss {e.mean_train_loss:.4f} lr {e.lr:.3g} val DSC {e.val_DSC:.4f}"
            ),
        )
        save_checkpoint(model, args.out / f"fold{f}.msg")
        rows += _evaluate_slices(model, val, f, args.out, args.overlays)
    metrics.write_metrics_csv(args.out / "metrics.csv", rows)
    print(f"wrote {args.out / 'metrics.csv'}")
    return EXIT_OK


def _load_for_eval(args):
    ckpt_cfg, weights = load_checkpoint(args.ckpt)
    cfg = model_config(args) if args.ablate else ckpt_cfg
    model = build(cfg, args.seed)
    apply_weights(model, weights)
    return model


def cmd_eval(args) -> int:
    _require(args, "data", "ckpt", "out")
    index = data_io.load_dataset(args.data)
    model = _load_for_eval(args)
    if args.fold is None:
        selected = [(0, index.ids)]
    else:
        parts = fold_partitions(index, args.folds, args.seed)
        selected = [(f, val) for f, (_, val) in _select_folds(parts, args.fold)]
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for f, ids in selected:
        rows += _evaluate_slices(model, _load_samples(index, ids, args.workers), f, args.out, args.overlays)
    metrics.write_metrics_csv(args.out / "metrics.csv", rows)
    agg = metrics.aggregate([r for _, _, r in rows])
    if args.json:
        print(json.dumps({"slices": len(rows), **agg}))
    else:
        print(f"{len(rows)} slices: " + ", ".join(f"{k} {v:.4f}" for k, v in agg.items()))
    return EXIT_OK


def _infer_inputs(path: Path):
    """Yield (id, image, gt or None)."""
    if path.is_file():
        yield path.stem, data_io.read_image(path), None
        return
    if (path / "images").is_dir():
        index = data_io.load_dataset(path)
        for sid in index.ids:
            s = index.load(sid)
            yield sid, s.image, s.mask
        return
    files = sorted(path.glob("*.png"))
    if not files:
        raise data_io.DatasetError(f"{path}: no PNG images found")
    for f in files:
        yield f.stem, data_io.read_image(f), None


def cmd_infer(args) -> int:
    _require(args, "data", "ckpt", "out")
    if not args.data.exists():
        raise data_io.DatasetError(f"{args.data} does not exist")
    model = _load_for_eval(args)
    args.out.mkdir(parents=True, exist_ok=True)
    n = 0
    for sid, image, gt in _infer_inputs(args.data):
        x, pad = data_io.preprocess(image)
        pred = data_io.unpad(data_io.binarize_prediction(model.forward(x, mode="infer").data), pad)
        data_io.write_mask(pred, args.out / f"{sid}_mask.png")
        # without ground truth the predicted region is drawn in the TP colour
        data_io.write_overlay(image, pred, pred if gt is None else gt, args.out / f"{sid}_overlay.png")
        if gt is not None and not args.json:
            print(f"{sid}: DSC {metrics.compute_metrics(metrics.confusion(pred, gt))['DSC']:.4f}")
        n += 1
    print(f"wrote {n} mask/overlay pairs to {args.out}")
    return EXIT_OK


def cmd_summary(args) -> int:
    size = args.size
    if size <= 0 or size % 16:
        raise UsageError(f"--size {size} must be a positive multiple of 16")
    cfg = model_config(args)
    model = build(cfg, args.seed)
    params = count_parameters(model)
    flops = count_flops(model, size, size)
    x = Tensor(np.random.default_rng(args.seed).random((1, 3, size, size), dtype=np.float32))
    model.forward(x, mode="infer")  # warm-up
    t0 = time.perf_counter()
    model.forward(x, mode="infer")
    latency = (time.perf_counter() - t0) * 1e3
    if args.json:
        print(json.dumps({
            "params_total": params.total,
            "params_by_module": params.by_module,
            "flops": flops.total,
            "latency_ms": latency,
        }))
        return EXIT_OK
    lo, hi = PARAM_BAND
    status = "PASS" if params.in_band else "FAIL"
    print(f"ablations: {','.join(sorted(cfg.flags)) or 'none'}")
    print("parameters by module:")
    for name, n in params.by_module.items():
        print(f"  {name:<10s} {n:>8d}")
    print(f"total parameters: {params.total} ({params.total / 1e3:.2f}K); "
          f"target {PAPER_PARAMS / 1e3:.2f}K, band [{lo / 1e3:.0f}K, {hi / 1e3:.0f}K]: {status}")
    print(f"FLOPs at {size}x{size}: {flops.total / 1e9:.3f}G "
          f"(MACs {flops.by_op.get('conv2d', 0) / 2e9:.3f}G in conv); target {PAPER_FLOPS / 1e9:.2f}G at 512x512")
    if size == 512:
        flo, fhi = FLOP_BAND
        print(f"  band [{flo / 1e9:.2f}G, {fhi / 1e9:.2f}G]: {'PASS' if flops.in_band else 'FAIL'}")
    print(f"  convention: {flops.convention}")
    print(f"single-thread forward latency at {size}x{size}: {latency:.1f} ms")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .tensor.gradcheck import REL_TOL, run_suite

    results = run_suite(args.seed)
    if args.json:
        print(json.dumps({r.name: r.max_rel_error for r in results}))
    else:
        for r in results:
            print(f"{r.name:<32s} max rel err {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed (tolerance {REL_TOL}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "summary": cmd_summary,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = resolve(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"miniseg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data_io.DatasetError, CheckpointError, ShapeError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"miniseg: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"miniseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
