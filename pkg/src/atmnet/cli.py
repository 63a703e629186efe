"""``atmnet`` command line.

Exit codes: 0 success, 2 configuration or argument error, 3 data error,
4 numeric failure (non-finite loss, gradient check above tolerance).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import VARIANTS, DataConfig, TrainConfig, get_variant, load_train_config
from .errors import ArgumentError, ConfigError, DataError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@contextlib.contextmanager
def _output(path):
    """Yield a text stream: the --out file if given, otherwise stdout."""
    if path is None or path == "-":
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _data_config(args, base: DataConfig | None = None) -> DataConfig:
    d = replace(base) if base is not None else DataConfig()
    if getattr(args, "data", None):
        d.kind, d.path = "cifar", args.data
    if getattr(args, "task", None):
        d.kind, d.task = "synthetic", args.task
    if getattr(args, "num_samples", None):
        d.num_samples = args.num_samples
    if args.resolution is not None and d.kind == "synthetic":
        d.resolution = args.resolution
    return d


def _load_dataset(args, base=None, stats=None):
    from .data import ingest_cifar_binary, ingest_synthetic

    d = _data_config(args, base)
    if d.kind == "cifar":
        return ingest_cifar_binary(d.path, stats=stats)
    return ingest_synthetic(d.task, d.num_samples, d.resolution, _seed(args), stats=stats)


def _model(args, default_variant="micro"):
    from .backbone import build_variant
    from .checkpoint import load_checkpoint

    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint, args.variant)
    return build_variant(get_variant(args.variant or default_variant), seed=_seed(args))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_count(args) -> int:
    from .backbone import check_resolution, count_flops, count_params

    check_resolution(args.resolution, args.resolution)
    names = [args.variant] if args.variant else list(VARIANTS)
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "params", "flops"))
        for name in names:
            cfg = get_variant(name)
            w.writerow((name, count_params(cfg), count_flops(cfg, args.resolution, args.resolution)))
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .train import train

    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.variant:
        cfg.variant, cfg.model = args.variant, None
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.total_steps = args.steps
        cfg.warmup_steps = min(cfg.warmup_steps, args.steps)
    if args.freeze_offsets:
        cfg.freeze_offsets = True
    cfg.data = _data_config(args, cfg.data)
    cfg.validate()
    report = train(cfg)
    with _output(args.out) as fh:
        report.write_csv(fh)
    if args.checkpoint:
        save_checkpoint(report.model, args.checkpoint)
    print(f"final train accuracy {report.final_accuracy:.4f} loss {report.final_loss:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    model = _model(args)
    data = _load_dataset(args)
    loss, acc = evaluate(model, data)
    if not np.isfinite(loss):
        raise NumericError("non-finite evaluation loss")
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("samples", "loss", "acc"))
        w.writerow((len(data), repr(loss), repr(acc)))
    return EXIT_OK


def cmd_offsets(args) -> int:
    from .analysis import export_offset_histograms

    model = _model(args)
    data = _load_dataset(args)
    out_dir = args.out or "offsets"
    hists = export_offset_histograms(model, data, args.query, out_dir, args.resolution)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("layer", "extent", "groups", "total"))
    for h in hists:
        w.writerow((h.name, h.extent, h.groups, h.total))
    return EXIT_OK


def cmd_fpn_demo(args) -> int:
    from .backbone import check_resolution, stage_extents
    from .engine import Array
    from .neck import FeaturePyramid, build_fpn, fpn_flops, fpn_forward

    cfg = get_variant(args.variant or "xT")
    res = args.resolution or 224
    check_resolution(res, res)
    extents = stage_extents(res, res)
    rng = np.random.default_rng(_seed(args))
    levels = [Array(rng.normal(size=(1, h, w, c)).astype(np.float32))
              for (h, w), c in zip(extents, cfg.channels)]
    modes = ("plain", "atm") if args.mode == "both" else (args.mode,)
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("mode", "level", "stride", "in_channels", "height", "width", "out_channels", "neck_flops"))
        for mode in modes:
            fpn = build_fpn(cfg.channels, args.channels, mode, seed=_seed(args))
            out = fpn_forward(FeaturePyramid(levels), fpn)
            flops = fpn_flops(extents, cfg.channels, args.channels, mode)
            for i, (x, y) in enumerate(zip(levels, out.levels)):
                if not np.all(np.isfinite(y.data)):
                    raise NumericError(f"non-finite {mode} neck output at level {i}")
                w.writerow((mode, i, out.strides[i], x.shape[-1], y.shape[1], y.shape[2], y.shape[-1], flops))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    if args.dtype != "f64":
        raise ConfigError(f"gradient checks run in 64-bit only; got --dtype {args.dtype}")
    results = run_suite(_seed(args))
    worst = max(results.values())
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("check", "max_rel_error", "ok"))
        for name, err in results.items():
            w.writerow((name, f"{err:.3e}", int(err < args.tol)))
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g})", file=sys.stderr)
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="default 0 (train: the config's seed)")
    common.add_argument("--variant", default=None, help="xT, T, S, B, L or micro")
    common.add_argument("--resolution", type=int, default=None)
    common.add_argument("--out", default=None, help="output path (default: stdout)")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--task", choices=("stripes", "spatial"), default=None, help="synthetic dataset")
    data.add_argument("--data", default=None, help="CIFAR-style binary file")
    data.add_argument("--num-samples", type=int, default=None)

    p = argparse.ArgumentParser(prog="atmnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("count", parents=[common], help="parameter and FLOP table (CSV)")
    s.set_defaults(func=cmd_count, resolution=224)

    s = sub.add_parser("train", parents=[common, data], help="train on a toy dataset")
    s.add_argument("--config", default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--freeze-offsets", action="store_true")
    s.add_argument("--checkpoint", default=None, help="where to save the final model")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, data], help="loss and accuracy of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("offsets", parents=[common, data], help="export offset histograms (CSV per layer)")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--query", choices=("center", "all"), default="center")
    s.set_defaults(func=cmd_offsets)

    s = sub.add_parser("fpn-demo", parents=[common], help="run plain/ATM FPN necks on a random pyramid")
    s.add_argument("--mode", choices=("plain", "atm", "both"), default="both")
    s.add_argument("--channels", type=int, default=256)
    s.set_defaults(func=cmd_fpn_demo)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--dtype", default="f64")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        where = f" (step {exc.step})" if exc.step is not None else ""
        print(f"numeric error{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
