"""``svan`` command line: analyze, train, infer, eval, ablate."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis, data
from .model import ARRANGEMENTS, SCALES, CheckpointError, SvanConfig, load_params
from .training import (
    ConfigError,
    TrainingDiverged,
    evaluate,
    bicubic_model,
    load_config,
    super_resolve,
    train,
)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_CONFIG = 5
EXIT_TRAINING = 6


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _run_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("SVAN_RUN_DIR", "runs"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_analyze(args) -> int:
    if args.table3:
        h, w = args.size
        lines = [f"{'conv':<16}{'rf':>4}{'params[K]':>11}{'FLOPs[G]':>11}"]
        for name, rf, kparams, gflops in analysis.table3(h, w):
            lines.append(f"{name:<16}{rf:>4}{kparams:>11.3f}{gflops:>11.4f}")
        cmp = analysis.compare_decompositions(17, 5, 3, h=h, w=w)
        lines.append(f"param ratio (pair / 17x17): {cmp.param_ratio:.2%}")
        lines.append("params exclude the 1x1 point conv; FLOPs include it (valid convention)")
        _write("\n".join(lines), args.out)
        return 0
    cfg = SvanConfig(scale=args.scale)
    report = analysis.count_flops(cfg, args.size[0], args.size[1], args.convention)
    _write(report.to_csv() if args.csv else report.to_text(), args.out)
    return 0


def cmd_train(args) -> int:
    tc = load_config(args.config)
    if args.seed is not None:
        tc.model = replace(tc.model, seed=args.seed)
    if tc.train_dir is None:
        raise ConfigError("config sets no train_dir")
    dataset = data.load_dataset(tc.train_dir, tc.model.scale)
    val_set = data.load_dataset(tc.val_dir, tc.model.scale) if tc.val_dir else None
    run_dir = _run_root(args)
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.config, run_dir / "config.txt")
    _, trainlog = train(
        tc.model,
        dataset,
        tc.stages,
        augment=tc.augment,
        val_set=val_set,
        val_every=tc.val_every,
        run_dir=run_dir,
    )
    (run_dir / "logs" / "train_log.csv").write_text(trainlog.to_csv())
    (run_dir / "logs" / "validation.csv").write_text(trainlog.validation_csv())
    first, last = trainlog.losses[:1], trainlog.losses[-1:]
    if first:
        print(f"steps {len(trainlog.steps)}  loss {first[0]:.6f} -> {last[0]:.6f}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_infer(args) -> int:
    params = load_params(args.checkpoint)
    if args.scale is not None and args.scale != params.config.scale:
        raise CheckpointError(f"checkpoint is x{params.config.scale}, requested x{args.scale}")
    lr = data.load_png(args.input)
    data.save_png(super_resolve(params, lr), args.out)
    return 0


def cmd_eval(args) -> int:
    if args.bicubic:
        model = bicubic_model(args.scale)
    else:
        model = load_params(args.checkpoint)
        if model.config.scale != args.scale:
            raise CheckpointError(f"checkpoint is x{model.config.scale}, requested x{args.scale}")
    dataset = data.load_dataset(args.dataset, args.scale)
    report = evaluate(model, dataset, args.scale, args.shave)
    _write(report.to_csv(), args.out)
    if args.out:
        print(f"mean PSNR-Y {report.mean_psnr:.4f} dB  SSIM-Y {report.mean_ssim:.4f}")
    return 0


def cmd_ablate(args) -> int:
    labels = args.arrangements or list(ARRANGEMENTS)
    tc = load_config(args.config)
    if args.seed is not None:
        tc.model = replace(tc.model, seed=args.seed)
    if tc.train_dir is None:
        raise ConfigError("config sets no train_dir")
    dataset = data.load_dataset(tc.train_dir, tc.model.scale)
    val_set = data.load_dataset(tc.val_dir, tc.model.scale) if tc.val_dir else dataset
    rows = []
    for label in labels:
        cfg = replace(tc.model, arrangement=label)
        params, trainlog = train(cfg, dataset, tc.stages, augment=tc.augment)
        psnr = evaluate(params, val_set, cfg.scale).mean_psnr
        rows.append((label, params.num_params(), trainlog.losses[-1] if trainlog.losses else float("nan"), psnr))
    counts = {r[1] for r in rows}
    if len(counts) != 1:
        raise RuntimeError(f"arrangements disagree on parameter count: {sorted(counts)}")
    lines = ["arrangement,params,final_loss,val_psnr_y"]
    lines += [f"{a},{p},{loss!r},{psnr:.6f}" for a, p, loss, psnr in rows]
    _write("\n".join(lines), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _scale(value: str) -> int:
    try:
        s = int(value)
    except ValueError:
        s = None
    if s not in SCALES:
        raise argparse.ArgumentTypeError(f"scale must be one of {', '.join(map(str, SCALES))}")
    return s


def _arrangement(value: str) -> str:
    if value not in ARRANGEMENTS:
        raise argparse.ArgumentTypeError(f"unknown arrangement {value!r}; choose from {', '.join(ARRANGEMENTS)}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap numeric worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="svan", description="Symmetric visual attention network for super-resolution")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", parents=[common], help="parameter / FLOPs / receptive-field report")
    a.add_argument("--scale", type=_scale, default=4)
    a.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=(256, 256))
    a.add_argument("--convention", choices=["padded", "valid"], default="padded")
    a.add_argument("--table3", action="store_true", help="large-kernel decomposition comparison")
    a.add_argument("--csv", action="store_true", help="emit CSV instead of a text table")
    a.add_argument("--out", help="write the report here instead of stdout")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", parents=[common], help="run the training protocol")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory (default $SVAN_RUN_DIR or ./runs)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="super-resolve one PNG")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scale", type=_scale)
    i.add_argument("--out", required=True)
    i.add_argument("input")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="PSNR-Y / SSIM-Y over a directory of HR PNGs")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--bicubic", action="store_true")
    e.add_argument("--scale", type=_scale, required=True)
    e.add_argument("--shave", type=int, help="border pixels to ignore (default: scale)")
    e.add_argument("--out", help="CSV path (default stdout)")
    e.add_argument("dataset")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("ablate", parents=[common], help="train each arrangement under one budget")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="CSV path (default stdout)")
    b.add_argument("arrangements", nargs="*", type=_arrangement)
    b.set_defaults(func=cmd_ablate)
    return p


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except CheckpointError as exc:
        return _fail("checkpoint", exc, EXIT_CHECKPOINT)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except TrainingDiverged as exc:
        return _fail("training", exc, EXIT_TRAINING)
    except (OSError, ValueError) as exc:
        return _fail("data", exc, EXIT_DATA)


def _fail(category: str, exc: Exception, code: int) -> int:
    print(f"svan: error [{category}]: {exc}", file=sys.stderr)
    return code

if __name__ == "__main__":
    sys.exit(main())
