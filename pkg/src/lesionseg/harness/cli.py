"""``lesionseg`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 some (but not all) grid cells failed.
"""
from __future__ import annotations

import argparse
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"{v} is not an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration file (defaults if omitted)")
    common.add_argument("--data", metavar="DIR", help="dataset directory written by `generate`")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
    common.add_argument("--threads", type=_positive, default=None, metavar="N",
                        help="worker processes for `matrix`; BLAS threads otherwise")
    common.add_argument("--seed", type=_u64, default=None, metavar="U64",
                        help="override the config seed (data.seed for generate, "
                             "train.seed for train, grid.seeds for matrix, suite seed for gradcheck)")
    p = _Parser(prog="lesionseg", description="Lesion segmentation experiments on synthetic head phantoms.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write the synthetic dataset (SEG1 files + manifest)")
    sub.add_parser("train", parents=[common], help="train one architecture/loss pair")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a parameter dump on a dataset")
    ev.add_argument("params", metavar="PARAMS", help="parameter file written by `train`")
    ev.add_argument("--split", choices=("val", "train", "all"), default="val",
                    help="which part of the dataset to score (default: val, or train when there is no val)")
    sub.add_parser("matrix", parents=[common], help="run the architecture x loss x seed grid")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every gradient")
    sub.add_parser("defaults", parents=[common], help="print the reference configuration with all defaults")
    return p


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"`{args.command}` requires --{n}")


def _echo(msg):
    print(msg, file=sys.stderr, flush=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.command != "matrix" and "numpy" not in sys.modules:
        for k in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[k] = str(args.threads)
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"lesionseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME


def _dispatch(args) -> int:
    from .. import segio

    try:
        cfg = segio.parse_config(args.config)
    except segio.ConfigError as exc:
        print(f"lesionseg: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "defaults":
            print(segio.default_config_text(), end="")
            return EXIT_OK
        if args.command == "generate":
            return _generate(args, cfg)
        if args.command == "train":
            return _train(args, cfg)
        if args.command == "eval":
            return _eval(args, cfg)
        if args.command == "matrix":
            return _matrix(args, cfg)
        if args.command == "gradcheck":
            return _gradcheck(args)
    except UsageError:
        raise
    except segio.ConfigError as exc:
        raise UsageError(f"config error: {exc}") from None
    except FileExistsError as exc:
        # refusing to clobber an output directory is a usage problem, not a crash
        raise UsageError(str(exc)) from None
    except Exception as exc:
        print(f"lesionseg: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    raise UsageError(f"unknown command {args.command}")


def _generate(args, cfg) -> int:
    import dataclasses

    from .runner import write_dataset

    _require(args, "out")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, seed=args.seed))
    path = write_dataset(args.out, cfg, args.force)
    n = cfg.data.n_cases * cfg.data.slices_per_case
    print(f"wrote {n} slices and {path}")
    return EXIT_OK


def _train(args, cfg) -> int:
    import dataclasses

    from .runner import load_dataset, train_run

    _require(args, "data", "out")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    data = load_dataset(args.data)
    _check_dims(cfg, data)
    _, history = train_run(cfg, data, args.out, args.force, echo=_echo)
    final = history[-1].val_dice if history else float("nan")
    print(f"trained {cfg.model.arch}/{cfg.loss.kind} for {cfg.train.epochs} epochs; final val dice {final:.4f}")
    return EXIT_OK


def _check_dims(cfg, data):
    from ..segio import ConfigError

    if not data.samples:
        raise ValueError("dataset is empty")
    h, w = data.samples[0].image.shape[2:]
    m = 2 ** cfg.model.depth
    if h % m or w % m:
        raise ConfigError(f"slices are {h}x{w}; model.depth={cfg.model.depth} needs dims divisible by {m}")


def _eval(args, cfg) -> int:
    from pathlib import Path

    from .. import segio
    from .runner import evaluate_run, load_dataset

    _require(args, "data")
    params, model = segio.read_params(args.params)
    data = load_dataset(args.data)
    if args.split == "all":
        samples = data.samples
    elif args.split == "train" or not data.val:
        samples = data.train
    else:
        samples = data.val
    d, se, sp = evaluate_run(params, model, samples, cfg.grid.threshold, cfg.grid.pooling)
    line = f"dice={segio.fmt4(d)} sensitivity={segio.fmt4(se)} specificity={segio.fmt4(sp)}"
    print(line)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        target = out / "eval.csv"
        if target.exists() and not args.force:
            raise FileExistsError(f"{target} exists (use --force to overwrite)")
        target.write_text(
            "split,n_slices,threshold,pooling,dice,sensitivity,specificity\n"
            f"{args.split},{len(samples)},{cfg.grid.threshold},{cfg.grid.pooling},"
            f"{segio.fmt4(d)},{segio.fmt4(se)},{segio.fmt4(sp)}\n"
        )
    return EXIT_OK


def _matrix(args, cfg) -> int:
    import dataclasses

    from .runner import load_dataset, run_matrix

    _require(args, "out")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, grid=dataclasses.replace(cfg.grid, seeds=(args.seed,)))
    data = load_dataset(args.data) if args.data else None
    if data is not None:
        _check_dims(cfg, data)
    rows, failures = run_matrix(cfg, args.out, data=data, threads=args.threads or 1,
                                force=args.force, echo=_echo)
    from ..segio import summary_text

    print(summary_text(rows), end="")
    if failures:
        print(f"{len(failures)} of {len(rows)} cells failed; see failures.txt", file=sys.stderr)
        return EXIT_PARTIAL if len(failures) < len(rows) else EXIT_RUNTIME
    return EXIT_OK


def _gradcheck(args) -> int:
    from .gradcheck import main_report

    base = args.seed or 0
    ok = main_report(seeds=range(base, base + 5))
    return EXIT_OK if ok else EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
