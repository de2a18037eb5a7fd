"""Command-line entry point: ``mof gen-data | train | eval | grad-check``.

Exit codes: 0 success, 1 IO or runtime failure, 2 usage or config error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

from . import config as cfgmod
from .bop import NumericalError, TrainingError, run_training
from .data import DatasetError, generate_dataset, load_dataset, save_dataset, write_summary
from .encoders import load_checkpoint, save_checkpoint
from .evaluation import EvalError, evaluate
from .gradcheck import full_battery
from .records import FormatError

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

CHECKPOINT_NAME = "checkpoint.bin"
MEMORY_NAME = "frames.bin"
LOG_NAME = "log.jsonl"
TIMING_NAME = "timing.jsonl"


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _compress(text: str) -> tuple[int, int]:
    """``U-from-R`` -> (U, R): learn U meta-optimized frames from R regular frames."""
    m = re.fullmatch(r"(\d+)-from-(\d+)", text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"expected U-from-R such as 2-from-16, got {text!r}")
    u, r = int(m.group(1)), int(m.group(2))
    if not 1 <= u <= r:
        raise argparse.ArgumentTypeError(f"need 1 <= U <= R, got {text!r}")
    return u, r


def _default_seed() -> int | None:
    raw = os.environ.get(cfgmod.SEED_ENV)
    return int(raw) if raw is not None and raw.strip().lstrip("-").isdigit() else None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mof", description="Meta-optimized frames for text-video retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic video-text dataset")
    g.add_argument("--seed", type=int, default=None, help=f"generator seed (default ${cfgmod.SEED_ENV} or 0)")
    g.add_argument("--train", type=_positive_int, default=64)
    g.add_argument("--test", type=_positive_int, default=32)
    g.add_argument("--frames", type=_positive_int, default=16)
    g.add_argument("--size", type=_positive_int, default=16, help="frame height and width")
    g.add_argument("--out", required=True, help="dataset file to write")
    g.add_argument("--summary", default=None, help="JSON summary path (default: <out>.json)")
    g.add_argument("--workers", type=_positive_int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train with meta-optimized frames (or the uniform baseline)")
    t.add_argument("--config", default=None, help="key = value file; flags given here override it")
    t.add_argument("--data", default=None)
    t.add_argument("--out", default=None, help="run directory")
    t.add_argument("--compress", type=_compress, default=None, metavar="U-from-R")
    t.add_argument("--phases", type=_positive_int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--alpha", type=_nonneg_float, default=None, help="model learning rate")
    t.add_argument("--beta", type=_nonneg_float, default=None, help="frame learning rate")
    t.add_argument("--inner-steps", type=int, default=None)
    t.add_argument("--batch-size", type=_positive_int, default=None)
    t.add_argument("--eval-every", type=_positive_int, default=None)
    t.add_argument("--k-test", type=_positive_int, default=None)
    t.add_argument("--precision", choices=("f32", "f64"), default=None)
    t.add_argument("--first-order", action="store_true", default=None)
    t.add_argument("--no-mof", action="store_true", help="baseline: train on uniformly sampled frames")
    t.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default=None)
    t.add_argument("--workers", type=_positive_int, default=None, help="evaluation threads")
    t.add_argument("--log-timing", action="store_true", default=None,
                   help="write wall-clock times into the log (breaks bitwise reproducibility)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=_positive_int, default=2, help="frames sampled per test video")
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--workers", type=_positive_int, default=1)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="run the finite-difference oracle battery")
    c.add_argument("--seed", type=int, default=None)
    c.set_defaults(func=cmd_grad_check)
    return parser


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else (_default_seed() or 0)
    try:
        ds = generate_dataset(seed, args.train, args.test, args.frames, 3, args.size, args.size, workers=args.workers)
    except DatasetError as exc:
        print(f"mof gen-data: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    summary = Path(args.summary) if args.summary else out.with_name(out.name + ".json")
    try:
        save_dataset(ds, out)
        write_summary(ds, summary)
    except OSError as exc:
        print(f"mof gen-data: cannot write {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    print(summary.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _train_overrides(args) -> dict:
    flags = {
        "data": args.data, "out": args.out, "t": args.phases, "seed": args.seed, "alpha": args.alpha,
        "beta": args.beta, "inner_steps": args.inner_steps, "batch_size": args.batch_size,
        "eval_every": args.eval_every, "k_test": args.k_test, "precision": args.precision,
        "first_order": args.first_order, "preset": args.preset, "workers": args.workers,
        "log_timing": args.log_timing,
    }
    if args.compress is not None:
        flags["U"], flags["R"] = args.compress
    if args.no_mof:
        flags["mof"] = False
    out = {k: v for k, v in flags.items() if v is not None}
    for item in args.set:
        out.update(cfgmod.parse_text(item.replace("=", " = ", 1), "--set"))
    return out


def _report_line(label: str, pr) -> str:
    if pr is None:
        return json.dumps({label: None})
    phase, rep = pr
    return json.dumps({label: {"phase": phase, **rep.to_json()}}, sort_keys=True)


def cmd_train(args) -> int:
    try:
        file_values = cfgmod.load_file(args.config) if args.config else {}
        cfg = cfgmod.resolve(file_values, _train_overrides(args))
    except OSError as exc:
        print(f"mof train: cannot read config {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    except cfgmod.ConfigError as exc:
        print(f"mof train: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not cfg.data or not cfg.out:
        print("mof train: error: --data and --out are required (on the command line or in --config)",
              file=sys.stderr)
        return EXIT_USAGE

    try:
        ds = load_dataset(cfg.data)
    except OSError as exc:
        print(f"mof train: cannot read dataset {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    except FormatError as exc:
        print(f"mof train: {exc}", file=sys.stderr)
        return EXIT_IO

    phase_cfg = cfg.phase_config()
    try:
        phase_cfg.validate(ds.frames)
        dims = cfg.encoder_dims(ds.height, ds.width, ds.channels, len(ds.vocab))
    except ValueError as exc:
        print(f"mof train: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfgmod.write_resolved(cfg, out)
    except OSError as exc:
        print(f"mof train: cannot write to {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO

    try:
        theta, memory, tlog = run_training(ds, phase_cfg, dims, workers=cfg.workers)
    except NumericalError as exc:
        print(f"mof train: numerical abort at phase {exc.phase}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrainingError as exc:
        print(f"mof train: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        save_checkpoint(out / CHECKPOINT_NAME, theta, tlog.optimizer)
        memory.save(out / MEMORY_NAME)
        tlog.write_jsonl(out / LOG_NAME, timing=cfg.log_timing)
        if not cfg.log_timing:
            _write_timing(tlog, out / TIMING_NAME)
    except OSError as exc:
        print(f"mof train: cannot write to {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    print(_report_line("final", tlog.final()))
    print(_report_line("best", tlog.best()))
    return EXIT_OK


def _write_timing(tlog, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in tlog.records:
            d = {"phase": r.phase, "wall_ms": r.wall_ms}
            if r.eval is not None:
                d["eval_wall_ms"] = r.eval.wall_ms
            fh.write(json.dumps(d) + "\n")


def cmd_eval(args) -> int:
    for label, p in (("checkpoint", args.ckpt), ("dataset", args.data)):
        if not Path(p).is_file():
            print(f"mof eval: {label} not found: {p}", file=sys.stderr)
            return EXIT_IO
    try:
        theta, _ = load_checkpoint(args.ckpt)
        ds = load_dataset(args.data)
    except (OSError, FormatError) as exc:
        print(f"mof eval: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        rep = evaluate(theta, ds.split(args.split), args.k, workers=args.workers)
    except (EvalError, ValueError) as exc:
        print(f"mof eval: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(rep.dumps())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    seed = args.seed if args.seed is not None else (_default_seed() or 0)
    results = full_battery(seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_IO


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"mof: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
