"""Command-line front end.

Exit codes: 0 success, 2 usage or config error, 3 data error,
4 incompatible inputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench
from .config import gen_config, load_config, train_config
from .errors import ConfigError, DataError, IncompatibleError
from .events import read_dataset
from .model import predict
from .synthgen import generate_dataset
from .trainer import load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INCOMPATIBLE = 0, 2, 3, 4


def _gen(args) -> int:
    cfg = gen_config(load_config(args.config), seed=args.seed)
    header = generate_dataset(args.events, cfg, args.out, workers=args.workers)
    print(f"wrote {header.n_events} events to {args.out}")
    return EXIT_OK


def _train(args) -> int:
    cfg = train_config(load_config(args.config))
    out = train(args.data, cfg, args.out, log_path=args.log)
    print(f"wrote checkpoint {out}")
    return EXIT_OK


def _eval(args) -> int:
    report = bench.run_eval(args.ckpt, args.data, args.out)
    print(f"macro AUC {report.macro_auc:.4f}  segmentation accuracy {report.segmentation_accuracy:.4f}")
    return EXIT_OK


def _bench(args) -> int:
    weights, hyper, events = bench.load_compatible(args.ckpt, args.data)
    report = bench.bench_inference(weights, hyper, events, args.samples)
    Path(args.out).write_text(bench.dumps_report(report.to_dict()), encoding="utf-8")
    print(f"{report.time_mean_s:.4f} +- {report.time_std_s:.4f} s/sample, peak {report.peak_mem_mib:.2f} MiB")
    return EXIT_OK


def _display(args) -> int:
    if args.ckpt is not None:
        weights, hyper, events = bench.load_compatible(args.ckpt, args.data)
    else:
        _, events = read_dataset(args.data)
    match = [ev for ev in events if ev.event_id == args.event]
    if not match:
        raise DataError(f"event {args.event} not in {args.data}")
    event = match[0]
    predicted = None
    if args.ckpt is not None:
        probs, _ = predict(event, weights, hyper)
        predicted = probs.argmax(axis=1) if len(probs) else probs[:, 0].astype(int)
    spec = bench.DisplaySpec(event.event_id, panels=args.panels)
    Path(args.out).write_text(bench.render_event_display(event, predicted, spec), encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hpst", description="Two-view sparse event segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--events", type=_nonneg, required=True)
    g.add_argument("--seed", type=_nonneg, default=0)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=_positive, default=1)
    g.set_defaults(func=_gen)

    t = sub.add_parser("train", help="train and write the best checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="per-epoch JSON lines (default <out>.log.jsonl)")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=_eval)

    b = sub.add_parser("bench", help="time inference and report the memory model")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--samples", type=_positive, default=100)
    b.add_argument("--out", required=True)
    b.set_defaults(func=_bench)

    d = sub.add_parser("display", help="render one event as SVG")
    d.add_argument("--data", required=True)
    d.add_argument("--ckpt")
    d.add_argument("--event", type=_nonneg, required=True)
    d.add_argument("--panels", choices=("true", "pred", "both"), default="both")
    d.add_argument("--out", required=True)
    d.set_defaults(func=_display)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except IncompatibleError as exc:
        print(f"incompatible: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
