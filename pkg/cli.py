"""Command-line entry point.

    python cli.py gen-synth --out DIR --count N --seed S
    python cli.py train --data DIR --config FILE --out DIR
    python cli.py eval --ckpt FILE --data DIR [--csv FILE]
    python cli.py detect --ckpt FILE --image FILE [--conf 0.5] [--heatmap DIR]
    python cli.py bench-scan --L 4096 8192 --D 16 --N 16 --kernel sequential
    python cli.py gradcheck [--op NAME]
    python cli.py report-cost --config FILE

Exit codes: 0 success, 1 validation error, 2 runtime failure or failed gradcheck.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

import config
import numerics as nx

logger = logging.getLogger("cli")

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2


def _gradcheck_registry() -> None:
    # importing registers the scan, oss and block cases next to the operator ones
    import blocks  # noqa: F401
    import oss2d  # noqa: F401
    import ssm  # noqa: F401


# ------------------------ commands ------------------------
def cmd_gen_synth(args) -> int:
    from synth import SynthSpec, gen_synth
    spec = SynthSpec(image_size=args.size, count=args.count, seed=args.seed)
    gen_synth(spec, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from dataset import load_dataset
    from inference import print_report
    from train import build_model, train

    train_cfg, net = config.load_config(args.config)
    if args.max_steps is not None:
        train_cfg.max_steps = args.max_steps
    train_path = os.path.join(args.data, "train.csv")
    if not os.path.isfile(train_path):
        train_path = os.path.join(args.data, "manifest.csv")
    records = load_dataset(train_path, net.input_size, net.class_count)
    val_path = os.path.join(args.data, "val.csv")
    val = load_dataset(val_path, net.input_size, net.class_count) if os.path.isfile(val_path) else []
    model = build_model(net)
    result = train(model, records, train_cfg, args.out, val_records=val or None)
    if result.best_report and result.final_report:
        print_report(replace(result.best_report, title=f"best checkpoint (epoch {result.best_epoch})"))
        print()
        print_report(replace(result.final_report, title="final checkpoint"))
    print(f"last: {result.last_path}")
    print(f"best: {result.best_path}")
    print(f"log:  {result.log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from inference import evaluate, load_checkpoint, load_eval_records, print_report
    from metrics import write_report_csv

    ckpt = load_checkpoint(args.ckpt)
    records = load_eval_records(args.data, ckpt.net)
    report = evaluate(ckpt.model, records, ckpt.train.eval_conf, title=os.path.basename(args.ckpt))
    print_report(report)
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            write_report_csv(report, fh)
    return EXIT_OK


def cmd_detect(args) -> int:
    from inference import detect, load_checkpoint

    if not 0.0 <= args.conf <= 1.0:
        raise ValueError(f"--conf must lie in [0, 1], got {args.conf}")
    ckpt = load_checkpoint(args.ckpt)
    result = detect(ckpt.model, args.image, args.conf, args.heatmap)
    for line in result.lines():
        print(line)
    if not result.detections:
        print("no detections")
    return EXIT_OK


def cmd_bench_scan(args) -> int:
    import ssm
    rows = ssm.bench_scan(args.L, args.D, args.N, args.kernel, repeats=args.repeats,
                          chunk=args.chunk, workers=args.workers)
    ssm.write_bench_csv(rows, sys.stdout)
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            ssm.write_bench_csv(rows, fh)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _gradcheck_registry()
    names = [args.op] if args.op else sorted(nx.GRADCHECK_CASES)
    failed = 0
    for name in names:
        report = nx.grad_check(name, seed=args.seed)
        ok = report.passed(args.tol)
        failed += not ok
        print(f"{name:<26} {report.max_rel_err:.3e} {'PASS' if ok else 'FAIL'}")
    print(f"{len(names) - failed}/{len(names)} passed")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_report_cost(args) -> int:
    from network import report_cost
    _, net = config.load_config(args.config)
    for line in report_cost(net).lines():
        print(line)
    return EXIT_OK


# ------------------------ parser ------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feryolo", description="Facial-expression detector with selective scans.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write the procedural face corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=700)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=160)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="detect faces in one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--conf", type=float, default=0.5)
    p.add_argument("--heatmap", default=None, metavar="DIR")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench-scan", help="time a scan kernel")
    p.add_argument("--L", type=int, nargs="+", required=True)
    p.add_argument("--D", type=int, default=16)
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--kernel", choices=("sequential", "parallel"), default="sequential")
    p.add_argument("--chunk", type=int, default=64)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_bench_scan)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    p.add_argument("--op", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report-cost", help="parameter and FLOP counts")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_report_cost)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except (RuntimeError, OSError, FloatingPointError) as exc:
        logger.error("%s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
