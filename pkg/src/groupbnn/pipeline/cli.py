"""Command line entry point: ``groupbnn <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import time
from pathlib import Path

from groupbnn.architecture import ConfigurationError
from groupbnn.evolution import read_genome
from groupbnn.pipeline import stages
from groupbnn.pipeline.config import RunConfig, dump_run_config, load_run_config
from groupbnn.pipeline.data import DataError, load_dataset
from groupbnn.training_engine import DivergenceError

log = logging.getLogger("groupbnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bit-reproducible execution")
    common.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
    common.add_argument("--checkpoint", type=Path, help="checkpoint to resume from or to read")
    common.add_argument("--genome", type=Path, help="genome file (TOML [groups] table)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="groupbnn", description="Binary MobileNet group-count search pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train-supernet", parents=[common], help="train the weight-sharing supernet")
    sub.add_parser("search", parents=[common], help="evolutionary search over group counts")
    sub.add_parser("retrain", parents=[common], help="train the searched network from scratch")
    ev = sub.add_parser("eval", parents=[common], help="top-1/top-5 accuracy of a model checkpoint")
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    sub.add_parser("flops", parents=[common], help="per-layer FLOP breakdown")
    sub.add_parser("run-all", parents=[common], help="supernet, search, retrain and eval in one go")
    return parser


def _run_config(args) -> RunConfig:
    run = load_run_config(args.config) if args.config else RunConfig()
    if not args.config and not Path(run.data.path).exists():
        raise ConfigurationError(f"data.path does not exist: {run.data.path} (pass --config)")
    if args.seed is not None:
        run.seed = args.seed
    if args.deterministic:
        run.deterministic = True
    if args.out is not None:
        run.out_dir = str(args.out)
    return run


def _limit_threads(run: RunConfig):
    if not run.deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def _log_epoch(stage):
    def log_row(row):
        log.info("%s epoch %d: loss %.4f train %.4f val %.4f (%.1fs)", stage, row["epoch"],
                 row["train_loss"], row["train_top1"], row["val_top1"], row["wall_seconds"])
    return log_row


def _genome(args, out: Path):
    path = args.genome or out / "best_genome.toml"
    if not path.exists():
        raise ConfigurationError(f"genome file not found: {path}")
    return read_genome(path)


def _dispatch(args) -> int:
    run = _run_config(args)
    out = Path(run.out_dir)
    if args.command == "flops":
        if run.data.name == "mnist":
            shape, classes = (1, 28, 28), 10
        else:
            shape, classes = (3, 32, 32), 10
        config = run.network_config(shape[0], shape[1:], classes)
        genome = read_genome(args.genome) if args.genome else None
        report = stages.report_flops(config, genome)
        for row in report["layers"]:
            kind = "binary" if row["binary"] else "fp"
            print(f"{row['name']:<18} {kind:<7} {row['macs']:>12d} MACs  {row['flops']:>14.1f} FLOPs")
        print(f"binary FLOPs {report['binary_flops']:.6g}  full-precision FLOPs "
              f"{report['full_precision_flops']:.6g}  total {report['total_flops']:.6g}")
        return EXIT_OK

    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.toml").write_text(dump_run_config(run))
    splits = load_dataset(run.data.name, run.data.path, run.data.val_size)
    t0 = time.perf_counter()
    with _limit_threads(run):
        if args.command in ("train-supernet", "run-all"):
            resume = args.checkpoint if args.command == "train-supernet" else None
            stages.train_supernet(run, splits, out, resume=resume, on_epoch=_log_epoch("supernet"))
        if args.command in ("search", "run-all"):
            ckpt = (args.checkpoint if args.command == "search" and args.checkpoint
                    else out / "supernet.ckpt")
            outcome = stages.search(run, splits, ckpt, out)
            log.info("search: best %s fitness %.4f flops %.6g (random median %.4f)",
                     outcome.best.genome, outcome.best.fitness, outcome.best.flops,
                     outcome.control_median)
        if args.command in ("retrain", "run-all"):
            genome = _genome(args, out)
            resume = args.checkpoint if args.command == "retrain" else None
            result = stages.retrain(run, splits, genome, out, resume=resume,
                                    on_epoch=_log_epoch("retrain"))
            print(json.dumps(result, sort_keys=True))
        if args.command == "eval":
            ckpt = args.checkpoint or out / "model.ckpt"
            result = stages.evaluate(ckpt, splits[args.split], run.train.eval_batch_size)
            print(json.dumps(result, sort_keys=True))
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        return EXIT_DIVERGED
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
