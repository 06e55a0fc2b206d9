"""Command-line front end for the staged pipeline.

Exit codes: 0 success, 2 bad arguments, 3 validation/format failure,
4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import sys

from . import cache as cache_mod
from . import pipeline
from .errors import (
    ArgumentError,
    ChecksumError,
    FormatError,
    NonFiniteLoss,
    PropshotError,
    ShapeHeaderMismatch,
    ValidationError,
)

EXIT_BAD_ARGS = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="propshot",
        description="Few-shot classification with learned property tokens.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synth", help="write a synthetic bundle")
    gen.add_argument("--classes", type=int, default=10)
    gen.add_argument("--shots", type=int, default=16)
    gen.add_argument("--queries", type=int, default=20)
    gen.add_argument("--dim", type=int, default=64)
    gen.add_argument("--patches", type=int, default=8)
    gen.add_argument("--props", type=int, default=3)
    gen.add_argument("--noise", type=float, default=0.1)
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--out", required=True)

    cluster = sub.add_parser("cluster", help="k-means over the description pool")
    cluster.add_argument("run", help="run directory containing manifest.json")
    cluster.add_argument("--k", default="auto",
                         help="cluster count, or 'auto' for half the classes")
    cluster.add_argument("--seed", type=int, default=None)

    select = sub.add_parser("select", help="rank clusters and build pools")
    select.add_argument("run")
    select.add_argument("--m", type=int, default=None,
                        help="property slots per class (default: manifest M)")

    tmpg = sub.add_parser("train-mpg", help="contrastive property-token training")
    tmpg.add_argument("run")
    tmpg.add_argument("--epochs", type=int, default=30)
    tmpg.add_argument("--lr", type=float, default=5e-4)
    tmpg.add_argument("--batch", type=int, default=16)
    tmpg.add_argument("--tau", type=float, default=0.3)
    tmpg.add_argument("--negatives", type=int, default=100)
    tmpg.add_argument("--hard-start", type=float, default=0.1)
    tmpg.add_argument("--hard-end", type=float, default=0.4)
    tmpg.add_argument("--layers", type=int, default=2)
    tmpg.add_argument("--hidden", type=int, default=None)
    tmpg.add_argument("--heads", type=int, default=1)
    tmpg.add_argument("--seed", type=int, default=None)

    tcache = sub.add_parser("train-cache", help="fine-tune cache keys and weights")
    tcache.add_argument("run")
    tcache.add_argument("--epochs", type=int, default=15)
    tcache.add_argument("--lr", type=float, default=1e-3)
    tcache.add_argument("--batch", type=int, default=128)
    tcache.add_argument("--beta-s", type=float, default=cache_mod.DEFAULT_BETA_S)
    tcache.add_argument("--logit-scale", type=float,
                        default=cache_mod.DEFAULT_LOGIT_SCALE)
    tcache.add_argument("--seed", type=int, default=None)

    ev = sub.add_parser("eval", help="score the query split and write report.json")
    ev.add_argument("run")
    ev.add_argument("--beta-s", type=float, default=cache_mod.DEFAULT_BETA_S)
    ev.add_argument("--logit-scale", type=float,
                    default=cache_mod.DEFAULT_LOGIT_SCALE)

    diff = sub.add_parser("report-diff", help="numeric deltas between two reports")
    diff.add_argument("report_a")
    diff.add_argument("report_b")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "gen-synth":
        path = pipeline.stage_gen_synth(
            args.out, n_classes=args.classes, shots=args.shots,
            queries=args.queries, dim=args.dim, patches=args.patches,
            props=args.props, noise=args.noise, seed=args.seed)
        print(path)
        return 0
    if args.command == "cluster":
        if args.k != "auto":
            try:
                int(args.k)
            except ValueError:
                raise ArgumentError(f"--k must be an integer or 'auto', got {args.k!r}")
        print(pipeline.stage_cluster(args.run, k=args.k, seed=args.seed))
        return 0
    if args.command == "select":
        print(pipeline.stage_select(args.run, m=args.m))
        return 0
    if args.command == "train-mpg":
        print(pipeline.stage_train_mpg(
            args.run, epochs=args.epochs, lr=args.lr, batch_size=args.batch,
            tau=args.tau, n_negatives=args.negatives,
            hard_frac_start=args.hard_start, hard_frac_end=args.hard_end,
            layers=args.layers, hidden=args.hidden, heads=args.heads,
            **({} if args.seed is None else {"seed": args.seed})))
        return 0
    if args.command == "train-cache":
        print(pipeline.stage_train_cache(
            args.run, epochs=args.epochs, lr=args.lr, batch_size=args.batch,
            beta_s=args.beta_s, logit_scale=args.logit_scale, seed=args.seed))
        return 0
    if args.command == "eval":
        print(pipeline.stage_eval(args.run, beta_s=args.beta_s,
                                  logit_scale=args.logit_scale))
        return 0
    if args.command == "report-diff":
        text, _ = pipeline.report_diff(args.report_a, args.report_b)
        print(text)
        return 0
    raise ArgumentError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS
    except (ValidationError, FormatError, ShapeHeaderMismatch, ChecksumError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PropshotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
