"""Exporter command line.

Exit codes: 0 success, 2 bad arguments, 3 parse/decode failure,
4 encoder or endpoint unavailable.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .describe import DEFAULT_INSTRUCTION, DescribeJob, generate_descriptions
from .embed import embed_descriptions
from .errors import EncoderLoadError, EndpointError, ImageDecodeError, ParseError
from .export import DEFAULT_TEMPLATES, ExportJob, export_embeddings

EXIT_BAD_ARGS = 2
EXIT_PARSE = 3
EXIT_UNAVAILABLE = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="propshot-export",
        description="Export embeddings and descriptions into bundle formats.")
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export-embeddings",
                         help="encode a class-foldered image dataset")
    exp.add_argument("dataset_root")
    exp.add_argument("--encoder", default="color-probe-64")
    exp.add_argument("--out", required=True)
    exp.add_argument("--shots", type=int, required=True)
    exp.add_argument("--template", action="append", default=None,
                     help="prompt template with {} for the class name; repeatable")
    exp.add_argument("--device", default="cpu")
    exp.add_argument("--batch-size", type=int, default=32)
    exp.add_argument("--m-tokens", type=int, default=3)
    exp.add_argument("--seed", type=int, default=0)

    gen = sub.add_parser("generate-descriptions",
                         help="ask an LLM endpoint (or replay a cache)")
    gen.add_argument("--classes", nargs="*", default=[])
    gen.add_argument("--dataset-type", default="real world")
    gen.add_argument("--out", required=True)
    gen.add_argument("--per-class", type=int, default=8)
    gen.add_argument("--instruction", default=DEFAULT_INSTRUCTION)
    gen.add_argument("--endpoint", default="https://api.openai.com/v1/chat/completions")
    gen.add_argument("--model", default="gpt-3.5-turbo")
    gen.add_argument("--from-cache", default=None,
                     help="replay raw responses from this JSON file; no network")
    gen.add_argument("--cache", default=None,
                     help="where live raw responses are stored")

    emb = sub.add_parser("embed-descriptions",
                         help="embed descriptions.jsonl into plain/extended matrices")
    emb.add_argument("descriptions")
    emb.add_argument("--encoder", default="color-probe-64")
    emb.add_argument("--out", required=True)
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "export-embeddings":
        job = ExportJob(
            dataset_root=Path(args.dataset_root),
            encoder_id=args.encoder,
            out_dir=Path(args.out),
            shots=args.shots,
            templates=args.template or list(DEFAULT_TEMPLATES),
            device=args.device,
            batch_size=args.batch_size,
            m_props=args.m_tokens,
            seed=args.seed,
        )
        print(export_embeddings(job))
        return 0
    if args.command == "generate-descriptions":
        job = DescribeJob(
            class_names=list(args.classes),
            dataset_type=args.dataset_type,
            out_path=Path(args.out),
            per_class=args.per_class,
            instruction=args.instruction,
            endpoint_url=args.endpoint,
            model=args.model,
            from_cache=Path(args.from_cache) if args.from_cache else None,
            cache_path=Path(args.cache) if args.cache else None,
        )
        print(generate_descriptions(job))
        return 0
    if args.command == "embed-descriptions":
        print(embed_descriptions(args.descriptions, args.encoder, args.out))
        return 0
    raise ValueError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS
    except (ImageDecodeError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (EncoderLoadError, EndpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNAVAILABLE


if __name__ == "__main__":
    sys.exit(main())
