"""Command-line exporter.

Exit codes: 2 for bad input, unknown models, or configuration problems,
3 when a batch exceeds available memory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from speechkg.errors import SpeechKgError

from .export import POOLING_MODES, ExportError, ExportRequest, ResourceLimitError, export_embeddings


def setup_logging() -> None:
    name = os.environ.get("SPEECHKG_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ResourceLimitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ExportError, SpeechKgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechkg-export",
        description="Encode node texts with a transformer and write a speechkg embedding file.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_export = sub.add_parser("export", help="encode a JSONL of {key, text} records")
    p_export.add_argument("--model", required=True, help="model name or local checkpoint directory")
    p_export.add_argument("--input", required=True, help="JSONL with one {key, text} record per line")
    p_export.add_argument("--output", required=True, help="embedding file to write")
    p_export.add_argument("--batch-size", type=int, default=32, help="texts per encoder pass")
    p_export.add_argument(
        "--pooling",
        choices=POOLING_MODES,
        default="model_default",
        help="how to collapse token states into one vector",
    )
    p_export.set_defaults(func=cmd_export)
    return parser


def cmd_export(args) -> int:
    req = ExportRequest(
        model_name=args.model,
        input_path=args.input,
        batch_size=args.batch_size,
        pooling=args.pooling,
    )
    summary = export_embeddings(req, args.output)
    print(f"exported {summary['count']} embeddings of dim {summary['dim']} -> {args.output}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
