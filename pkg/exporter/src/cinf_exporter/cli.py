"""Exporter CLI: export, tokenize, parity, make-checkpoint."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cinf-exporter",
        description="Convert pretrained decoder checkpoints to CINF bundles",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("export", help="convert a checkpoint directory to a bundle")
    p.add_argument("--checkpoint", required=True, help="Hugging Face checkpoint directory")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--max-seq-len", type=int, help="clamp the exported position table")

    p = sub.add_parser("tokenize", help="byte-tokenize text into a JSON-lines corpus")
    p.add_argument("--bundle", required=True, help="bundle whose vocab bounds the ids")
    p.add_argument("--text", required=True, help="input text, one sequence per line")
    p.add_argument("--out", required=True, help="output corpus path")
    p.add_argument("--pair-text", help="second text file for labelled pairs")
    p.add_argument("--labels", help="one similarity label per line, passed through")

    p = sub.add_parser("parity", help="compare engine dense logits against the source")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompts", required=True, help="JSON file: list of token-id lists")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--report", help="where to write the parity report JSON")

    p = sub.add_parser("make-checkpoint", help="seeded random stand-in checkpoint")
    p.add_argument("--arch", required=True, choices=("opt-relu", "llama-silu"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    from .recipes import ExportError

    try:
        if args.subcommand == "export":
            from .export import export_model
            from .recipes import ExportRecipe

            bundle = export_model(
                ExportRecipe(
                    checkpoint=args.checkpoint,
                    out_dir=args.out,
                    max_seq_len=args.max_seq_len,
                )
            )
            print(f"bundle: {bundle}")
        elif args.subcommand == "tokenize":
            from .export import bundle_vocab_size
            from .tokenizer import tokenize_corpus

            out = tokenize_corpus(
                args.text,
                args.out,
                vocab_size=bundle_vocab_size(args.bundle),
                pair_text_path=args.pair_text,
                labels_path=args.labels,
            )
            print(f"corpus: {out}")
        elif args.subcommand == "parity":
            from .parity import parity_check

            prompts = json.loads(Path(args.prompts).read_text(encoding="utf-8"))
            report = parity_check(args.bundle, args.checkpoint, prompts, args.tolerance)
            if args.report:
                Path(args.report).write_text(report.to_json(), encoding="utf-8")
            print(report.to_json(), end="")
            return 0 if report.passed else 1
        else:
            from .standins import make_checkpoint

            path = make_checkpoint(args.arch, args.seed, args.out)
            print(f"checkpoint: {path}")
        return 0
    except ExportError as exc:
        print(f"export refused: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
