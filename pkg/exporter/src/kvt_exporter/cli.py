"""Trace export command line: instrument a model, write a KVT1 directory."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ExportError, UnsupportedLayout
from .export import ExportSpec, export


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="kvt-export",
        description="Capture per-head post-rotary Q/K/V from a causal LM into a KVT1 trace",
    )
    parser.add_argument("--model", required=True, help="model identifier or local path")
    parser.add_argument("--prompt-file", required=True, help="text file holding the prompt")
    parser.add_argument("--decode-len", type=int, required=True, help="greedy decode steps to capture")
    parser.add_argument("--out", required=True, help="output trace directory")
    parser.add_argument("--layers", type=int, nargs="*", help="layer indices to keep (default all)")
    parser.add_argument("--heads", type=int, nargs="*", help="head indices to keep (default all)")
    args = parser.parse_args(argv)

    try:
        prompt = Path(args.prompt_file).read_text()
    except OSError as exc:
        print(f"cannot read prompt file: {exc}", file=sys.stderr)
        return 2

    try:
        spec = ExportSpec(
            model_id=args.model,
            prompt_text=prompt,
            decode_len=args.decode_len,
            layers=frozenset(args.layers) if args.layers else None,
            heads=frozenset(args.heads) if args.heads else None,
        )
        root = export(spec, args.out)
    except UnsupportedLayout as exc:
        print(f"unsupported model layout: {exc}", file=sys.stderr)
        return 3
    except ExportError as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 2
    print(f"wrote trace to {root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
