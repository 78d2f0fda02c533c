"""Command line: report <command> --in PATHS --out DIR.

Commands: pca (variance bar), table (comparison table), loss-ratio
(optimizer loss-ratio curve). Exit codes: 0 success, 2 bad input.
"""

from __future__ import annotations

import argparse
import sys

from . import render

EXIT_OK = 0
EXIT_INPUT = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="report",
        description="Render figures and tables from simulator CSV outputs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("pca", "variance-fraction bar chart from a pca.csv"),
            ("table", "accuracy/MRD comparison table from rounds.csv and "
                      "summary.txt files"),
            ("loss-ratio", "alternating/exhaustive loss-ratio curve")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--in", dest="inputs", nargs="+", required=True)
        p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "pca":
            if len(args.inputs) != 1:
                raise render.SchemaError("pca takes exactly one input CSV")
            render.render_pca_bar(args.inputs[0], args.out)
        elif args.command == "table":
            rounds = [p for p in args.inputs if p.endswith(".csv")]
            summaries = [p for p in args.inputs if not p.endswith(".csv")]
            render.render_comparison_table(rounds, summaries, args.out)
        else:
            if len(args.inputs) != 1:
                raise render.SchemaError("loss-ratio takes exactly one input CSV")
            render.render_loss_ratio(args.inputs[0], args.out)
    except (render.SchemaError, render.DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"wrote {args.command} outputs to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
