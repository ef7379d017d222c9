"""Command-line entry point: one subcommand per plot kind."""

from __future__ import annotations

import argparse
import sys

from .io import PlotInputError
from .plots import KINDS, PlotSpec, render

EXIT_OK = 0
EXIT_INPUT = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fiberflow-plot",
        description="Render figures from fiberflow run directories.")
    sub = parser.add_subparsers(dest="kind", required=True)
    multi = {"comparison_grid", "delta_e_curve"}
    for kind in KINDS:
        p = sub.add_parser(kind.replace("_", "-"),
                           help=f"render a {kind} figure")
        nargs = "+" if kind in multi else None
        p.add_argument("run_dir", nargs=nargs,
                       help="completed run directory")
        p.add_argument("--output", "-o", required=True,
                       help="image file to write (png/pdf/svg)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    dirs = args.run_dir if isinstance(args.run_dir, list) else [args.run_dir]
    spec = PlotSpec(kind=args.kind.replace("-", "_"),
                    inputs=tuple(dirs), output=args.output)
    try:
        out = render(spec)
    except (PlotInputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
