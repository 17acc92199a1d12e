"""Command-line scorer for the built-in toy metric, used to exercise the external adapter.

Usage: ``python3 -m iqadefbench.toy_endpoint --seed 7 a.png b.png ...`` prints one score per line.
"""
import argparse
import sys

from .core import build_toy_metric, load_png


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="toy_endpoint")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("images", nargs="+")
    args = ap.parse_args(argv)
    m = build_toy_metric(args.seed)
    for p in args.images:
        print(repr(m.score(load_png(p))))
    return 0


if __name__ == "__main__":
    sys.exit(main())
