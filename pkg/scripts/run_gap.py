#!/usr/bin/env python3
"""Optimality-gap experiment: per-capita social cost of the decentralized law
against the brute-force centralized oracle under common random numbers, for a
list of small population sizes.

Usage:
  python scripts/run_gap.py CONFIG --out runs/gap \
      [--n-list 2,4,8] [--paths 2000] [--seed 606]
"""

import argparse
import sys

from mflqg.cli import main


def run() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--out", required=True)
    ap.add_argument("--n-list", default="2,4,8")
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=606)
    args = ap.parse_args()
    return main(["gap", args.config, "--N-list", args.n_list,
                 "--paths", str(args.paths), "--seed", str(args.seed),
                 "--out", args.out])


if __name__ == "__main__":
    sys.exit(run())
