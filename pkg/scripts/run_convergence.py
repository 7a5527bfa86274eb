#!/usr/bin/env python3
"""Mean-field convergence experiment on an arbitrary config: solves the law,
then measures E sup_t ||xavg - xhat||^2 across population sizes and fits the
log-log slope (expected near -1).

Usage:
  python scripts/run_convergence.py CONFIG --out runs/conv \
      [--n-list 50,100,200,400,800] [--reps 200] [--seed 510]
"""

import argparse
import sys
import tempfile
from pathlib import Path

from mflqg.cli import main


def run() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--out", required=True)
    ap.add_argument("--n-list", default="50,100,200,400,800")
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=510)
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        law_dir = str(Path(tmp) / "law")
        rc = main(["solve", args.config, "--out", law_dir])
        if rc != 0:
            return rc
        return main(["converge", args.config, "--law", law_dir,
                     "--N-list", args.n_list, "--reps", str(args.reps),
                     "--seed", str(args.seed), "--out", args.out])


if __name__ == "__main__":
    sys.exit(run())
