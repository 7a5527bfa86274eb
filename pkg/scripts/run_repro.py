#!/usr/bin/env python3
"""Full-size reference reproduction: solve the consistency condition, simulate
1000 agents, run the convergence study, and drop all artifacts (trajectory CSV
for the mean field vs the realized state-average, convergence table, summary
JSON) into the output directory.

Usage: python scripts/run_repro.py --out runs/repro [--reps 200]
"""

import sys

from mflqg.cli import main

if __name__ == "__main__":
    sys.exit(main(["repro-sec7", *sys.argv[1:]]))
