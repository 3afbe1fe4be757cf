#!/usr/bin/env python3
"""Train all seven drafter variants per seed and rank them by tokens/step.

Usage: python3 scripts/run_ablation.py [--seed N] [--out runs/ablation]
Roughly five minutes for the 7-variant x 3-seed matrix.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from amphista.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    argv = ["ablate", "--config", str(ROOT / "configs" / "ablation.cfg"), "--out", args.out]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    return cli(argv)


if __name__ == "__main__":
    sys.exit(main())
