#!/usr/bin/env python3
"""Tokens/step across draft-tree node budgets (22/35/45/64 plus the 5-node chain).

Usage: python3 scripts/run_node_sweep.py [--ckpt runs/quickstart/checkpoint.bin]
Without --ckpt a system is trained first under configs/toy.cfg.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from amphista.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/node_sweep")
    ap.add_argument("--ckpt", default=None)
    ap.add_argument("--budgets", default="5,22,35,45,64")
    args = ap.parse_args()
    argv = [
        "node-sweep",
        "--config",
        str(ROOT / "configs" / "toy.cfg"),
        "--seed",
        str(args.seed),
        "--out",
        args.out,
        "--budgets",
        args.budgets,
    ]
    if args.ckpt:
        argv += ["--ckpt", args.ckpt]
    return cli(argv)


if __name__ == "__main__":
    sys.exit(main())
