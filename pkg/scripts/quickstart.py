#!/usr/bin/env python3
"""Train the toy system, then compare AR and speculative decoding.

Usage: python3 scripts/quickstart.py [--seed N] [--out runs/quickstart]
Takes a couple of minutes on a laptop-class CPU.
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
    ap.add_argument("--out", default="runs/quickstart")
    args = ap.parse_args()

    cfg = str(ROOT / "configs" / "toy.cfg")
    out = Path(args.out)
    rc = cli(["train", "--config", cfg, "--seed", str(args.seed), "--out", str(out)])
    if rc:
        return rc
    ckpt = str(out / "checkpoint.bin")
    for mode in ("amphista", "medusa", "vanilla_chain"):
        print(f"\n=== bench: {mode} vs ar ===")
        rc = cli(
            [
                "bench",
                "--config",
                cfg,
                "--seed",
                str(args.seed),
                "--out",
                str(out / f"bench_{mode}"),
                "--ckpt",
                ckpt,
                "--mode",
                mode,
                "--max-new-tokens",
                "96",
            ]
        )
        if rc:
            return rc
    print(f"\nreports under {out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
