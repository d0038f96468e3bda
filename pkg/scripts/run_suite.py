"""Run every experiment with the given config and print the verdict lines.

    python scripts/run_suite.py [--config configs/default.ini] [--out runs/full] [--jobs 4]
"""
import argparse
import sys
from pathlib import Path

from obstaclehj.cli import run

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).parent.parent / "configs" / "default.ini"))
    ap.add_argument("--out", default="runs/full")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    sys.exit(run("suite", args.config, args.out, args.jobs))
