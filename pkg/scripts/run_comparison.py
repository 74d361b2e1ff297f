#!/usr/bin/env python3
"""Run the five-model comparison on the desk profile and print the tables.

    python3 scripts/run_comparison.py [--config configs/desk_profile.json] [--out DIR]

Thin wrapper over ``ccspred compare`` that also prints wall time per stage.
"""
import argparse
import sys
import time
from pathlib import Path

from ccspred import cli

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk_profile.json"))
    ap.add_argument("--out", default=None, help="output directory (overrides the config)")
    args = ap.parse_args()
    argv = ["-v", "compare", "--config", args.config]
    if args.out:
        argv += ["--output-dir", args.out]
    t0 = time.perf_counter()
    rc = cli.main(argv)
    print(f"wall time {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return rc


if __name__ == "__main__":
    sys.exit(main())
