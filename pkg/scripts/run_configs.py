"""Run every JSON config in configs/ through the command-line interface.

Usage: python scripts/run_configs.py [--only NAME ...] [--out DIR]
"""
import argparse
import json
import sys
import time
from pathlib import Path

from srbstab import cli

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--only", nargs="*", default=None, help="config stems to run")
    ap.add_argument("--out", type=Path, default=ROOT / "out")
    args = ap.parse_args()
    worst = 0
    for path in sorted((ROOT / "configs").glob("*.json")):
        if args.only and path.stem not in args.only:
            continue
        exp = json.loads(path.read_text())["experiment"]
        t0 = time.perf_counter()
        code = cli.main([exp, "--config", str(path), "--out", str(args.out / path.stem)])
        print(f"{path.stem:28s} exit {code}  {time.perf_counter() - t0:7.1f}s")
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
