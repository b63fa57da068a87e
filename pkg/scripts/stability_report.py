"""Stability sweep for both interval families with a log-log slope per gap column.

Usage: python scripts/stability_report.py [--n-cells N]
"""
import argparse

import numpy as np

from srbstab.harness import GAP_COLUMNS, SweepConfig, stability_sweep

SWEEPS = {"perturbed_doubling": [0.04, 0.02, 0.01, 0.005], "lorenz_theta": [0.04, 0.02, 0.01]}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-cells", type=int, default=8192)
    args = ap.parse_args()
    cfg = SweepConfig(n_cells=args.n_cells)
    for family, eps in SWEEPS.items():
        rep = stability_sweep(family, eps, cfg)
        cols = [c for c in GAP_COLUMNS if np.isfinite(rep.column(c)).any()]
        print(f"\n{family}")
        print(f"{'eps':>8s} " + " ".join(f"{c:>22s}" for c in cols))
        for r in rep.rows:
            print(f"{r['eps']:8.4f} " + " ".join(f"{r[c]:22.4e}" for c in cols))
        print(f"{'slope':>8s} " + " ".join(f"{rep.slopes[c]['slope']:22.3f}" for c in cols))


if __name__ == "__main__":
    main()
