"""Compare Birkhoff averages of the quotient dictionary with transfer-operator space averages.

Usage: python scripts/srb_crosscheck.py [--theta T] [--orbits N] [--steps N]
"""
import argparse

import numpy as np

from srbstab import harness as hs
from srbstab import maps as mp
from srbstab import transfer as tr


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--theta", type=float, default=0.75)
    ap.add_argument("--orbits", type=int, default=1000)
    ap.add_argument("--steps", type=int, default=10**4)
    args = ap.parse_args()
    f = mp.lorenz_theta(args.theta)
    d = hs.quotient_dictionary(f.a, f.b)
    h = tr.invariant_density(f, 2**16)
    res = hs.birkhoff_map(f, d, args.orbits, args.steps)
    print(f"{'observable':>16s} {'space':>12s} {'birkhoff':>12s} {'sigma':>10s} {'z':>6s}")
    for o, m, s in zip(d.observables, res.mean, res.stderr):
        space = tr.space_average(o.fn, h)
        z = abs(m - space) / s if s > 0 else 0.0
        print(f"{o.name:>16s} {space:12.6f} {m:12.6f} {s:10.2e} {z:6.2f}")


if __name__ == "__main__":
    main()
