"""Simulate Lorenz63 returns to z = 27, collapse the stable leaves and report the quotient map.

Usage: python scripts/lorenz63_quotient.py [--n-returns N]
"""
import argparse

import numpy as np

from srbstab import flows as fl
from srbstab import transfer as tr


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-returns", type=int, default=2000)
    args = ap.parse_args()
    system = fl.lorenz63()
    eig, ok = fl.lorenz_like_check(system, (0, 0, 0))
    print(f"origin eigenvalues {np.round(eig, 4)}  lorenz-like {ok}")
    section = fl.default_section(system)
    data = fl.return_dataset(system, section, args.n_returns)
    dist = section.boundary_distance(data.hit)
    print(f"{len(data.tau)} returns, mean tau {data.tau.mean():.4f}, min boundary distance {dist.min():.3f}")
    table = fl.collapse_lorenz63(system, section, data)
    print(f"leaf residual {table.residual:.4f}, cut {table.cut:.4f}")
    fmap = table.to_map()
    print(f"quotient map: {len(fmap.branches)} branches, min expansion {fmap.beta:.3f}")
    h = tr.invariant_density(fmap, 2048)
    print(f"invariant density: min {h.values.min():.3f}, max {h.values.max():.3f}")


if __name__ == "__main__":
    main()
