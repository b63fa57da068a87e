"""Acceptance gate: one test per criterion, one PASS/FAIL line per criterion in the summary.

Run alone with ``pytest tests/test_acceptance.py`` (or ``python tests/test_acceptance.py``).
"""
import json
import math
import time

import numpy as np
import pytest

from srbstab import bv
from srbstab import cli
from srbstab import flows as fl
from srbstab import harness as hs
from srbstab import maps as mp
from srbstab import transfer as tr
from srbstab.bv import BVParams, GridFunction

RESULTS: dict[int, str] = {}

pytestmark = pytest.mark.acceptance


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, RESULTS[n]


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


# 1 ---------------------------------------------------------------------------


def test_criterion_01_analytic_densities():
    parts, ok = [], True
    for fmap in (mp.doubling(), mp.tent()):
        h, dt = timed(tr.invariant_density, fmap, 4096)
        err = (h - GridFunction.constant(1.0, 0.0, 1.0, 4096)).l1()
        ok &= err <= 1e-6 and dt < 5
        parts.append(f"{fmap.family}: L1 {err:.2e} in {dt:.2f}s")
    record(1, ok, "; ".join(parts))


# 2 ---------------------------------------------------------------------------


def test_criterion_02_markov_oracle():
    # fixed point of a = a/2 + 3b/4, b = a/2 + b/4 with a/2 + b/2 = 1
    a, b = np.linalg.solve([[-0.5, 0.75], [0.5, 0.5]], [0.0, 1.0])
    h, dt = timed(tr.invariant_density, mp.markov_pw_linear(), 4096)
    oracle = np.where(h.midpoints < 0.5, a, b)
    err = float(np.abs(h.values - oracle).sum() * h.h)
    record(2, err <= 2e-3 and dt < 10, f"oracle ({a:.4f}, {b:.4f}), L1 {err:.2e} in {dt:.2f}s")


# 3 ---------------------------------------------------------------------------


def test_criterion_03_mass_and_iterates():
    rng = np.random.default_rng(2024)
    families = [mp.doubling(), mp.perturbed_doubling(0.04), mp.tent(), mp.markov_pw_linear(), mp.lorenz_theta(0.75)]
    worst_mass, worst_iter = 0.0, 0.0
    for fmap in families:
        for _ in range(1000):
            g = bv.random_grid_function(rng, fmap.a, fmap.b, 2**12)
            Tg = tr.apply_transfer(fmap, g)
            worst_mass = max(worst_mass, abs(Tg.integral() - g.integral()) / g.l1())
        x = fmap.a + fmap.length * (np.arange(4096) + 0.5) / 4096
        for _ in range(5):
            c = rng.normal(size=3)

            def g(y, c=c, fmap=fmap):
                t = (y - fmap.a) / fmap.length
                return 1 + c[0] * np.cos(2 * math.pi * t) + c[1] * t**2 + c[2] * np.sin(5 * t)

            for k in (1, 2, 3):
                lhs = tr.transfer_pointwise(fmap, g, x, power=k)
                rhs = tr.transfer_pointwise(mp.iterate(fmap, k), g, x)
                worst_iter = max(worst_iter, float(np.abs(lhs - rhs).mean() * fmap.length))
    record(3, worst_mass <= 1e-6 and worst_iter <= 1e-6,
           f"max relative mass defect {worst_mass:.2e} over 5x1000 g; max |T^k g - T_(f^k) g|_1 {worst_iter:.2e}")


# 4 ---------------------------------------------------------------------------


def test_criterion_04_lasota_yorke():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    parts, violations = [], 0
    for fmap, alpha in ((mp.doubling(), 1.0), (mp.lorenz_theta(0.75), 0.25)):
        C = tr.ly_constants(fmap, alpha=alpha, eps0=0.05)
        params = BVParams.for_grid(fmap.a, fmap.b, 1024, alpha, 0.05)
        bad = 0
        for _ in range(100):
            g = bv.random_grid_function(rng, fmap.a, fmap.b, 1024)
            rep = tr.verify_ly(fmap, C, g, 20, params)
            bad += sum(not r[3] for r in rep.rows) + (not rep.k_step[2])
        violations += bad
        parts.append(f"{fmap.family} k={C.k} lambda={C.lam:.4f}: {bad} violations")
    dt = time.perf_counter() - t0
    record(4, violations == 0 and dt < 300, "; ".join(parts) + f"; {dt:.0f}s")


# 5 ---------------------------------------------------------------------------


def test_criterion_05_bv_lemmas():
    rng = np.random.default_rng(5)
    fails = {"cutoff": 0, "approx": 0, "pairing": 0}
    n = 512
    for _ in range(1000):
        a, b = sorted(rng.uniform(-2, 2, 2))
        b = a + max(b - a, 0.5)
        g = bv.random_grid_function(rng, a, b, n)
        alpha = float(rng.choice([0.1, 0.25, 0.5, 0.75, 1.0]))
        p = BVParams.for_grid(a, b, n, alpha)
        eps = float(rng.uniform(2 * g.h, p.eps0))
        lo = float(rng.uniform(a, b - p.eps0 - 2 * g.h))
        hi = float(rng.uniform(lo + p.eps0 + g.h, b))
        fails["cutoff"] += not bv.check_cutoff_lemma(g, (lo, hi), eps, p.eps0).holds
        m = int(rng.integers(32, 129))
        _, bound, err = bv.piecewise_average(g, bv.uniform_partition(a, b, m), p)
        fails["approx"] += not err <= bound + bv.lemma_tolerance(g)
        phi = bv.random_grid_function(rng, a, b, n)
        fails["pairing"] += not bv.pairing_bound(g, phi, eps, p).holds
    record(5, not any(fails.values()), "failures over 1000 instances each: " + json.dumps(fails))


# 6 ---------------------------------------------------------------------------


def test_criterion_06_operator_distance():
    f0 = mp.doubling()
    d = tr.operator_dictionary(0.0, 1.0, 2048)
    rows = []
    for eps in (0.04, 0.02, 0.01):
        fe = mp.perturbed_doubling(eps)
        rows.append(tr.operator_distance(f0, fe, d, eps=eps))
    bounded = all(r.op_distance_lower <= r.op_distance_upper for r in rows)
    lowers = [r.op_distance_lower for r in rows]
    decreasing = all(b < a for a, b in zip(lowers, lowers[1:]))
    detail = ", ".join(f"eps={r.eps}: {r.op_distance_lower:.3e} <= {r.op_distance_upper:.3e}" for r in rows)
    record(6, bounded and decreasing, detail)


# 7 ---------------------------------------------------------------------------


def test_criterion_07_density_stability():
    t0 = time.perf_counter()
    cfg = hs.SweepConfig(n_cells=8192)
    pd = hs.stability_sweep("perturbed_doubling", [0.04, 0.02, 0.01, 0.005], cfg)
    lt = hs.stability_sweep("lorenz_theta", [0.04, 0.02, 0.01], cfg)
    dt = time.perf_counter() - t0
    g_pd, g_lt = pd.column("density_gap_l1"), lt.column("density_gap_l1")
    dec_pd = bool(np.all(np.diff(g_pd) < 0))
    dec_lt = bool(np.all(np.diff(g_lt) < 0))
    slope = pd.slopes["density_gap_l1"]["slope"]
    slope_ok = 0.8 <= slope <= 1.2
    detail = (f"perturbed_doubling decreasing={dec_pd} slope={slope:.3f} (target [0.8, 1.2]: "
              f"{'ok' if slope_ok else 'FAIL'}); lorenz_theta decreasing={dec_lt} "
              f"slope={lt.slopes['density_gap_l1']['slope']:.3f}; {dt:.0f}s")
    record(7, dec_pd and dec_lt and slope_ok and dt < 600, detail)


# 8 ---------------------------------------------------------------------------


def test_criterion_08_flow_validation():
    s = fl.lorenz63()
    eig, lorenz_like = fl.lorenz_like_check(s, (0, 0, 0))
    # independent oracle: roots of det(J - l I) as a cubic
    sg, rho, b = 10.0, 28.0, 8.0 / 3.0
    cubic = np.polymul([1, sg + 1, -sg * (rho - 1)], [1, b])
    roots = np.sort(np.roots(cubic).real)[::-1]
    eig_err = float(np.max(np.abs(eig - roots)))
    saddle = fl.linear_saddle(float(roots[0]), float(roots[1]), float(roots[2]))
    disc = max(fl.passage_time(saddle, x).discrepancy for x in np.geomspace(1e-6, 0.9, 40))
    ok = eig_err <= 1e-3 and lorenz_like and eig[0] + eig[1] > 0 and disc <= 1e-8
    record(8, ok, f"eigenvalues {np.round(eig, 4).tolist()} (max dev {eig_err:.1e}), "
                  f"l1+l2={eig[0] + eig[1]:.4f}; passage max discrepancy {disc:.1e}")


# 9 ---------------------------------------------------------------------------


def test_criterion_09_quotient_exactness():
    worst_map, worst_res = 0.0, 0.0
    for theta in (0.6, 0.75, 0.9):
        P = fl.geometric_return_map(theta, 0.3, 2.0)
        f = fl.collapse_foliation(P)
        u = np.random.default_rng(9).uniform(-1, 1, 10**4)
        worst_map = max(worst_map, float(np.max(np.abs(f(u) - mp.lorenz_theta(theta)(u)))))
        worst_res = max(worst_res, fl.semiconjugacy_residual(P, f, 10**4, seed=9))
    record(9, worst_map <= 1e-12 and worst_res < 1e-9,
           f"max |f - lorenz_theta| {worst_map:.1e}; semiconjugacy residual {worst_res:.1e}")


# 10 --------------------------------------------------------------------------


def test_criterion_10_srb_cross_validation():
    f = mp.lorenz_theta(0.75)
    d = hs.quotient_dictionary(-1.0, 1.0)
    h = tr.invariant_density(f, 2**16)
    space = np.array([tr.space_average(o.fn, h) for o in d.observables])
    res = hs.birkhoff_map(f, d, 1000, 10**4, seed=10)
    z = np.abs(res.mean - space) / np.where(res.stderr > 0, res.stderr, np.inf)
    const_ok = np.all(np.abs(res.mean - space)[res.stderr == 0] < 1e-12)
    s = fl.geometric_lorenz()
    gam = hs.lift_to_section(fl.GeometricReturnMap.from_system(s), h, 2)
    sat = hs.saturate_to_flow(gam, s, lambda a, b, c: np.ones_like(a), n_samples=64).values[0]
    ok = bool(np.all(z <= 3) and const_ok and sat == 1.0)
    record(10, ok, f"horizon {res.n_orbits}x{int(res.horizon)}; max |birkhoff - space|/sigma {np.max(z):.2f} "
                   f"over {len(d)} observables; saturation(h=1) = {float(sat)!r}")


# 11 --------------------------------------------------------------------------


def test_criterion_11_return_time_integrability():
    s = fl.geometric_lorenz()
    res = fl.return_time_integral(s, fl.geometric_section(), 2000, seed=11)
    ok = res.converged and res.slope_rel_error <= 0.05
    record(11, ok, f"estimate {res.estimate:.5f} vs half-sample {res.estimate_half:.5f}; "
                   f"near-leaf slope {res.slope:.6f} vs 1/lambda1 {res.slope_target:.6f} "
                   f"(rel err {res.slope_rel_error:.1e})")


# 12 --------------------------------------------------------------------------


def test_criterion_12_determinism(tmp_path):
    differing = []
    for exp in cli.RUNNERS:
        outs = []
        for tag in ("first", "second"):
            out = tmp_path / exp / tag
            code = cli.main([exp, "--out", str(out), "--seed", "12"])
            outs.append((code, {p.relative_to(out).as_posix(): p.read_bytes()
                                for p in sorted(out.rglob("*")) if p.is_file()}))
        if outs[0] != outs[1]:
            differing.append(exp)
    record(12, not differing, f"{len(cli.RUNNERS)} experiments re-run with default configs; "
                              f"differing: {differing or 'none'}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
