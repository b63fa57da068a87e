import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srbstab import bv
from srbstab.bv import BVParams, GridFunction
from srbstab.errors import CellTooWide, JTooSmall

N = 2**10


def identity(n=N):
    return GridFunction.from_function(lambda x: x, 0.0, 1.0, n)


def half_indicator(n=N):
    return bv.indicator(0.0, 1.0, n, 0.0, 0.5)


grid_values = arrays(np.float64, st.sampled_from([8, 16, 64, 256]), elements=st.floats(-10, 10))


# ---------------------------------------------------------------------------
# oscillation


def test_osc_point_examples():
    c = GridFunction.constant(3.0, 0.0, 1.0, N)
    assert bv.osc_point(c, 0.1, 0.37) == 0.0
    assert bv.osc_point(half_indicator(), 0.1, 0.5) == 1.0
    assert bv.osc_point(identity(), 0.1, 0.5) == pytest.approx(0.2, abs=1 / N)


def test_osc_total_examples():
    assert bv.osc_total(GridFunction.constant(3.0, 0.0, 1.0, N), 0.1) == 0.0
    assert bv.osc_total(half_indicator(), 0.1) == pytest.approx(0.2, abs=1e-12)
    assert bv.osc_total(identity(), 0.1) == pytest.approx(2 * 0.1 - 0.1**2, abs=2 / N)


def test_osc_total_matches_sampled_profile():
    # independent oracle: fine Riemann sum of osc_point
    rng = np.random.default_rng(3)
    for _ in range(10):
        g = bv.random_grid_function(rng, 0.0, 1.0, 64)
        eps = float(rng.uniform(2 / 64, 0.05))
        x = (np.arange(200_000) + 0.5) / 200_000
        ref = bv.osc_point(g, eps, x).mean()
        assert bv.osc_total(g, eps) == pytest.approx(ref, abs=1e-3 * max(1.0, ref))


@given(grid_values, st.floats(0.01, 0.3), st.floats(0.01, 0.3))
def test_osc_total_monotone_in_eps(values, e1, e2):
    g = GridFunction(0.0, 1.0, values)
    lo, hi = sorted((e1, e2))
    assert bv.osc_total(g, lo) <= bv.osc_total(g, hi) + 1e-12


@given(grid_values, st.integers(0, 2**32 - 1), st.floats(0.001, 0.3))
def test_osc_point_subadditive(values, seed, eps):
    g = GridFunction(0.0, 1.0, values)
    h = g.like(np.random.default_rng(seed).normal(size=values.size))
    x = g.midpoints
    lhs = bv.osc_point(g + h, eps, x)
    rhs = bv.osc_point(g, eps, x) + bv.osc_point(h, eps, x)
    assert np.all(lhs <= rhs + 1e-12)


# ---------------------------------------------------------------------------
# var_alpha and the norm


def test_var_alpha_examples():
    p = BVParams.for_grid(0.0, 1.0, N, 1.0, eps0=0.1)
    assert bv.var_alpha(GridFunction.constant(1.0, 0.0, 1.0, N), p) == 0.0
    eps_min = min(p.eps_grid)
    assert bv.var_alpha(identity(), p) == pytest.approx(2 - eps_min, abs=2 / N)
    assert bv.var_alpha(half_indicator(), p) == pytest.approx(2.0, abs=1e-9)


def test_norm_examples():
    p = BVParams.for_grid(0.0, 1.0, N, 1.0, eps0=0.1)
    assert bv.norm_alpha_1(GridFunction.constant(1.0, 0.0, 1.0, N), p) == 1.0
    assert bv.norm_alpha_1(identity(), p) == pytest.approx(2.5, abs=0.01)
    assert bv.norm_alpha_1(GridFunction.constant(0.0, 0.0, 1.0, N), p) == 0.0
    rec = bv.norm_record(identity(), p)
    assert set(rec) == {"alpha", "eps0", "var_alpha", "l1", "norm"}
    assert rec["norm"] == pytest.approx(rec["var_alpha"] + rec["l1"])


def test_var_alpha_zero_iff_constant():
    p = BVParams.for_grid(0.0, 1.0, 64, 0.5)
    v = np.full(64, 2.0)
    assert bv.var_alpha(GridFunction(0.0, 1.0, v), p) == 0.0
    v[17] = 2.0 + 1e-9
    assert bv.var_alpha(GridFunction(0.0, 1.0, v), p) > 0.0


@given(grid_values, st.integers(0, 2**32 - 1), st.floats(-5, 5), st.sampled_from([0.25, 0.5, 1.0]))
def test_norm_axioms(values, seed, lam, alpha):
    g = GridFunction(0.0, 1.0, values)
    h = g.like(np.random.default_rng(seed).normal(size=values.size))
    p = BVParams.for_grid(0.0, 1.0, values.size, alpha, eps0=0.25)
    ng, nh = bv.norm_alpha_1(g, p), bv.norm_alpha_1(h, p)
    assert bv.norm_alpha_1(g + h, p) <= ng + nh + 1e-9 * (ng + nh)
    assert bv.norm_alpha_1(lam * g, p) == pytest.approx(abs(lam) * ng, rel=1e-12, abs=1e-12)


@given(grid_values, st.sampled_from([0.25, 0.5, 1.0]))
def test_sup_bound(values, alpha):
    g = GridFunction(0.0, 1.0, values)
    p = BVParams.for_grid(0.0, 1.0, values.size, alpha, eps0=0.25)
    assert bv.sup_bound_gap(g, p) >= -1e-9


def test_sup_bound_random_piecewise_constant():
    rng = np.random.default_rng(5)
    for _ in range(200):
        g = bv.random_grid_function(rng, 0.0, 1.0, 512, kind="steps")
        p = BVParams.for_grid(0.0, 1.0, 512, float(rng.choice([0.25, 0.5, 1.0])))
        assert bv.sup_bound_gap(g, p) >= -1e-9


def test_params_validation():
    with pytest.raises(ValueError):
        BVParams(0.0, 0.05)
    with pytest.raises(ValueError):
        BVParams(0.5, 0.05, (0.1,))
    with pytest.raises(ValueError):
        BVParams.for_grid(0.0, 1.0, 8, 1.0, eps0=0.05)
    p = BVParams.for_grid(0.0, 2.0, 1024, 1.0)
    assert p.eps0 == pytest.approx(0.1)
    assert len(p.eps_grid) == 32
    assert min(p.eps_grid) == pytest.approx(2 * 2.0 / 1024)


def test_grid_function_validation():
    with pytest.raises(ValueError):
        GridFunction(0.0, 1.0, np.ones(12))
    with pytest.raises(ValueError):
        GridFunction(0.0, 1.0, np.array([1.0, np.nan]))


def test_serialization_round_trip():
    g = bv.random_grid_function(np.random.default_rng(0), -1.0, 1.0, 64)
    assert np.array_equal(GridFunction.from_json(g.to_json()).values, g.values)
    assert np.array_equal(GridFunction.from_csv(g.to_csv(), -1.0, 1.0).values, g.values)
    doc = json.loads(g.to_json())
    assert doc["n_cells"] == 64 and doc["interval"] == [-1.0, 1.0]


# ---------------------------------------------------------------------------
# lemmas


def test_cutoff_examples():
    one = GridFunction.constant(1.0, 0.0, 1.0, N)
    r = bv.check_cutoff_lemma(one, (0.0, 1.0), 0.05, 0.05)
    assert r.lhs == 0.0 and r.rhs == pytest.approx(0.2) and r.holds
    r = bv.check_cutoff_lemma(GridFunction.constant(0.0, 0.0, 1.0, N), (0.0, 1.0), 0.05, 0.05)
    assert r.lhs == 0.0 and r.rhs == 0.0 and r.holds
    r = bv.check_cutoff_lemma(identity(), (0.2, 0.9), 0.05, 0.05)
    assert r.holds and r.lhs > 0


def test_cutoff_too_small():
    with pytest.raises(JTooSmall):
        bv.check_cutoff_lemma(identity(), (0.2, 0.21), 0.01, 0.05)


def test_piecewise_average_examples():
    p = BVParams.for_grid(0.0, 1.0, N, 1.0, eps0=1 / 16)
    part = bv.uniform_partition(0.0, 1.0, 16)
    c = GridFunction.constant(2.0, 0.0, 1.0, N)
    gn, bound, err = bv.piecewise_average(c, part, p)
    assert np.allclose(gn.values, 2.0) and err == 0.0
    gn, bound, err = bv.piecewise_average(identity(), part, p)
    assert err == pytest.approx(1 / 64, abs=1e-9)
    assert err <= bound and bound == pytest.approx(2 / 16, abs=2 / N)
    gn, bound, err = bv.piecewise_average(half_indicator(), part, p)
    assert err == 0.0


def test_piecewise_average_too_wide():
    p = BVParams.for_grid(0.0, 1.0, N, 1.0, eps0=0.05)
    with pytest.raises(CellTooWide):
        bv.piecewise_average(identity(), bv.uniform_partition(0.0, 1.0, 4), p)


def test_pairing_examples():
    p = BVParams.for_grid(0.0, 1.0, N, 1.0, eps0=0.05)
    zero = GridFunction.constant(0.0, 0.0, 1.0, N)
    r = bv.pairing_bound(identity(), zero, 0.05, p)
    assert r.lhs == 0.0 and r.rhs == 0.0 and r.holds
    one = GridFunction.constant(1.0, 0.0, 1.0, N)
    sin = GridFunction.from_function(lambda x: np.sin(2 * math.pi * x), 0.0, 1.0, N, quad="average")
    r = bv.pairing_bound(one, sin, 0.02, p)
    assert r.lhs == pytest.approx(0.0, abs=1e-12) and r.holds
    r = bv.pairing_bound(half_indicator(), one, 0.02, p)
    assert r.lhs == pytest.approx(0.5) and r.holds
    assert r.detail["c"] == 2.0
    assert r.detail["C"] == pytest.approx(0.05**-1 + 8 * 2)


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.25, 0.5, 1.0]))
def test_lemmas_random(seed, alpha):
    rng = np.random.default_rng(seed)
    n = 256
    g = bv.random_grid_function(rng, 0.0, 1.0, n)
    p = BVParams.for_grid(0.0, 1.0, n, alpha)
    eps = float(rng.uniform(2 / n, p.eps0))
    lo = float(rng.uniform(0, 1 - p.eps0 - 2 / n))
    hi = float(rng.uniform(lo + p.eps0 + 1 / n, 1.0))
    assert bv.check_cutoff_lemma(g, (lo, hi), eps, p.eps0).holds
    m = int(rng.integers(24, 64))
    _, bound, err = bv.piecewise_average(g, bv.uniform_partition(0.0, 1.0, m), p)
    assert err <= bound + bv.lemma_tolerance(g)
    phi = bv.random_grid_function(rng, 0.0, 1.0, n)
    assert bv.pairing_bound(g, phi, eps, p).holds
