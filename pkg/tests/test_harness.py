import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from srbstab import flows as fl
from srbstab import harness as hs
from srbstab import maps as mp
from srbstab import transfer as tr
from srbstab.bv import GridFunction


@pytest.fixture(scope="module")
def lorenz_density():
    return tr.invariant_density(mp.lorenz_theta(0.75), 4096)


# ---------------------------------------------------------------------------
# dictionaries


@pytest.mark.parametrize("d,dim", [(hs.quotient_dictionary(-1, 1), 1), (hs.section_dictionary(), 2),
                                   (hs.flow_dictionary(), 3)])
def test_dictionaries_bounded_and_versioned(d, dim):
    rng = np.random.default_rng(0)
    coords = [rng.uniform(-1, 1, 5000) for _ in range(dim)]
    vals = d.evaluate(*coords)
    assert vals.shape == (len(d), 5000)
    assert np.max(np.abs(vals)) <= 1 + 1e-12
    assert d.version and len(set(d.names)) == len(d)
    assert d.describe()["observables"] == d.names


def test_quotient_dictionary_rescales_interval():
    d = hs.quotient_dictionary(0.0, 1.0)
    v = d.evaluate(np.array([0.0, 0.5, 1.0]))
    assert v[d.names.index("t")].tolist() == pytest.approx([-1, 0, 1])


# ---------------------------------------------------------------------------
# Birkhoff averages


def test_birkhoff_constant_observable():
    one = lambda x: np.ones_like(x)
    assert hs.birkhoff_average(mp.lorenz_theta(0.75), one, 4, 1000) == 1.0
    res = hs.birkhoff_flow(fl.geometric_lorenz(), hs.flow_dictionary(), (0.3, 0.1), 1000)
    assert res.mean[0] == pytest.approx(1.0, abs=1e-12)
    res = hs.birkhoff_flow(fl.lorenz63(), lambda a, b, c: np.ones_like(a), (1, 1, 1), 1000, n_batches=4)
    assert res.mean[0] == pytest.approx(1.0, abs=1e-9)


def test_birkhoff_doubling_mean():
    res = hs.birkhoff_map(mp.doubling(), lambda x: x, 1000, 10**4, seed=1)
    assert res.mean[0] == pytest.approx(0.5, abs=3e-4)
    assert abs(res.mean[0] - 0.5) <= 3 * res.stderr[0]
    assert res.horizon == 10**4 and res.n_orbits == 1000


def test_birkhoff_lorenz_dual_oracle(lorenz_density):
    phi = lambda u: u**2
    avg = hs.birkhoff_average(mp.lorenz_theta(0.75), phi, 200, 5000, seed=2)
    assert avg == pytest.approx(tr.space_average(phi, lorenz_density), abs=1e-2)


def test_birkhoff_single_orbit_batches():
    res = hs.birkhoff_map(mp.tent(), lambda x: x, np.array([0.1234]), 20000, n_batches=20)
    assert res.n_orbits == 1
    assert res.mean[0] == pytest.approx(0.5, abs=5 * res.stderr[0] + 1e-3)


def test_birkhoff_deterministic_given_seed():
    a = hs.birkhoff_map(mp.lorenz_theta(0.75), hs.quotient_dictionary(-1, 1), 16, 1000, seed=5)
    b = hs.birkhoff_map(mp.lorenz_theta(0.75), hs.quotient_dictionary(-1, 1), 16, 1000, seed=5)
    assert np.array_equal(a.mean, b.mean)


def test_birkhoff_short_horizon_rejected():
    with pytest.raises(ValueError):
        hs.birkhoff_map(mp.doubling(), lambda x: x, 4, 10)
    with pytest.raises(ValueError):
        hs.birkhoff_flow(fl.lorenz63(), lambda a, b, c: a, (1, 1, 1), 10)


@given(st.floats(0.51, 0.99), st.floats(-1, 1))
def test_map_step_stays_in_interval(theta, x):
    f = mp.lorenz_theta(theta)
    y = hs.map_step(f, np.array([x, 0.0, -1.0, 1.0]))
    assert np.all((y >= -1) & (y <= 1))


# ---------------------------------------------------------------------------
# lift


def test_lift_base_observable_exact(lorenz_density):
    P = fl.geometric_return_map(0.75, 0.3, 2.0)
    gam = hs.lift_to_section(P, lorenz_density, 3)
    base = gam.base
    for k in (1, 2, 3):
        lhs = float(np.sum(gam.weights * np.cos(k * gam.points[:, 0])))
        rhs = float(np.sum(base.values * base.h * np.cos(k * base.midpoints)))
        assert lhs == pytest.approx(rhs, abs=1e-12)
    assert gam.total_mass == pytest.approx(1.0, abs=1e-12)


def test_lift_base_marginal(lorenz_density):
    P = fl.geometric_return_map(0.75, 0.3, 2.0)
    gam = hs.lift_to_section(P, lorenz_density, 4)
    coarse = lorenz_density.like(lorenz_density.values).values.reshape(128, -1).mean(axis=1)
    assert np.abs(gam.base_marginal().values - coarse).sum() * gam.base.h < 1e-3


def test_lift_small_B_concentrates(lorenz_density):
    B = 1e-6
    P = fl.geometric_return_map(0.75, B, 2.0)
    gam = hs.lift_to_section(P, lorenz_density, 1)
    y = gam.points[:, 1]
    # fibers collapse onto +-(1 - B) up to O(B); the sign is that of the last inverse branch
    assert np.max(np.abs(np.abs(y) - (1 - B))) < 3 * B
    assert set(np.unique(np.sign(y))) == {-1.0, 1.0}
    assert gam.diagnostic < 1e-4


def test_lift_diagnostic_decreases(lorenz_density):
    P = fl.geometric_return_map(0.75, 0.3, 2.0)
    diags = [hs.lift_to_section(P, lorenz_density, n).diagnostic for n in (1, 2, 3, 4)]
    assert all(b < a for a, b in zip(diags, diags[1:]))
    assert hs.lift_to_section(P, lorenz_density, 4).converged


def test_lift_rejects_depth_zero(lorenz_density):
    with pytest.raises(ValueError):
        hs.lift_to_section(fl.geometric_return_map(0.75, 0.3, 2.0), lorenz_density, 0)


# ---------------------------------------------------------------------------
# saturation


def test_saturation_constant_is_exactly_one(lorenz_density):
    s = fl.geometric_lorenz()
    gam = hs.lift_to_section(fl.GeometricReturnMap.from_system(s), lorenz_density, 2)
    res = hs.saturate_to_flow(gam, s, lambda a, b, c: np.ones_like(a), n_samples=64)
    assert res.values[0] == 1.0
    assert res.gamma_tau > 0


def test_saturation_constant_return_time_reduces_to_section_average():
    s = fl.rotation(3.0)
    sec = fl.default_section(s)
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(0.5, 1.5, 50)])
    w = rng.uniform(0, 1, 50)
    w /= w.sum()
    gam = hs.LiftedMeasure(GridFunction.constant(0.5, -1.0, 1.0, 2), pts, w, 1)
    h = hs.ObservableDictionary("t", "0", (hs.Observable("x1", lambda a, b, c: a, 1.0),))
    # systematic sampling with as many samples as points and the weights as proposal
    res = hs.saturate_to_flow(gam, s, h, n_samples=50, proposal=np.full(50, 1 / 50), section=sec)
    assert res.values[0] == pytest.approx(float(pts[:, 0] @ w), abs=1e-8)
    assert res.gamma_tau == pytest.approx(3.0, abs=1e-6)


@pytest.mark.slow
def test_saturation_matches_flow_birkhoff(lorenz_density):
    s = fl.geometric_lorenz()
    gam = hs.lift_to_section(fl.GeometricReturnMap.from_system(s), lorenz_density, 4)
    h = hs.flow_dictionary()
    sat = hs.saturate_to_flow(gam, s, h, n_samples=512)
    orbit = hs.birkhoff_flow(s, h, (0.3, 0.1), 1000)
    i = h.names.index("height")
    assert sat.values[i] == pytest.approx(orbit.mean[i], abs=2e-2)


# ---------------------------------------------------------------------------
# sweep


SMALL = hs.SweepConfig(n_cells=2048, n_op_cells=512, birkhoff_orbits=64, birkhoff_steps=2000)


def test_sweep_zero_row_and_shape():
    rep = hs.stability_sweep("perturbed_doubling", [0.0, 0.02, 0.04], SMALL)
    assert rep.column("eps").tolist() == [0.04, 0.02, 0.0]
    zero = rep.rows[-1]
    for c in hs.GAP_COLUMNS:
        if not math.isnan(zero[c]):
            assert zero[c] == 0.0
    assert rep.n_ok == 3
    lines = rep.to_csv().splitlines()
    assert lines[0].split(",") == [*hs.COLUMNS, "error"] and len(lines) == 4
    doc = json.loads(rep.to_json())
    assert doc["rows"][0]["weakstar_gap_flow"] is None
    assert len(rep.to_plot_data().splitlines()) == 3


def test_sweep_single_zero_entry():
    rep = hs.stability_sweep("lorenz_theta", [0.0], SMALL)
    assert rep.n_ok == 1 and rep.rows[0]["density_gap_l1"] == 0.0
    assert math.isnan(rep.slopes["density_gap_l1"]["slope"])


def test_sweep_lorenz_theta_decreasing_and_weakstar_dominated():
    rep = hs.stability_sweep("lorenz_theta", [0.04, 0.02, 0.01], SMALL)
    for c in ("density_gap_l1", "weakstar_gap_quotient", "op_distance_lower", "map_distance_bound"):
        g = rep.column(c)
        assert np.all(np.diff(g) < 0), c
    for r in rep.rows:
        assert r["weakstar_gap_quotient"] <= r["density_gap_l1"] + 1e-12
        assert all(r[c] >= 0 for c in hs.GAP_COLUMNS if not math.isnan(r[c]))
    assert rep.slopes["density_gap_l1"]["n"] == 3


def test_sweep_records_row_errors():
    rep = hs.stability_sweep("lorenz_theta", [0.3, 0.01], hs.SweepConfig(n_cells=1024, with_birkhoff=False,
                                                                            with_operator=False))
    assert "InvalidMap" in rep.rows[0]["error"]
    assert not rep.rows[1].get("error")
    assert rep.n_ok == 1


def test_sweep_rejects_unknown_family():
    with pytest.raises(ValueError):
        hs.stability_sweep("tent", [0.1])


@pytest.mark.slow
def test_sweep_geometric_flow_columns():
    cfg = hs.SweepConfig(n_cells=2048, n_op_cells=512, birkhoff_orbits=64, birkhoff_steps=2000, n_flow_samples=64)
    rep = hs.stability_sweep("geometric_lorenz", [0.0, 0.02, 0.04], cfg)
    assert rep.n_ok == 3
    for c in ("weakstar_gap_flow", "weakstar_gap_section"):
        g = rep.column(c)
        assert np.all(np.isfinite(g)) and g[-1] == 0.0 and g[0] > g[1] > 0
    assert set(rep.dictionaries) == {"quotient", "operator", "section", "flow"}


def test_fit_slope():
    eps = np.array([0.04, 0.02, 0.01])
    out = hs.fit_slope(eps, 3 * eps**1.5)
    assert out["slope"] == pytest.approx(1.5) and out["r2"] == pytest.approx(1.0)
    assert math.isnan(hs.fit_slope(eps, np.zeros(3))["slope"])
