"""End-to-end experiments: Birkhoff averages, lifting to the section, saturation, sweeps."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import maps as mp
from .bv import GridFunction
from .errors import HitSingularLeaf, NoReturn, NotConverged, SrbStabError
from .flows import (
    FlowSystem,
    GeometricReturnMap,
    default_section,
    geometric_lorenz,
    return_segment,
)
from .maps import PiecewiseExpandingMap
from .transfer import cell_integrals, certified_distance, invariant_density, operator_dictionary, operator_distance

Array = np.ndarray

# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True)
class Observable:
    name: str
    fn: Callable[..., Array]
    lipschitz: float


@dataclass(frozen=True)
class ObservableDictionary:
    """Versioned list of test functions, each bounded by 1 in absolute value on its domain."""

    name: str
    version: str
    observables: tuple[Observable, ...]

    @property
    def names(self) -> list[str]:
        return [o.name for o in self.observables]

    def __len__(self) -> int:
        return len(self.observables)

    def evaluate(self, *coords) -> Array:
        """Values of all observables, shape ``(len(self), *coords[0].shape)``."""
        coords = [np.asarray(c, dtype=float) for c in coords]
        shape = np.broadcast(*coords).shape
        return np.stack([np.broadcast_to(o.fn(*coords), shape) for o in self.observables])

    def describe(self) -> dict:
        return {"name": self.name, "version": self.version, "observables": self.names}


def _bump(c: float, w: float):
    """Mollified step ``(1 + tanh((t - c)/w))/2``."""
    return lambda t: 0.5 * (1 + np.tanh((t - c) / w))


def quotient_dictionary(a: float, b: float) -> ObservableDictionary:
    """Observables of one variable on ``[a, b]``, written in ``t`` rescaled to ``[-1, 1]``."""
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    sc = 1.0 / half

    def on_t(g):
        return lambda x: g((np.asarray(x) - mid) / half)

    obs = [
        Observable("one", on_t(lambda t: np.ones_like(t)), 0.0),
        Observable("t", on_t(lambda t: t), sc),
        Observable("t2", on_t(lambda t: t**2), 2 * sc),
        Observable("t3", on_t(lambda t: t**3), 3 * sc),
    ]
    for k in (1, 2, 3):
        obs.append(Observable(f"sin{k}", on_t(lambda t, k=k: np.sin(k * math.pi * t)), k * math.pi * sc))
        obs.append(Observable(f"cos{k}", on_t(lambda t, k=k: np.cos(k * math.pi * t)), k * math.pi * sc))
    for c in (-0.5, 0.0, 0.5):
        obs.append(Observable(f"step{c:+.1f}", on_t(_bump(c, 0.1)), 5.0 * sc))
    return ObservableDictionary("quotient", "q1", tuple(obs))


def section_dictionary() -> ObservableDictionary:
    """Observables of ``(x, y)`` on ``[-1, 1]^2``."""
    obs = (
        Observable("one", lambda x, y: np.ones_like(x * y), 0.0),
        Observable("x", lambda x, y: x + 0 * y, 1.0),
        Observable("y", lambda x, y: y + 0 * x, 1.0),
        Observable("xy", lambda x, y: x * y, math.sqrt(2)),
        Observable("y2", lambda x, y: y**2 + 0 * x, 2.0),
        Observable("sin_y", lambda x, y: np.sin(math.pi * y) + 0 * x, math.pi),
        Observable("cos_xy", lambda x, y: np.cos(0.5 * math.pi * (x + y)), math.pi / math.sqrt(2)),
        Observable("step_y", lambda x, y: _bump(0.5, 0.1)(y) + 0 * x, 5.0),
    )
    return ObservableDictionary("section", "s1", obs)


def flow_dictionary() -> ObservableDictionary:
    """Observables of ``(x1, x2, x3)`` on the cube ``[-1, 1]^3`` holding the geometric flow.

    ``height`` is ``x2``, the coordinate along the incoming (stable) direction
    of the box, and plays the role of the Lorenz ``z`` coordinate.
    """
    obs = (
        Observable("one", lambda a, b, c: np.ones_like(a * b * c), 0.0),
        Observable("height", lambda a, b, c: b + 0 * (a + c), 1.0),
        Observable("x1", lambda a, b, c: a + 0 * (b + c), 1.0),
        Observable("x3", lambda a, b, c: c + 0 * (a + b), 1.0),
        Observable("x1_sq", lambda a, b, c: a**2 + 0 * (b + c), 2.0),
        Observable("x2x3", lambda a, b, c: b * c + 0 * a, math.sqrt(2)),
        Observable("cos_x1", lambda a, b, c: np.cos(math.pi * a) + 0 * (b + c), math.pi),
        Observable("tanh_x2", lambda a, b, c: np.tanh(4 * (b - 0.5)) + 0 * (a + c), 4.0),
    )
    return ObservableDictionary("flow", "f1", obs)


# ---------------------------------------------------------------------------
# Birkhoff averages


@dataclass(frozen=True)
class BirkhoffResult:
    names: tuple[str, ...]
    mean: Array
    stderr: Array
    n_orbits: int
    horizon: float
    burn_in: float

    def to_json(self) -> str:
        return json.dumps({"names": list(self.names), "mean": self.mean.tolist(), "stderr": self.stderr.tolist(),
                           "n_orbits": self.n_orbits, "horizon": self.horizon, "burn_in": self.burn_in},
                          indent=2, sort_keys=True)


JITTER = 2.0**-50
MIN_HORIZON = 1000


def map_step(fmap: PiecewiseExpandingMap, x: Array) -> Array:
    """Apply ``fmap`` to every point; a point on a cut goes to the branch on its right."""
    x = np.clip(x, fmap.a, fmap.b)
    idx = np.searchsorted(np.asarray(fmap.cuts), x, side="right")
    out = np.empty_like(x)
    for k, br in enumerate(fmap.branches):
        sel = idx == k
        if np.any(sel):
            out[sel] = br.f(x[sel])
    return np.clip(out, fmap.a, fmap.b)


def _as_dictionary(observables) -> ObservableDictionary:
    if isinstance(observables, ObservableDictionary):
        return observables
    if isinstance(observables, Observable):
        return ObservableDictionary("custom", "0", (observables,))
    if callable(observables):
        return ObservableDictionary("custom", "0", (Observable("phi", observables, math.nan),))
    return ObservableDictionary("custom", "0", tuple(observables))


def _batch_stderr(batch_means: Array) -> Array:
    m = batch_means.shape[-1]
    if m < 2:
        return np.full(batch_means.shape[:-1], np.nan)
    return batch_means.std(axis=-1, ddof=1) / math.sqrt(m)


def birkhoff_map(fmap: PiecewiseExpandingMap, observables, x0: Array | int, horizon: int,
                 burn_in: float = 0.1, seed: int = 0, n_batches: int | None = None) -> BirkhoffResult:
    """Ensemble of orbit averages of a piecewise expanding map.

    ``x0`` is an array of start points or a number of uniform random starts.
    Each step adds a uniform perturbation of relative size ``2^-50`` before
    applying the map.  This keeps the low-order bits random: without it
    the floating-point orbit of an affine dyadic map such as the doubling
    map collapses to a fixed point within about 53 steps.
    ``horizon`` counts iterates per orbit.  The standard error is computed
    by batch means: one batch per orbit for ensembles, otherwise
    ``n_batches`` batches along the single orbit.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(fmap.a, fmap.b, int(x0)) if np.ndim(x0) == 0 and not isinstance(x0, float) else np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    d = _as_dictionary(observables)
    K = x.size
    burn = int(round(burn_in * horizon))
    kept = horizon - burn
    if horizon < MIN_HORIZON:
        raise ValueError(f"horizon must be at least {MIN_HORIZON:g} iterates")
    nb = (1 if K > 1 else 32) if n_batches is None else n_batches
    bl = kept // nb
    if bl < 1:
        raise ValueError("too many batches for the horizon")
    scale = JITTER * (fmap.b - fmap.a)
    sums = np.zeros((len(d), K, nb))
    for n in range(horizon):
        x = map_step(fmap, x + rng.uniform(-scale, scale, K))
        j = n - burn
        if j >= 0 and j < nb * bl:
            sums[:, :, j // bl] += d.evaluate(x)
    batch = (sums / bl).reshape(len(d), K * nb)
    mean = sums.sum(axis=(1, 2)) / (K * nb * bl)
    return BirkhoffResult(tuple(d.names), mean, _batch_stderr(batch), K, float(horizon), float(burn))


# -- flows ---------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def segment_quadrature(pieces: Sequence) -> tuple[Array, Array]:
    """Gauss-Legendre nodes (8 per piece) and weights along an orbit segment."""
    pts, wts = [], []
    for lo, hi, path in pieces:
        if hi <= lo:
            continue
        t = lo + 0.5 * (hi - lo) * (_GL_NODES + 1)
        z = np.asarray(path(t))
        if z.ndim == 1:
            z = z[:, None]
        pts.append(z[:3])
        wts.append(0.5 * (hi - lo) * _GL_WEIGHTS)
    return np.concatenate(pts, axis=1), np.concatenate(wts)


def segment_integrals(system: FlowSystem, section, uv, d: ObservableDictionary) -> tuple[Array, float, Array]:
    """``(int_0^tau h(X^t z) dt for h in d, quadrature sum of the weights, hit point)``."""
    seg = return_segment(system, section, uv, keep_path=True)
    z, w = segment_quadrature(seg.pieces)
    vals = d.evaluate(z[0], z[1], z[2])
    return vals @ w, float(w @ np.ones_like(w)), np.asarray(seg.record.hit)


def birkhoff_flow(system: FlowSystem, observables, x0, horizon: float, burn_in: float = 0.1,
                  n_batches: int = 16, section=None) -> BirkhoffResult:
    """Time average along one flow orbit.

    For the geometric model ``x0`` is a section point and the orbit is
    assembled from return segments.  Otherwise ``x0`` is a phase-space point
    and the observables are integrated alongside the flow.
    """
    d = _as_dictionary(observables)
    if horizon < MIN_HORIZON:
        raise ValueError(f"flow horizon must be at least {MIN_HORIZON:g}")
    if system.kind == "geometric_lorenz":
        section = default_section(system) if section is None else section
        uv = np.asarray(x0, dtype=float)
        t, burn = 0.0, burn_in * horizon
        edges = burn + (horizon - burn) * np.arange(n_batches + 1) / n_batches
        batch = np.zeros((len(d), n_batches))
        btime = np.zeros(n_batches)
        while t < horizon:
            ints, tau, hit = segment_integrals(system, section, uv, d)
            if t >= burn:
                j = min(int(np.searchsorted(edges, t, side="right")) - 1, n_batches - 1)
                batch[:, j] += ints
                btime[j] += tau
            t += tau
            uv = hit
        means = batch / np.maximum(btime, 1e-300)
        mean = batch.sum(axis=1) / btime.sum()
        return BirkhoffResult(tuple(d.names), mean, _batch_stderr(means), 1, float(horizon), float(burn))
    from scipy.integrate import solve_ivp

    from .flows import ATOL, RTOL, integrate
    z0 = np.asarray(x0, dtype=float)
    burn = burn_in * horizon
    if burn > 0:
        z0 = integrate(system, z0, burn).end

    def rhs(t, w):
        z = w[:3]
        return np.concatenate([system.rhs(t, z), d.evaluate(z[0], z[1], z[2])])

    edges = burn + (horizon - burn) * np.arange(n_batches + 1) / n_batches
    res = solve_ivp(rhs, (burn, horizon), np.concatenate([z0, np.zeros(len(d))]), method="DOP853",
                    rtol=RTOL, atol=ATOL, t_eval=edges)
    acc = res.y[3:]
    means = np.diff(acc, axis=1) / np.diff(edges)
    return BirkhoffResult(tuple(d.names), acc[:, -1] / (horizon - burn), _batch_stderr(means), 1, float(horizon), float(burn))


def birkhoff_average(dynamics, observable, x0, horizon, burn_in: float = 0.1, seed: int = 0):
    """Time average of ``observable`` along the dynamics.

    Dispatches to :func:`birkhoff_map` (``horizon`` in iterates) or
    :func:`birkhoff_flow` (``horizon`` in flow time).  With a single
    observable the mean is returned as a float; with a dictionary the full
    :class:`BirkhoffResult` is returned.
    """
    if isinstance(dynamics, PiecewiseExpandingMap):
        res = birkhoff_map(dynamics, observable, x0, int(horizon), burn_in, seed)
    else:
        res = birkhoff_flow(dynamics, observable, x0, float(horizon), burn_in)
    if isinstance(observable, ObservableDictionary):
        return res
    return float(res.mean[0])


# ---------------------------------------------------------------------------
# lifting to the section


@dataclass
class LiftedMeasure:
    """Weighted point cloud on the section whose base marginal is a coarse copy of ``nu``."""

    base: GridFunction
    points: Array  # (N, 2)
    weights: Array
    depth: int
    diagnostic: float = math.nan
    converged: bool = False

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def integrate(self, d: ObservableDictionary) -> Array:
        return d.evaluate(self.points[:, 0], self.points[:, 1]) @ self.weights

    def base_marginal(self) -> GridFunction:
        """Histogram of the base coordinate on the grid of ``base`` (a density)."""
        n = self.base.n_cells
        idx = np.clip(((self.points[:, 0] - self.base.a) / self.base.h).astype(int), 0, n - 1)
        return self.base.like(np.bincount(idx, weights=self.weights, minlength=n) / self.base.h)


def _coarsen(nu: GridFunction, n_base: int) -> GridFunction:
    if nu.n_cells % n_base:
        raise ValueError("n_base must divide the grid of nu")
    return nu.like(nu.values.reshape(n_base, -1).mean(axis=1)) if n_base != nu.n_cells else nu


def _lift(P: GeometricReturnMap, nu: GridFunction, base: GridFunction, depth: int, seeds: Array) -> tuple[Array, Array]:
    """Points and weights of the depth-``depth`` lift.

    Every base midpoint ``x`` is pulled back ``depth`` times through the
    two inverse branches of the quotient map.  Each chain ``b_depth -> ... -> x``
    carries weight ``nu(b_depth) / |(f^depth)'(b_depth)|`` (normalized per
    base point to the base cell mass), and the fiber seeds are pushed forward
    along the chain by the fiber maps ``y -> g(b_k, y)``.
    """
    x = base.midpoints
    mass = base.values * base.h
    inv = 1.0 / P.theta
    chain = x[:, None]
    owner = np.arange(x.size)
    w = np.ones(x.size)
    for _ in range(depth):
        last = chain[:, -1]
        right = ((last + 1) / 2) ** inv
        left = -(((1 - last) / 2) ** inv)
        chain = np.vstack([np.column_stack([chain, right]), np.column_stack([chain, left])])
        new = chain[:, -1]
        w = np.concatenate([w, w]) / P.df(new)
        owner = np.concatenate([owner, owner])
    w = w * nu(chain[:, -1])
    tot = np.bincount(owner, weights=w, minlength=x.size)
    w = w * (mass / np.where(tot > 0, tot, 1.0))[owner]
    ys = []
    for s in seeds:
        y = np.full(chain.shape[0], float(s))
        for k in range(depth, 0, -1):
            y = P.g(chain[:, k], y)
        ys.append(y)
    pts = np.column_stack([np.tile(x[owner], len(seeds)), np.concatenate(ys)])
    return pts, np.tile(w, len(seeds)) / len(seeds)


def lift_to_section(P: GeometricReturnMap, nu: GridFunction, n: int, n_base: int = 128, n_seeds: int = 3,
                    dictionary: ObservableDictionary | None = None, tol: float = 1e-3) -> LiftedMeasure:
    """Lift the quotient density ``nu`` to an invariant measure on the section.

    Builds the lifts of depth ``n`` and ``2n`` from fiber seeds spread
    uniformly on every leaf, reports the largest difference of dictionary
    integrals between them as ``diagnostic`` and returns the depth-``2n``
    lift.  ``converged`` is False when the diagnostic exceeds ``tol``.
    """
    if n < 1:
        raise ValueError("depth n must be at least 1")
    d = section_dictionary() if dictionary is None else dictionary
    base = _coarsen(nu, n_base)
    seeds = np.linspace(-1, 1, n_seeds) if n_seeds > 1 else np.zeros(1)
    p1, w1 = _lift(P, nu, base, n, seeds)
    p2, w2 = _lift(P, nu, base, 2 * n, seeds)
    diag = float(np.max(np.abs(d.evaluate(p1[:, 0], p1[:, 1]) @ w1 - d.evaluate(p2[:, 0], p2[:, 1]) @ w2)))
    return LiftedMeasure(base, p2, w2, 2 * n, diag, diag <= tol)


# ---------------------------------------------------------------------------
# saturation along the flow


@dataclass(frozen=True)
class SaturationResult:
    names: tuple[str, ...]
    values: Array
    gamma_tau: float
    n_samples: int
    failures: int


def saturate_to_flow(gamma, system: FlowSystem, observables, n_samples: int = 256, seed: int = 0,
                     section=None, proposal: Array | None = None) -> SaturationResult:
    """Flow average ``(1/gamma(tau)) int int_0^tau h(X^t x) dt dgamma(x)``.

    The outer integral is importance sampling over the points of ``gamma``:
    indices are drawn from ``proposal`` (default: the weights of ``gamma``)
    by systematic sampling and reweighted by ``weight / proposal``.  Passing
    the weights of a reference lift with the same layout makes two
    saturations share their samples.  The inner integral is Gauss-Legendre
    quadrature on the orbit segment up to the first return.  Numerator and
    ``gamma(tau)`` use the same weights, so ``h = 1`` gives exactly 1.
    """
    d = _as_dictionary(observables)
    section = default_section(system) if section is None else section
    rng = np.random.default_rng(seed)
    w = np.asarray(gamma.weights, dtype=float)
    q = w if proposal is None else np.asarray(proposal, dtype=float)
    if q.shape != w.shape:
        raise ValueError("proposal must match the points of gamma")
    cdf = np.cumsum(q)
    u = (np.arange(n_samples) + rng.uniform()) / n_samples * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), q.size - 1)
    num = np.zeros(len(d))
    den = 0.0
    fails = 0
    for i in idx:
        try:
            ints, tau, _ = segment_integrals(system, section, gamma.points[i], d)
        except (HitSingularLeaf, NoReturn):
            fails += 1
            continue
        r = w[i] / q[i]
        num += r * ints
        den += r * tau
    if fails == n_samples:
        raise NoReturn("no sampled point returned")
    kept = n_samples - fails
    return SaturationResult(tuple(d.names), num / den, den / kept, n_samples, fails)


# ---------------------------------------------------------------------------
# stability sweep

COLUMNS = ("eps", "map_distance_bound", "op_distance_lower", "op_distance_upper", "density_gap_l1",
           "weakstar_gap_quotient", "weakstar_gap_flow", "birkhoff_gap", "weakstar_gap_section")
GAP_COLUMNS = ("map_distance_bound", "op_distance_lower", "density_gap_l1", "weakstar_gap_quotient",
               "weakstar_gap_flow", "birkhoff_gap", "weakstar_gap_section")
SWEEP_FAMILIES = ("perturbed_doubling", "lorenz_theta", "geometric_lorenz")


@dataclass
class SweepConfig:
    n_cells: int = 8192
    n_op_cells: int = 1024
    eps0: float | None = None
    theta0: float = 0.75
    B: float = 0.3
    nu: float | None = None
    birkhoff_orbits: int = 512
    birkhoff_steps: int = 10000
    lift_depth: int = 4
    n_base: int = 128
    n_flow_samples: int = 128
    seed: int = 0
    with_operator: bool = True
    with_birkhoff: bool = True


@dataclass
class StabilityReport:
    family: str
    rows: list[dict]
    slopes: dict
    config: dict
    dictionaries: dict = field(default_factory=dict)

    @property
    def n_ok(self) -> int:
        return sum(1 for r in self.rows if not r.get("error"))

    def column(self, name: str) -> Array:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*COLUMNS, "error"])
        for r in self.rows:
            w.writerow([f"{r[c]:.17g}" for c in COLUMNS] + [r.get("error", "")])
        return buf.getvalue()

    def to_json(self) -> str:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v

        rows = [{k: clean(v) for k, v in r.items()} for r in self.rows]
        slopes = {k: {kk: clean(vv) for kk, vv in v.items()} for k, v in self.slopes.items()}
        return json.dumps({"family": self.family, "rows": rows, "slopes": slopes, "config": self.config,
                           "dictionaries": self.dictionaries}, indent=2, sort_keys=True)

    def to_plot_data(self) -> str:
        return "".join(f"{r['eps']:.17g} {r['density_gap_l1']:.17g}\n" for r in self.rows)


def fit_slope(eps: Array, gaps: Array) -> dict:
    """Least-squares slope of ``log gap`` against ``log eps`` with R^2."""
    eps, gaps = np.asarray(eps, float), np.asarray(gaps, float)
    ok = (eps > 0) & (gaps > 0) & np.isfinite(gaps)
    if ok.sum() < 2:
        return {"slope": math.nan, "r2": math.nan, "n": int(ok.sum())}
    X, Y = np.log(eps[ok]), np.log(gaps[ok])
    s, c = np.polyfit(X, Y, 1)
    ss = float(np.sum((Y - Y.mean()) ** 2))
    r2 = 1 - float(np.sum((Y - (s * X + c)) ** 2)) / ss if ss > 0 else 1.0
    return {"slope": float(s), "r2": float(r2), "n": int(ok.sum())}


def _family_maps(family: str, eps: float, cfg: SweepConfig):
    if family == "perturbed_doubling":
        return mp.perturbed_doubling(0.0), mp.perturbed_doubling(eps)
    return mp.lorenz_theta(cfg.theta0), mp.lorenz_theta(cfg.theta0 + eps)


def _geometric(theta: float, cfg: SweepConfig) -> FlowSystem:
    return geometric_lorenz(theta=theta, B=cfg.B, nu=cfg.nu)


def stability_sweep(family: str, eps_list: Sequence[float], config: SweepConfig | None = None) -> StabilityReport:
    """Compare the perturbed and unperturbed systems at every ``eps``.

    Quotient level (all families): certified map distance, operator distance
    bracket, L1 density gap, largest weak* gap over the quotient dictionary
    and largest gap between Birkhoff averages (same starts and jitter for
    both maps).  For ``geometric_lorenz`` the lift to the section and the
    saturation along the flow are compared as well (same sample indices
    for both systems).  Per-row failures are recorded in ``error``.
    """
    cfg = SweepConfig() if config is None else config
    if family not in SWEEP_FAMILIES:
        raise ValueError(f"unknown sweep family {family!r}")
    eps_sorted = sorted({float(e) for e in eps_list}, reverse=True)
    if any(e < 0 for e in eps_sorted):
        raise ValueError("eps must be nonnegative")
    qd = quotient_dictionary(*(_family_maps(family, 0.0, cfg)[0].interval))
    sd, fd = section_dictionary(), flow_dictionary()
    cache: dict = {}

    def base_state():
        if "h0" not in cache:
            m0 = _family_maps(family, 0.0, cfg)[0]
            cache["h0"] = invariant_density(m0, cfg.n_cells)
            cache["q0"] = _dict_cell_integrals(qd, m0.a, m0.b, cfg.n_cells)
            if cfg.with_birkhoff:
                cache["b0"] = birkhoff_map(m0, qd, cfg.birkhoff_orbits, cfg.birkhoff_steps, seed=cfg.seed).mean
            if family == "geometric_lorenz":
                P0 = GeometricReturnMap(cfg.theta0, cfg.B, _geometric(cfg.theta0, cfg).params["nu"])
                g0 = lift_to_section(P0, cache["h0"], cfg.lift_depth, cfg.n_base)
                cache["s0"] = g0.integrate(sd)
                cache["w0"] = g0.weights
                cache["f0"] = saturate_to_flow(g0, _geometric(cfg.theta0, cfg), fd, cfg.n_flow_samples, cfg.seed).values
        return cache

    op_dict = None
    rows = []
    for eps in eps_sorted:
        row = {c: math.nan for c in COLUMNS}
        row["eps"] = eps
        try:
            st = base_state()
            m0, me = _family_maps(family, eps, cfg)
            h0 = st["h0"]
            he = h0 if eps == 0 else invariant_density(me, cfg.n_cells)
            row["map_distance_bound"] = 0.0 if eps == 0 else certified_distance(m0, me)
            if cfg.with_operator:
                if op_dict is None:
                    op_dict = operator_dictionary(m0.a, m0.b, cfg.n_op_cells)
                est = operator_distance(m0, me, op_dict, eps0=cfg.eps0, eps=eps,
                                        map_distance=row["map_distance_bound"])
                row["op_distance_lower"] = est.op_distance_lower
                row["op_distance_upper"] = est.op_distance_upper
            row["density_gap_l1"] = (he - h0).l1()
            row["weakstar_gap_quotient"] = float(np.max(np.abs(st["q0"] @ (he.values - h0.values))))
            if cfg.with_birkhoff:
                be = st["b0"] if eps == 0 else birkhoff_map(me, qd, cfg.birkhoff_orbits, cfg.birkhoff_steps, seed=cfg.seed).mean
                row["birkhoff_gap"] = float(np.max(np.abs(be - st["b0"])))
            if family == "geometric_lorenz":
                if eps == 0:
                    row["weakstar_gap_section"] = 0.0
                    row["weakstar_gap_flow"] = 0.0
                else:
                    sys_e = _geometric(cfg.theta0 + eps, cfg)
                    Pe = GeometricReturnMap(cfg.theta0 + eps, cfg.B, sys_e.params["nu"])
                    ge = lift_to_section(Pe, he, cfg.lift_depth, cfg.n_base)
                    row["weakstar_gap_section"] = float(np.max(np.abs(ge.integrate(sd) - st["s0"])))
                    fe = saturate_to_flow(ge, sys_e, fd, cfg.n_flow_samples, cfg.seed, proposal=st["w0"]).values
                    row["weakstar_gap_flow"] = float(np.max(np.abs(fe - st["f0"])))
        except (SrbStabError, NotImplementedError, ValueError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    eps_arr = np.array([r["eps"] for r in rows])
    slopes = {c: fit_slope(eps_arr, np.array([r[c] for r in rows])) for c in GAP_COLUMNS}
    dicts = {"quotient": qd.describe(), "operator": "v1"}
    if family == "geometric_lorenz":
        dicts.update(section=sd.describe(), flow=fd.describe())
    return StabilityReport(family, rows, slopes, {"family": family, "eps_list": eps_sorted, **asdict(cfg)}, dicts)


def _dict_cell_integrals(d: ObservableDictionary, a: float, b: float, n_cells: int) -> Array:
    """``int_{I_i} phi`` for every observable and cell, shape ``(len(d), n_cells)``."""
    return np.stack([cell_integrals(o.fn, a, b, n_cells) for o in d.observables])
