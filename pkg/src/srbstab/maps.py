"""Piecewise expanding interval maps.

A map is a finite list of monotone branches whose domains tile an interval
``[a, b]``.  Branch functions are vectorised over numpy arrays and must accept
the closed endpoints of their domain (one-sided limits), since the transfer
operator needs images of branch endpoints.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConjugacyViolation, CutPoint, InvalidMap, NonFiniteDerivative, OutOfDomain

Array = np.ndarray
RealFn = Callable[[Array], Array]

INVERSE_TOL = 1e-13
_MAX_INVERSE_ITER = 200


def _invert_monotone(fn: RealFn, dfn: RealFn, lo: float, hi: float, y: Array, orientation: int) -> Array:
    """Solve ``fn(x) = y`` on ``[lo, hi]`` for each target by safeguarded Newton.

    Bisection keeps a valid bracket; Newton proposals are accepted only while
    they stay strictly inside it, so points where the derivative blows up
    (the Lorenz cusp) degrade gracefully to bisection.
    """
    y = np.asarray(y, dtype=float)
    a = np.full(y.shape, lo)
    b = np.full(y.shape, hi)
    x = 0.5 * (a + b)
    s = float(orientation)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for _ in range(_MAX_INVERSE_ITER):
            r = s * (fn(x) - y)
            a = np.where(r < 0, x, a)
            b = np.where(r > 0, x, b)
            exact = r == 0
            step = r / (s * dfn(x))
            newton = x - step
            ok = np.isfinite(newton) & (newton > a) & (newton < b)
            x_new = np.where(exact, x, np.where(ok, newton, 0.5 * (a + b)))
            moved = np.abs(x_new - x)
            x = x_new
            if np.all((moved <= INVERSE_TOL) | (b - a <= INVERSE_TOL)):
                break
    return x


@dataclass(frozen=True)
class Branch:
    domain_lo: float
    domain_hi: float
    forward: RealFn
    derivative: RealFn
    orientation: int = 1

    def __post_init__(self):
        if not self.domain_lo < self.domain_hi:
            raise InvalidMap(f"empty branch domain ({self.domain_lo}, {self.domain_hi})")
        if self.orientation not in (1, -1):
            raise InvalidMap("orientation must be +1 or -1")

    def _clip(self, x) -> Array:
        return np.clip(np.asarray(x, dtype=float), self.domain_lo, self.domain_hi)

    def f(self, x) -> Array:
        return self.forward(self._clip(x))

    def df(self, x) -> Array:
        return self.derivative(self._clip(x))

    @property
    def image(self) -> tuple[float, float]:
        ends = self.f(np.array([self.domain_lo, self.domain_hi]))
        return float(min(ends)), float(max(ends))

    def inverse(self, y) -> Array:
        """Preimage of ``y`` in this branch; targets outside the image are clipped to it."""
        lo, hi = self.image
        yc = np.clip(np.asarray(y, dtype=float), lo, hi)
        x = _invert_monotone(self.f, self.df, self.domain_lo, self.domain_hi, yc, self.orientation)
        # exact hits on the image ends map to the domain ends
        start, stop = (self.domain_lo, self.domain_hi) if self.orientation > 0 else (self.domain_hi, self.domain_lo)
        x = np.where(yc <= lo, start, x)
        x = np.where(yc >= hi, stop, x)
        return x


@dataclass(frozen=True)
class PiecewiseExpandingMap:
    interval: tuple[float, float]
    branches: tuple[Branch, ...]
    beta: float
    alpha: float
    var_bound: float
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        a, b = self.interval
        if not a < b:
            raise InvalidMap("interval must have a < b")
        if not self.branches:
            raise InvalidMap("a map needs at least one branch")
        if not self.beta > 1:
            raise InvalidMap(f"expansion bound beta={self.beta} must exceed 1")
        if not 0 < self.alpha <= 1:
            raise InvalidMap(f"alpha={self.alpha} outside (0, 1]")
        br = self.branches
        if abs(br[0].domain_lo - a) > 1e-15 or abs(br[-1].domain_hi - b) > 1e-15:
            raise InvalidMap("branch domains must cover the interval")
        for left, right in zip(br, br[1:]):
            if abs(left.domain_hi - right.domain_lo) > 1e-15:
                raise InvalidMap("branch domains must be consecutive and disjoint")

    @property
    def a(self) -> float:
        return self.interval[0]

    @property
    def b(self) -> float:
        return self.interval[1]

    @property
    def length(self) -> float:
        return self.b - self.a

    @property
    def cuts(self) -> Array:
        """Interior cut points (boundaries between consecutive branches)."""
        return np.array([br.domain_lo for br in self.branches[1:]])

    @property
    def min_branch_length(self) -> float:
        return min(br.domain_hi - br.domain_lo for br in self.branches)

    def branch_index(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        a, b = self.interval
        if np.any((x < a) | (x > b)) or np.any(~np.isfinite(x)):
            raise OutOfDomain(f"point outside [{a}, {b}]")
        cuts = self.cuts
        if cuts.size and np.any(np.isin(x, cuts)):
            raise CutPoint("evaluation at a cut point; choose a side explicitly")
        return np.searchsorted(cuts, x, side="right")

    def _dispatch(self, x, attr: str):
        x_arr = np.asarray(x, dtype=float)
        idx = self.branch_index(x_arr)
        out = np.empty(x_arr.shape)
        with np.errstate(divide="ignore"):
            for i, br in enumerate(self.branches):
                m = idx == i
                if np.any(m):
                    out[m] = getattr(br, attr)(x_arr[m])
        return out if out.ndim else float(out)

    def eval(self, x):
        return self._dispatch(x, "f")

    __call__ = eval

    def derivative(self, x):
        return self._dispatch(x, "df")

    def preimage_arrays(self, y) -> list[tuple[Array, Array, Array]]:
        """Per branch: (mask of targets inside the branch image, preimages, |f'| there)."""
        y = np.asarray(y, dtype=float)
        out = []
        with np.errstate(divide="ignore"):
            for br in self.branches:
                lo, hi = br.image
                mask = (y >= lo) & (y <= hi)
                x = br.inverse(y)
                out.append((mask, x, np.abs(br.df(x))))
        return out

    def preimages(self, y: float) -> list[tuple[float, float]]:
        a, b = self.interval
        if not a <= y <= b:
            raise OutOfDomain(f"{y} outside [{a}, {b}]")
        pts = []
        for mask, x, d in self.preimage_arrays(np.array([y])):
            if mask[0]:
                pts.append((float(x[0]), float(d[0])))
        return sorted(pts)

    def descriptor(self) -> dict:
        return {
            "family": self.family,
            "params": self.params,
            "interval": list(self.interval),
            "cuts": self.cuts.tolist(),
            "beta": self.beta,
            "alpha": self.alpha,
            "var_bound": self.var_bound,
        }

    def validate(self, n_samples: int = 4096, resolution: int = 2**10) -> None:
        """Sampled checks of monotonicity, expansion and the declared variation bound."""
        tol = 1e-9
        for br in self.branches:
            t = np.linspace(0, 1, n_samples + 2)[1:-1]
            x = br.domain_lo + t * (br.domain_hi - br.domain_lo)
            fx = br.f(x)
            if np.any(br.orientation * np.diff(fx) <= 0):
                raise InvalidMap("branch is not strictly monotone")
            with np.errstate(divide="ignore"):
                d = np.abs(br.df(x))
            if np.nanmin(d) < self.beta - tol:
                raise InvalidMap(f"|f'| drops to {np.nanmin(d)} < beta={self.beta}")
            lo, hi = br.image
            if lo < self.a - tol or hi > self.b + tol:
                raise InvalidMap("branch image leaves the interval")
        v = var_inverse_derivative(self, self.alpha, resolution)
        if v > self.var_bound * (1 + 1e-9) + tol:
            raise InvalidMap(f"estimated V_1/alpha(1/f') = {v} exceeds var_bound={self.var_bound}")


# ---------------------------------------------------------------------------
# variation of 1/f'


def p_variation(values: Sequence[float], p: float) -> float:
    """Exact ``sup (sum |dv|^p)^(1/p)`` over subsequences of a finite sequence."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return 0.0
    if p == 1:
        return float(np.sum(np.abs(np.diff(v))))
    # only turning points can matter for p >= 1
    d = np.diff(v)
    keep = np.ones(v.size, dtype=bool)
    nz = np.flatnonzero(d)
    if nz.size == 0:
        return 0.0
    keep[:] = False
    keep[0] = keep[-1] = True
    sgn = np.sign(d[nz])
    turn = np.flatnonzero(sgn[1:] != sgn[:-1])
    keep[nz[turn + 1]] = True
    w = v[keep]
    best = np.zeros(w.size)
    for j in range(1, w.size):
        best[j] = np.max(best[:j] + np.abs(w[j] - w[:j]) ** p)
    return float(best[-1] ** (1.0 / p))


def _inverse_derivative_samples(fmap: PiecewiseExpandingMap, resolution: int) -> Array:
    a, b = fmap.interval
    grid = a + (b - a) * np.arange(resolution + 1) / resolution
    samples = []
    for br in fmap.branches:
        inside = grid[(grid > br.domain_lo) & (grid < br.domain_hi)]
        xs = np.concatenate(([br.domain_lo], inside, [br.domain_hi]))
        with np.errstate(divide="ignore"):
            vals = 1.0 / np.abs(br.df(xs))
        if not np.all(np.isfinite(vals[1:-1])):
            raise NonFiniteDerivative(f"1/f' not finite inside ({br.domain_lo}, {br.domain_hi})")
        # one-sided values at cut points are dropped if they blow up
        ends = np.isfinite(vals)
        samples.append(vals[ends])
    return np.concatenate(samples)


def var_inverse_derivative(fmap: PiecewiseExpandingMap, alpha: float, resolution: int = 2**12) -> float:
    """Lower estimate of ``V_{1/alpha}(1/f')`` from a dyadic grid plus both sides of every cut.

    Sample sets are nested in ``resolution`` so the estimate is nondecreasing
    as the grid refines.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    return p_variation(_inverse_derivative_samples(fmap, resolution), 1.0 / alpha)


# ---------------------------------------------------------------------------
# iterates


def _compose_branch(inner: Branch, outer: Branch) -> Branch | None:
    """Branch of ``outer o inner`` on the part of inner's domain mapped into outer's."""
    lo_img, hi_img = inner.image
    lo = max(lo_img, outer.domain_lo)
    hi = min(hi_img, outer.domain_hi)
    if hi - lo <= 1e-14:
        return None
    ends = inner.inverse(np.array([lo, hi]))
    d_lo, d_hi = float(min(ends)), float(max(ends))
    if d_hi - d_lo <= 1e-15:
        return None

    def fwd(x, inner=inner, outer=outer):
        return outer.f(inner.f(x))

    def der(x, inner=inner, outer=outer):
        return outer.df(inner.f(x)) * inner.df(x)

    return Branch(d_lo, d_hi, fwd, der, inner.orientation * outer.orientation)


def propagated_var_bound(c: float, beta: float, branch_counts: Sequence[int]) -> float:
    """Bound on the variation of ``1/(f^k)'`` from ``c`` bounding that of ``1/f'``.

    ``branch_counts[j]`` is the number of branches of ``f^j`` (``j = 0..k-1``).
    Product rule over the k factors, and ``1/f' o f^j`` varies by at most ``c``
    on each branch of ``f^j`` plus a jump of at most ``c`` between neighbours.
    The multiplicity factor is needed: ``k c / beta^(k-1)`` alone fails already
    for small smooth perturbations of the doubling map.
    """
    k = len(branch_counts)
    return c * sum(2 * m - 1 for m in branch_counts) / beta ** (k - 1)


def iterate(fmap: PiecewiseExpandingMap, k: int) -> PiecewiseExpandingMap:
    """The k-th iterate as a map with explicit branches (2^k-ish branches; keep k small)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    branches = list(fmap.branches)
    counts = [1]
    for _ in range(k - 1):
        counts.append(len(branches))
        new = []
        for inner in branches:
            for outer in fmap.branches:
                c = _compose_branch(inner, outer)
                if c is not None:
                    new.append(c)
        new.sort(key=lambda br: br.domain_lo)
        # snap consecutive domains onto shared endpoints
        fixed = []
        for i, br in enumerate(new):
            lo = fmap.a if i == 0 else fixed[-1].domain_hi
            hi = fmap.b if i == len(new) - 1 else br.domain_hi
            fixed.append(Branch(lo, hi, br.forward, br.derivative, br.orientation))
        branches = fixed
    var_bound = propagated_var_bound(fmap.var_bound, fmap.beta, counts)
    return PiecewiseExpandingMap(
        fmap.interval,
        tuple(branches),
        beta=fmap.beta**k,
        alpha=fmap.alpha,
        var_bound=var_bound,
        family=f"{fmap.family}^{k}",
        params=dict(fmap.params),
    )


def smoothness_cuts(fmap: PiecewiseExpandingMap, k: int, max_points: int = 2**22) -> Array:
    """Interior cut points of ``f^k``: every x with ``f^j(x)`` on a cut of f for some j < k."""
    cuts = fmap.cuts
    level = cuts
    acc = [cuts]
    for _ in range(k - 1):
        if level.size == 0:
            break
        pre = []
        for mask, x, _ in fmap.preimage_arrays(level):
            pre.append(x[mask])
        level = np.unique(np.concatenate(pre))
        level = level[(level > fmap.a) & (level < fmap.b)]
        if level.size > max_points:
            raise MemoryError(f"f^{k} has more than {max_points} cut points")
        acc.append(level)
    allc = np.unique(np.concatenate(acc))
    return allc[(allc > fmap.a) & (allc < fmap.b)]


def min_smoothness_interval(fmap: PiecewiseExpandingMap, k: int) -> float:
    """Length of the shortest interval of smoothness of ``f^k`` (|I_{m,k}|)."""
    pts = np.concatenate(([fmap.a], smoothness_cuts(fmap, k), [fmap.b]))
    gaps = np.diff(pts)
    return float(gaps[gaps > 1e-15].min())


# ---------------------------------------------------------------------------
# families

FAMILIES = ("doubling", "perturbed_doubling", "tent", "markov_pw_linear", "lorenz_theta")


def doubling() -> PiecewiseExpandingMap:
    return perturbed_doubling(0.0, _family="doubling")


def perturbed_doubling(eps: float, _family: str = "perturbed_doubling") -> PiecewiseExpandingMap:
    """``x -> 2x + eps*sin(2 pi x) mod 1``; conjugate to doubling through ``x + (eps/2) sin(2 pi x)``."""
    eps = float(eps)
    if not abs(eps) < 1 / (2 * math.pi):
        raise InvalidMap("perturbed_doubling needs |eps| < 1/(2 pi) to stay expanding")
    tp = 2 * math.pi

    def der(x):
        return 2 + tp * eps * np.cos(tp * x)

    b0 = Branch(0.0, 0.5, lambda x: 2 * x + eps * np.sin(tp * x), der)
    b1 = Branch(0.5, 1.0, lambda x: 2 * x + eps * np.sin(tp * x) - 1, der)
    e = abs(eps) * tp
    var = 2 * (1 / (2 - e) - 1 / (2 + e))
    params = {} if _family == "doubling" else {"eps": eps}
    return PiecewiseExpandingMap((0.0, 1.0), (b0, b1), beta=2 - e, alpha=1.0, var_bound=var, family=_family, params=params)


def tent() -> PiecewiseExpandingMap:
    b0 = Branch(0.0, 0.5, lambda x: 2 * x, lambda x: np.full(np.shape(x), 2.0))
    b1 = Branch(0.5, 1.0, lambda x: 2 - 2 * x, lambda x: np.full(np.shape(x), -2.0), orientation=-1)
    return PiecewiseExpandingMap((0.0, 1.0), (b0, b1), beta=2.0, alpha=1.0, var_bound=0.0, family="tent")


def markov_pw_linear(slopes: Sequence[float] = (2.0, 2.0, 4.0), cuts: Sequence[float] = (0.5, 0.75)) -> PiecewiseExpandingMap:
    """Increasing affine branches ``x -> s_i (x - c_i)`` on ``[c_i, c_{i+1})`` of ``[0, 1]``."""
    slopes = [float(s) for s in slopes]
    cuts = [float(c) for c in cuts]
    if len(slopes) != len(cuts) + 1:
        raise InvalidMap("need one more slope than cut points")
    edges = [0.0, *cuts, 1.0]
    if any(r <= l for l, r in zip(edges, edges[1:])):
        raise InvalidMap("cut points must be increasing inside (0, 1)")
    branches = []
    for s, lo, hi in zip(slopes, edges, edges[1:]):
        if s * (hi - lo) > 1 + 1e-12:
            raise InvalidMap(f"branch on [{lo}, {hi}) with slope {s} overflows [0, 1]")
        branches.append(Branch(lo, hi, lambda x, s=s, lo=lo: s * (x - lo), lambda x, s=s: np.full(np.shape(x), s)))
    var = float(sum(abs(1 / s1 - 1 / s2) for s1, s2 in zip(slopes, slopes[1:])))
    return PiecewiseExpandingMap(
        (0.0, 1.0), tuple(branches), beta=min(slopes), alpha=1.0, var_bound=var,
        family="markov_pw_linear", params={"slopes": slopes, "cuts": cuts},
    )


def lorenz_theta(theta: float) -> PiecewiseExpandingMap:
    """``u -> sgn(u)(2|u|^theta - 1)`` on ``[-1, 1]``: full branches, infinite slope at the cusp u=0."""
    theta = float(theta)
    if not 0.5 < theta < 1:
        raise InvalidMap("lorenz_theta requires theta in (1/2, 1)")

    def der(u):
        with np.errstate(divide="ignore"):
            return 2 * theta * np.abs(u) ** (theta - 1)

    left = Branch(-1.0, 0.0, lambda u: 1 - 2 * np.abs(u) ** theta, der)
    right = Branch(0.0, 1.0, lambda u: 2 * np.abs(u) ** theta - 1, der)
    alpha = 1 - theta
    var = 2**alpha / (2 * theta)
    return PiecewiseExpandingMap(
        (-1.0, 1.0), (left, right), beta=2 * theta, alpha=alpha, var_bound=var,
        family="lorenz_theta", params={"theta": theta},
    )


def make_map(family: str, params: dict | None = None) -> PiecewiseExpandingMap:
    params = dict(params or {})
    if family == "doubling":
        return doubling()
    if family == "perturbed_doubling":
        return perturbed_doubling(params.get("eps", 0.0))
    if family == "tent":
        return tent()
    if family == "markov_pw_linear":
        return markov_pw_linear(params.get("slopes", (2.0, 2.0, 4.0)), params.get("cuts", (0.5, 0.75)))
    if family == "lorenz_theta":
        return lorenz_theta(params["theta"])
    raise InvalidMap(f"unknown map family {family!r}")


def map_from_json(doc) -> PiecewiseExpandingMap:
    """Build a map from ``{"family": ..., "params": {...}}`` (dict or JSON text)."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    return make_map(doc["family"], doc.get("params"))


# ---------------------------------------------------------------------------
# distance between maps


@dataclass(frozen=True)
class Conjugacy:
    """Increasing diffeomorphism candidate sigma with its derivative (and inverse, if known)."""

    forward: RealFn
    derivative: RealFn
    inverse: RealFn | None = None


IDENTITY = Conjugacy(lambda x: np.asarray(x, dtype=float), lambda x: np.ones(np.shape(x)), lambda x: np.asarray(x, dtype=float))


def _sample_set(A: Sequence[tuple[float, float]], n: int) -> Array:
    pts = []
    for lo, hi in A:
        pts.append(np.linspace(lo, hi, n + 1))
    return np.concatenate(pts)


def map_distance_components(f1, f2, sigma: Conjugacy, A, n_grid: int = 2**14, tol: float = 1e-9) -> dict:
    """Evaluate the three quantities bounding ``d(f1, f2)`` for an explicit (A, sigma).

    ``f2 = f1 o sigma`` is checked on a grid of A away from the cut points of
    either map; a mismatch raises ConjugacyViolation.
    """
    a, b = f1.interval
    A = [(float(lo), float(hi)) for lo, hi in A]
    x = _sample_set(A, n_grid)
    sx = np.asarray(sigma.forward(x), dtype=float)
    keep = np.ones(x.shape, dtype=bool)
    for c in np.concatenate((f2.cuts, [a, b])):
        keep &= np.abs(x - c) > 1e-9
    for c in np.concatenate((f1.cuts, [a, b])):
        keep &= np.abs(sx - c) > 1e-9
    if np.any(np.diff(sx) < -1e-15):
        raise ConjugacyViolation("sigma is not increasing on A")
    lhs = f2.eval(x[keep])
    rhs = f1.eval(sx[keep])
    err = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
    if err > tol:
        raise ConjugacyViolation(f"f2 differs from f1 o sigma by {err:.3g} on A")
    measure = sum(hi - lo for lo, hi in A) / (b - a)
    with np.errstate(divide="ignore"):
        inv_d = 1.0 / np.asarray(sigma.derivative(x), dtype=float)
    return {
        "missing_measure": max(0.0, 1.0 - measure),
        "displacement": float(np.max(np.abs(sx - x))),
        "derivative_gap": float(np.max(np.abs(inv_d - 1.0))),
        "conjugacy_residual": err,
    }


def map_distance_upper(f1, f2, sigma: Conjugacy = IDENTITY, A=None, n_grid: int = 2**14) -> float:
    """Certified upper bound on ``d(f1, f2)`` from one conjugacy candidate (no infimum search)."""
    if A is None:
        A = [f1.interval]
    c = map_distance_components(f1, f2, sigma, A, n_grid)
    return max(c["missing_measure"], c["displacement"], c["derivative_gap"])


def perturbed_doubling_conjugacy(eps: float) -> Conjugacy:
    tp = 2 * math.pi
    return Conjugacy(lambda x: x + 0.5 * eps * np.sin(tp * x), lambda x: 1 + math.pi * eps * np.cos(tp * x))


def lorenz_theta_conjugacy(theta0: float, theta1: float) -> Conjugacy:
    """sigma with ``lorenz_theta(theta1) = lorenz_theta(theta0) o sigma``: ``sgn(u)|u|^(theta1/theta0)``."""
    p = theta1 / theta0

    def fwd(u):
        u = np.asarray(u, dtype=float)
        return np.sign(u) * np.abs(u) ** p

    def der(u):
        with np.errstate(divide="ignore"):
            return p * np.abs(np.asarray(u, dtype=float)) ** (p - 1)

    def inv(v):
        v = np.asarray(v, dtype=float)
        return np.sign(v) * np.abs(v) ** (1 / p)

    return Conjugacy(fwd, der, inv)


def lorenz_theta_certificate(theta0: float, theta1: float, n_grid: int = 2**12) -> tuple[Conjugacy, list, float]:
    """Best (over a radius grid) set ``A = [-1,-r] u [r,1]`` for the power conjugacy.

    ``1/sigma'`` is unbounded (or vanishes) at the cusp when theta1 != theta0,
    so a small neighbourhood of u=0 has to be dropped from A.
    """
    f0, f1 = lorenz_theta(theta0), lorenz_theta(theta1)
    sigma = lorenz_theta_conjugacy(theta0, theta1)
    if theta0 == theta1:
        return sigma, [(-1.0, 1.0)], 0.0
    best = None
    for r in np.geomspace(1e-12, 0.5, 120):
        A = [(-1.0, -float(r)), (float(r), 1.0)]
        d = map_distance_upper(f0, f1, sigma, A, n_grid=n_grid)
        if best is None or d < best[2]:
            best = (sigma, A, d)
    return best
