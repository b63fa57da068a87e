"""Oscillation seminorms on piecewise-constant grid functions.

Everything here is exact for the piecewise-constant representative: the
essential supremum over a ball is the max over the cells the open ball meets,
and the oscillation profile ``x -> osc(g, eps, x)`` is itself piecewise
constant with breakpoints at ``edges`` and ``edges +/- eps``, so its integral
is a finite sum.  Balls are truncated to the interval (no periodic wrap).
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import CellTooWide, JTooSmall

Array = np.ndarray
LEMMA_ABS_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Piecewise-constant function on a uniform partition of ``[a, b]``."""

    a: float
    b: float
    values: Array

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        n = v.size
        if n < 2 or n & (n - 1):
            raise ValueError(f"n_cells={n} must be a power of two >= 2")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        if not self.a < self.b:
            raise ValueError("need a < b")

    @classmethod
    def from_function(cls, fn: Callable[[Array], Array], a: float, b: float, n_cells: int, quad: str = "midpoint"):
        """Sample ``fn`` at midpoints, or average it per cell with 4-point Gauss-Legendre."""
        h = (b - a) / n_cells
        left = a + h * np.arange(n_cells)
        if quad == "midpoint":
            vals = fn(left + 0.5 * h)
        elif quad == "average":
            nodes, weights = np.polynomial.legendre.leggauss(4)
            pts = left[:, None] + 0.5 * h * (nodes[None, :] + 1)
            vals = (fn(pts) * weights[None, :]).sum(axis=1) / 2
        else:
            raise ValueError(f"unknown quadrature {quad!r}")
        return cls(a, b, np.broadcast_to(np.asarray(vals, dtype=float), (n_cells,)))

    @classmethod
    def constant(cls, c: float, a: float, b: float, n_cells: int):
        return cls(a, b, np.full(n_cells, float(c)))

    def like(self, values) -> "GridFunction":
        return GridFunction(self.a, self.b, values)

    @property
    def n_cells(self) -> int:
        return self.values.size

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.n_cells

    @property
    def edges(self) -> Array:
        return self.a + self.h * np.arange(self.n_cells + 1)

    @property
    def midpoints(self) -> Array:
        return self.a + self.h * (np.arange(self.n_cells) + 0.5)

    def integral(self) -> float:
        return float(self.values.sum() * self.h)

    def l1(self) -> float:
        return float(np.abs(self.values).sum() * self.h)

    def sup(self) -> float:
        return float(np.abs(self.values).max())

    def __call__(self, x) -> Array:
        """Value of the representative at x (cells closed on the left, last cell closed)."""
        idx = np.floor((np.asarray(x, dtype=float) - self.a) / self.h).astype(int)
        return self.values[np.clip(idx, 0, self.n_cells - 1)]

    def __add__(self, other: "GridFunction") -> "GridFunction":
        return self.like(self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        return self.like(self.values - other.values)

    def __mul__(self, c: float) -> "GridFunction":
        return self.like(self.values * c)

    __rmul__ = __mul__

    def cumulative(self) -> Array:
        """``G(e_k) = integral of g from a to e_k`` at every edge."""
        return np.concatenate(([0.0], np.cumsum(self.values) * self.h))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("cell_index,midpoint,value\n")
        for i, (m, v) in enumerate(zip(self.midpoints, self.values)):
            buf.write(f"{i},{m:.17g},{v:.17g}\n")
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"interval": [self.a, self.b], "n_cells": self.n_cells, "values": self.values.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "GridFunction":
        d = json.loads(text)
        return cls(d["interval"][0], d["interval"][1], np.array(d["values"], dtype=float))

    @classmethod
    def from_csv(cls, text: str, a: float, b: float) -> "GridFunction":
        rows = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
        return cls(a, b, rows[:, 2])


@dataclass(frozen=True)
class BVParams:
    alpha: float
    eps0: float
    eps_grid: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        grid = tuple(float(e) for e in self.eps_grid)
        if any(not 0 < e <= self.eps0 * (1 + 1e-12) for e in grid):
            raise ValueError("eps_grid must lie in (0, eps0]")
        object.__setattr__(self, "eps_grid", tuple(sorted(grid, reverse=True)))

    @classmethod
    def for_grid(cls, a: float, b: float, n_cells: int, alpha: float, eps0: float | None = None, n_eps: int = 32):
        """Default parameters: eps0 = 0.05 (b - a), 32 log-spaced eps down to two cell widths."""
        eps0 = 0.05 * (b - a) if eps0 is None else float(eps0)
        h = (b - a) / n_cells
        lo = 2 * h
        if lo > eps0:
            raise ValueError(f"grid too coarse: two cells ({lo}) exceed eps0={eps0}")
        return cls(alpha, eps0, tuple(np.geomspace(eps0, lo, n_eps)))

    def check_grid(self, g: GridFunction) -> None:
        if self.eps_grid and min(self.eps_grid) < 2 * g.h * (1 - 1e-12):
            raise ValueError("smallest eps must cover at least two cells")


# ---------------------------------------------------------------------------
# range max/min machinery


class _RangeTable:
    """Sparse table for O(1) range max/min queries over a fixed array."""

    def __init__(self, v: Array):
        self.mx = [v]
        self.mn = [v]
        span = 1
        while 2 * span <= v.size:
            pm, pn = self.mx[-1], self.mn[-1]
            self.mx.append(np.maximum(pm[:-span], pm[span:]))
            self.mn.append(np.minimum(pn[:-span], pn[span:]))
            span *= 2

    def spread(self, lo: Array, hi: Array) -> Array:
        """``max(v[lo..hi]) - min(v[lo..hi])`` for inclusive index ranges."""
        length = hi - lo + 1
        k = np.floor(np.log2(length)).astype(int)
        out = np.empty(lo.shape)
        for lev in np.unique(k):
            m = k == lev
            l, r = lo[m], hi[m] - (1 << lev) + 1
            out[m] = (np.maximum(self.mx[lev][l], self.mx[lev][r]) - np.minimum(self.mn[lev][l], self.mn[lev][r]))
        return out


@lru_cache(maxsize=512)
def _osc_pieces(n: int, e: float):
    """Pieces of the osc profile in cell units: (lo index, hi index, piece lengths)."""
    fp, fm = e % 1.0, (-e) % 1.0
    k = np.arange(n + 1, dtype=float)
    br = np.concatenate(([0.0, float(n)], fp + k, fm + k))
    br = np.unique(br[(br >= 0) & (br <= n)])
    lengths = np.diff(br)
    keep = lengths > 1e-12
    mid = 0.5 * (br[:-1] + br[1:])[keep]
    lo = np.clip(np.floor(mid - e), 0, n - 1).astype(int)
    hi = np.clip(np.ceil(mid + e) - 1, 0, n - 1).astype(int)
    return lo, hi, lengths[keep]


def _osc_total_array(table: _RangeTable, n: int, h: float, eps: float) -> float:
    lo, hi, lengths = _osc_pieces(n, round(eps / h, 12))
    return float(np.dot(table.spread(lo, hi), lengths) * h)


def osc_point(g: GridFunction, eps: float, x):
    """Max minus min of g over the cells meeting the open ball ``B_eps(x)`` (truncated to [a, b])."""
    x_arr = np.asarray(x, dtype=float)
    n = g.n_cells
    lo = np.clip(np.floor((x_arr - eps - g.a) / g.h), 0, n - 1).astype(int)
    hi = np.clip(np.ceil((x_arr + eps - g.a) / g.h) - 1, 0, n - 1).astype(int)
    out = _RangeTable(g.values).spread(np.atleast_1d(lo), np.atleast_1d(hi))
    return out.reshape(x_arr.shape) if x_arr.ndim else float(out[0])


def osc_total(g: GridFunction, eps: float) -> float:
    """``osc(g, eps) = || osc(g, eps, .) ||_1`` integrated exactly over the profile pieces."""
    return _osc_total_array(_RangeTable(g.values), g.n_cells, g.h, eps)


def _var_alpha_values(values: Array, h: float, alpha: float, eps_list: Sequence[float]) -> float:
    table = _RangeTable(values)
    n = values.size
    return max((_osc_total_array(table, n, h, e) / e**alpha for e in eps_list), default=0.0)


def var_alpha(g: GridFunction, params: BVParams, extra_eps: Sequence[float] = ()) -> float:
    """``max over eps in the grid of osc(g, eps) / eps^alpha``: a lower bound of the true sup."""
    params.check_grid(g)
    return _var_alpha_values(g.values, g.h, params.alpha, tuple(params.eps_grid) + tuple(extra_eps))


def norm_alpha_1(g: GridFunction, params: BVParams) -> float:
    return var_alpha(g, params) + g.l1()


def norm_record(g: GridFunction, params: BVParams) -> dict:
    v = var_alpha(g, params)
    l1 = g.l1()
    return {"alpha": params.alpha, "eps0": params.eps0, "var_alpha": v, "l1": l1, "norm": v + l1}


def sup_bound_gap(g: GridFunction, params: BVParams) -> float:
    """``(var_alpha(g)/eps0 + ||g||_1) - ||g||_inf``; nonnegative when the sup bound holds."""
    return var_alpha(g, params) / params.eps0 + g.l1() - g.sup()


# ---------------------------------------------------------------------------
# lemmas


@dataclass(frozen=True)
class LemmaCheck:
    lhs: float
    rhs: float
    holds: bool
    detail: dict = field(default_factory=dict)


def lemma_tolerance(g: GridFunction) -> float:
    return LEMMA_ABS_TOL + g.h


def snap_interval(g: GridFunction, J: tuple[float, float]) -> tuple[int, int]:
    """Cell index range [i0, i1) of the grid-aligned interval nearest to J."""
    i0 = int(round((J[0] - g.a) / g.h))
    i1 = int(round((J[1] - g.a) / g.h))
    return max(0, i0), min(g.n_cells, i1)


def check_cutoff_lemma(g: GridFunction, J: tuple[float, float], eps: float, eps0: float) -> LemmaCheck:
    """Compare ``osc(g 1_J, eps)`` with ``2 int_J osc(g|_J, eps, x) dx + (4 eps/|J|) int_J |g|``.

    J is snapped to the nearest cell edges; the snapped interval is reported.
    """
    i0, i1 = snap_interval(g, J)
    length = (i1 - i0) * g.h
    if length < eps0 * (1 - 1e-12):
        raise JTooSmall(f"|J|={length} < eps0={eps0}")
    if not 0 < eps <= eps0:
        raise ValueError("eps must lie in (0, eps0]")
    cut = np.zeros(g.n_cells)
    cut[i0:i1] = g.values[i0:i1]
    lhs = osc_total(g.like(cut), eps)
    sub = g.values[i0:i1]
    inner = _osc_total_array(_RangeTable(sub), sub.size, g.h, eps) if sub.size > 1 else 0.0
    mass = float(np.abs(sub).sum() * g.h)
    rhs = 2 * inner + 4 * eps / length * mass
    return LemmaCheck(lhs, rhs, lhs <= rhs + lemma_tolerance(g), {"J": (g.a + i0 * g.h, g.a + i1 * g.h)})


def uniform_partition(a: float, b: float, n: int) -> list[tuple[float, float]]:
    e = np.linspace(a, b, n + 1)
    return list(zip(e[:-1], e[1:]))


def piecewise_average(g: GridFunction, partition: Sequence[tuple[float, float]], params: BVParams):
    """Average g over each partition cell; returns ``(g_n, certified bound, measured L1 error)``.

    The bound is ``eps^alpha var_alpha(g)`` with eps the widest cell; that eps is
    added to the sup grid so the bound covers the scale actually used.
    """
    out = np.empty(g.n_cells)
    widest = 0.0
    covered = 0
    for lo, hi in partition:
        i0, i1 = snap_interval(g, (lo, hi))
        if i1 <= i0:
            continue
        width = (i1 - i0) * g.h
        if width > params.eps0 * (1 + 1e-12):
            raise CellTooWide(f"partition cell of width {width} exceeds eps0={params.eps0}")
        widest = max(widest, width)
        out[i0:i1] = g.values[i0:i1].mean()
        covered += i1 - i0
    if covered != g.n_cells:
        raise ValueError("partition must cover the interval")
    gn = g.like(out)
    bound = widest**params.alpha * var_alpha(g, params, extra_eps=(widest,))
    return gn, bound, (g - gn).l1()


def pairing_constant(alpha: float, eps0: float, c: float = 2.0) -> float:
    """``C = eps0^-alpha + 4 c 2^alpha``: valid for every eps in (0, eps0] in the pairing bound."""
    return eps0**-alpha + 4 * c * 2**alpha


def pairing_bound(g: GridFunction, phi: GridFunction, eps: float, params: BVParams, c: float = 2.0) -> LemmaCheck:
    """``|int g phi| <= eps^a ||g|| ||phi||_inf + C eps^(a-1) ||g|| ||Phi||_inf`` with Phi the primitive of phi."""
    if not 0 < eps <= params.eps0:
        raise ValueError("eps must lie in (0, eps0]")
    lhs = abs(float(np.dot(g.values, phi.values) * g.h))
    norm = norm_alpha_1(g, params)
    big_phi = float(np.abs(phi.cumulative()).max())
    C = pairing_constant(params.alpha, params.eps0, c)
    a = params.alpha
    rhs = eps**a * norm * phi.sup() + C / eps ** (1 - a) * norm * big_phi
    return LemmaCheck(lhs, rhs, lhs <= rhs + lemma_tolerance(g), {"C": C, "c": c})


def indicator(a: float, b: float, n_cells: int, lo: float, hi: float) -> GridFunction:
    mids = a + (b - a) / n_cells * (np.arange(n_cells) + 0.5)
    return GridFunction(a, b, ((mids >= lo) & (mids < hi)).astype(float))


def fourier_pair(a: float, b: float, n_cells: int, k: int) -> tuple[GridFunction, GridFunction]:
    L = b - a
    cos = GridFunction.from_function(lambda x: np.cos(2 * math.pi * k * (x - a) / L), a, b, n_cells, quad="average")
    sin = GridFunction.from_function(lambda x: np.sin(2 * math.pi * k * (x - a) / L), a, b, n_cells, quad="average")
    return cos, sin


RANDOM_KINDS = ("steps", "fourier", "walk", "bumps")


def random_grid_function(rng: np.random.Generator, a: float, b: float, n_cells: int, kind: str | None = None) -> GridFunction:
    """Random test function of one of four textures (signed, mean not fixed).

    ``steps``: piecewise constant with 1-16 random jumps; ``fourier``: a few
    random low modes; ``walk``: cumulative sum of Gaussian increments (rough);
    ``bumps``: nonnegative sum of narrow Gaussians (a density-like shape).
    """
    kind = RANDOM_KINDS[rng.integers(len(RANDOM_KINDS))] if kind is None else kind
    x = a + (b - a) * (np.arange(n_cells) + 0.5) / n_cells
    t = (x - a) / (b - a)
    if kind == "steps":
        m = int(rng.integers(1, 17))
        cuts = np.sort(rng.uniform(0, 1, m))
        levels = rng.normal(size=m + 1)
        vals = levels[np.searchsorted(cuts, t)]
    elif kind == "fourier":
        k = np.arange(1, 9)
        amp = rng.normal(size=8) / k
        phase = rng.uniform(0, 2 * np.pi, 8)
        vals = rng.normal() + np.sin(2 * np.pi * np.outer(t, k) + phase) @ amp
    elif kind == "walk":
        vals = np.cumsum(rng.normal(size=n_cells)) / np.sqrt(n_cells)
    elif kind == "bumps":
        m = int(rng.integers(1, 6))
        c, w = rng.uniform(0, 1, m), rng.uniform(0.01, 0.2, m)
        vals = np.exp(-0.5 * ((t[:, None] - c) / w) ** 2).sum(axis=1)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return GridFunction(a, b, np.asarray(vals, dtype=float))
