"""Transfer operators of piecewise expanding maps.

Two discretisations live here.  ``apply_transfer`` acts on grid functions
either pointwise at cell midpoints (summing over preimages) or as exact cell
averages of ``Tg`` obtained by integrating g over preimages of cell edges.
``UlamOperator`` is the cell-to-cell transition matrix; its fixed point is
the invariant density.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from . import maps as mp
from .bv import BVParams, GridFunction, indicator, norm_alpha_1, pairing_constant
from .errors import DegenerateCell, NoContractingK, NoConvergence
from .maps import PiecewiseExpandingMap

Array = np.ndarray


def _check_domain(fmap: PiecewiseExpandingMap, g: GridFunction) -> None:
    if abs(fmap.a - g.a) > 1e-12 or abs(fmap.b - g.b) > 1e-12:
        raise ValueError("grid function and map live on different intervals")


def transfer_pointwise(fmap: PiecewiseExpandingMap, g: Callable[[Array], Array], x, power: int = 1) -> Array:
    """``(T^power g)(x) = sum over f^power(y) = x of g(y) / |(f^power)'(y)|``, by recursion on preimages."""
    x = np.asarray(x, dtype=float)
    if power == 0:
        return np.asarray(g(x), dtype=float)
    out = np.zeros(x.shape)
    for mask, y, d in fmap.preimage_arrays(x):
        if not np.any(mask):
            continue
        with np.errstate(divide="ignore"):
            w = 1.0 / d[mask]
        out[mask] += transfer_pointwise(fmap, g, y[mask], power - 1) * w
    return out


def apply_transfer(fmap: PiecewiseExpandingMap, g: GridFunction, mode: str = "average") -> GridFunction:
    """Transfer operator on a grid function.

    ``mode="average"`` returns the exact cell averages of ``Tg`` for the
    piecewise-constant g: ``int_{I_i} Tg = sum_branches int_{f_b^-1(I_i)} g``,
    so mass is transported exactly.  ``mode="midpoint"`` evaluates ``Tg`` at
    the cell midpoints through ``preimages``.
    """
    _check_domain(fmap, g)
    if mode == "midpoint":
        return g.like(transfer_pointwise(fmap, g, g.midpoints))
    if mode != "average":
        raise ValueError(f"unknown mode {mode!r}")
    edges = g.edges
    G = g.cumulative()
    acc = np.zeros(g.n_cells)
    for br in fmap.branches:
        p = br.inverse(edges)
        Gp = np.interp(p, edges, G)
        acc += br.orientation * np.diff(Gp)
    return g.like(acc / g.h)


def apply_transfer_power(fmap: PiecewiseExpandingMap, g: GridFunction, n: int, mode: str = "average") -> list[GridFunction]:
    """``[g, Tg, ..., T^n g]``."""
    out = [g]
    for _ in range(n):
        out.append(apply_transfer(fmap, out[-1], mode))
    return out


# ---------------------------------------------------------------------------
# Ulam


@dataclass(frozen=True, eq=False)
class UlamOperator:
    """Row-stochastic matrix: entry (i, j) = |I_i n f^-1(I_j)| / |I_i|."""

    a: float
    b: float
    n_cells: int
    matrix: sparse.csr_matrix

    def push(self, density: Array) -> Array:
        """Evolve a vector of cell values of a density one step (``U^T h``)."""
        return self.matrix.T @ density

    def apply(self, g: GridFunction) -> GridFunction:
        return g.like(self.push(g.values))

    def row_sums(self) -> Array:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def to_csv(self) -> str:
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        buf = io.StringIO()
        buf.write("i,j,value\n")
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            buf.write(f"{i},{j},{v:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, a: float, b: float, n_cells: int) -> "UlamOperator":
        rows = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
        m = sparse.csr_matrix((rows[:, 2], (rows[:, 0].astype(int), rows[:, 1].astype(int))), shape=(n_cells, n_cells))
        return cls(a, b, n_cells, m)


def ulam_discretize(fmap: PiecewiseExpandingMap, n_cells: int) -> UlamOperator:
    if n_cells < 2 or n_cells & (n_cells - 1):
        raise ValueError("n_cells must be a power of two")
    a, b = fmap.interval
    h = (b - a) / n_cells
    edges = a + h * np.arange(n_cells + 1)
    rows, cols, vals = [], [], []
    for br in fmap.branches:
        p = br.inverse(edges)
        lo = np.minimum(p[:-1], p[1:])
        hi = np.maximum(p[:-1], p[1:])
        live = hi - lo > 0
        j = np.flatnonzero(live)
        lo, hi = lo[live], hi[live]
        i_lo = np.clip(np.floor((lo - a) / h).astype(int), 0, n_cells - 1)
        i_hi = np.clip(np.floor((hi - a) / h).astype(int), 0, n_cells - 1)
        for k in range(int((i_hi - i_lo).max(initial=0)) + 1):
            i = i_lo + k
            ok = i <= i_hi
            ii = i[ok]
            seg = np.minimum(hi[ok], edges[ii + 1]) - np.maximum(lo[ok], edges[ii])
            pos = seg > 0
            rows.append(ii[pos])
            cols.append(j[ok][pos])
            vals.append(seg[pos] / h)
    m = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_cells, n_cells)
    )
    m.sum_duplicates()
    op = UlamOperator(a, b, n_cells, m)
    err = np.abs(op.row_sums() - 1).max()
    if err > 1e-8:
        raise DegenerateCell(f"Ulam rows fail to sum to one (max deviation {err:.3g})")
    return op


@dataclass(frozen=True)
class DensityResult:
    density: GridFunction
    residual: float
    iterations: int


def solve_invariant_density(
    fmap: PiecewiseExpandingMap,
    n_cells: int,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    init: Array | None = None,
    ulam: UlamOperator | None = None,
    cesaro_block: int = 64,
) -> DensityResult:
    """Power iteration on the Ulam matrix from the flat density (or ``init``).

    At the end of every block of ``cesaro_block`` steps the iterate is replaced
    by the block average, which damps eigenvalues on the unit circle other than 1.
    """
    U = ulam if ulam is not None else ulam_discretize(fmap, n_cells)
    h_cell = (fmap.b - fmap.a) / n_cells
    h = np.full(n_cells, 1.0) if init is None else np.asarray(init, dtype=float).copy()
    if np.any(h < 0) or h.sum() <= 0:
        raise ValueError("initial density must be nonnegative with positive mass")
    h /= h.sum() * h_cell
    block = np.zeros(n_cells)
    residual = math.inf
    for it in range(1, max_iter + 1):
        nxt = U.push(h)
        residual = float(np.abs(nxt - h).sum() * h_cell)
        if residual <= tol:
            h = nxt / (nxt.sum() * h_cell)
            return DensityResult(GridFunction(fmap.a, fmap.b, h), residual, it)
        h = nxt / (nxt.sum() * h_cell)
        block += h
        if it % cesaro_block == 0:
            h = block / cesaro_block
            block[:] = 0.0
    raise NoConvergence(f"power iteration residual {residual:.3g} after {max_iter} steps")


def invariant_density(fmap: PiecewiseExpandingMap, n_cells: int, method: str = "power_iteration", **kw) -> GridFunction:
    if method != "power_iteration":
        raise ValueError(f"unsupported method {method!r}")
    return solve_invariant_density(fmap, n_cells, **kw).density


# ---------------------------------------------------------------------------
# Lasota-Yorke constants


@dataclass(frozen=True)
class LYConstants:
    alpha: float
    eps0: float
    beta: float
    c: float
    k: int
    c1: float
    c2: float
    lambda_hat: float
    c5: float
    lam: float
    c3: float
    c4: float
    i_m: float
    i_mk: float
    c4_is_upper_bound: bool = True

    def to_json(self) -> str:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return json.dumps(d, indent=2, sort_keys=True)


def lambda_hat(beta: float, alpha: float, c: float, eps0: float, k: int) -> float:
    return 2 * beta ** (-k * alpha) + 5 * k * c / (eps0 * beta ** (k - 1))


def ly_constants(
    fmap: PiecewiseExpandingMap,
    alpha: float | None = None,
    eps0: float | None = None,
    k: int = 1,
    c: float | None = None,
    max_k: int = 64,
) -> LYConstants:
    """Explicit constants of the one-step and n-step variation inequalities.

    ``k`` is raised to the smallest value with ``lambda_hat < 1`` if needed.
    ``c4`` is stored as its closed-form upper bound.
    """
    alpha = fmap.alpha if alpha is None else float(alpha)
    eps0 = 0.05 * fmap.length if eps0 is None else float(eps0)
    c = fmap.var_bound if c is None else float(c)
    beta = fmap.beta
    k = max(1, int(k))
    while lambda_hat(beta, alpha, c, eps0, k) >= 1:
        k += 1
        if k > max_k:
            raise NoContractingK(f"no k <= {max_k} gives lambda_hat < 1 (beta={beta}, c={c})")
    lh = lambda_hat(beta, alpha, c, eps0, k)
    i_m = mp.min_smoothness_interval(fmap, 1)
    i_mk = mp.min_smoothness_interval(fmap, k)
    c1 = 2 * beta**-alpha + 5 * c / eps0
    c2 = 5 * c + 4 * eps0 ** (1 - alpha) / i_m
    c5 = 5 * k * c / beta ** (k - 1) + 4 * eps0 ** (1 - alpha) / i_mk
    geometric = k + 1 if c1 == 1 else (c1 ** (k + 1) - 1) / (c1 - 1)
    c4 = c2 * geometric + c5 / (1 - lh)
    return LYConstants(
        alpha=alpha, eps0=eps0, beta=beta, c=c, k=k, c1=c1, c2=c2, lambda_hat=lh, c5=c5,
        lam=lh ** (1 / k), c3=lh**-k * c1**k, c4=c4, i_m=i_m, i_mk=i_mk,
    )


@dataclass
class LYReport:
    rows: list[tuple[int, float, float, bool]]
    k_step: tuple[float, float, bool]

    @property
    def holds(self) -> bool:
        return all(r[3] for r in self.rows) and self.k_step[2]

    def to_csv(self) -> str:
        lines = ["n,lhs,rhs,holds"]
        lines += [f"{n},{lhs:.17g},{rhs:.17g},{int(ok)}" for n, lhs, rhs, ok in self.rows]
        return "\n".join(lines) + "\n"


def verify_ly(
    fmap: PiecewiseExpandingMap,
    constants: LYConstants,
    g: GridFunction,
    n_max: int,
    params: BVParams | None = None,
    mode: str = "average",
    rtol: float = 1e-12,
) -> LYReport:
    """Check ``||T^n g|| <= c3 lam^n ||g|| + c4 ||g||_1`` for n = 1..n_max and the k-step form."""
    if params is None:
        params = BVParams.for_grid(g.a, g.b, g.n_cells, constants.alpha, constants.eps0)
    iterates = apply_transfer_power(fmap, g, max(n_max, constants.k), mode)
    norms = [norm_alpha_1(t, params) for t in iterates]
    g_norm, g_l1 = norms[0], g.l1()
    rows = []
    for n in range(1, n_max + 1):
        rhs = constants.c3 * constants.lam**n * g_norm + constants.c4 * g_l1
        rows.append((n, norms[n], rhs, norms[n] <= rhs * (1 + rtol)))
    lhs_k = norms[constants.k]
    rhs_k = constants.lambda_hat * g_norm + constants.c5 * g_l1
    return LYReport(rows, (lhs_k, rhs_k, lhs_k <= rhs_k * (1 + rtol)))


# ---------------------------------------------------------------------------
# operator distance and density stability

DICTIONARY_VERSION = "v1"


def operator_dictionary(a: float, b: float, n_cells: int) -> list[tuple[str, GridFunction]]:
    """Fixed test set: 24 dyadic indicators (levels 3, 4), 16 Fourier pairs, 8 sawtooths."""
    L = b - a
    out = []
    for level in (3, 4):
        m = 2**level
        for j in range(m):
            out.append((f"ind_{level}_{j}", indicator(a, b, n_cells, a + L * j / m, a + L * (j + 1) / m)))
    for k in range(1, 17):
        for name, fn in (("cos", np.cos), ("sin", np.sin)):
            g = GridFunction.from_function(lambda x, k=k, fn=fn: fn(2 * math.pi * k * (x - a) / L), a, b, n_cells, quad="average")
            out.append((f"{name}_{k}", g))
    for m in range(1, 9):
        g = GridFunction.from_function(lambda x, m=m: np.mod(m * (x - a) / L, 1.0) - 0.5, a, b, n_cells, quad="average")
        out.append((f"saw_{m}", g))
    return out


def certified_distance(map0: PiecewiseExpandingMap, map_eps: PiecewiseExpandingMap) -> float:
    """Map-distance upper bound from the built-in conjugacy of the family."""
    if map0.family in ("doubling", "perturbed_doubling") and map_eps.family in ("doubling", "perturbed_doubling"):
        e0 = map0.params.get("eps", 0.0)
        e1 = map_eps.params.get("eps", 0.0)
        if e0 == e1:
            return mp.map_distance_upper(map0, map_eps)
        if e0 != 0.0:
            raise NotImplementedError("built-in certificate only perturbs the doubling map")
        return mp.map_distance_upper(map0, map_eps, mp.perturbed_doubling_conjugacy(e1))
    if map0.family == "lorenz_theta" and map_eps.family == "lorenz_theta":
        return mp.lorenz_theta_certificate(map0.params["theta"], map_eps.params["theta"])[2]
    if map0 is map_eps:
        return 0.0
    raise NotImplementedError(f"no conjugacy certificate for {map0.family} -> {map_eps.family}")


@dataclass
class StabilityEstimate:
    eps: float
    map_distance: float
    op_distance_lower: float
    op_distance_upper: float
    C: float
    density_gap: float | None = None
    argmax: str = ""

    @property
    def consistent(self) -> bool:
        return self.op_distance_lower <= self.op_distance_upper + 1e-9

    def to_json(self) -> str:
        d = asdict(self)
        d["consistent"] = self.consistent
        return json.dumps(d, indent=2, sort_keys=True)


def operator_distance(
    map0: PiecewiseExpandingMap,
    map_eps: PiecewiseExpandingMap,
    dictionary: Sequence[tuple[str, GridFunction]] | None = None,
    n_cells: int = 2048,
    eps0: float | None = None,
    eps: float = math.nan,
    map_distance: float | None = None,
    c: float = 2.0,
) -> StabilityEstimate:
    """Dictionary lower estimate of ``|||T_eps - T_0|||`` and the bound ``(2 + 4C) d^alpha``."""
    if dictionary is None:
        dictionary = operator_dictionary(map0.a, map0.b, n_cells)
    alpha = map0.alpha
    n = dictionary[0][1].n_cells
    params = BVParams.for_grid(map0.a, map0.b, n, alpha, eps0)
    best, arg = 0.0, ""
    for name, g in dictionary:
        norm = norm_alpha_1(g, params)
        if norm == 0:
            continue
        diff = (apply_transfer(map_eps, g) - apply_transfer(map0, g)).l1() / norm
        if diff > best:
            best, arg = diff, name
    d = certified_distance(map0, map_eps) if map_distance is None else map_distance
    C = pairing_constant(alpha, params.eps0, c)
    return StabilityEstimate(eps, d, best, (2 + 4 * C) * d**alpha, C, argmax=arg)


def density_stability(map0: PiecewiseExpandingMap, map_eps: PiecewiseExpandingMap, n_cells: int, **kw) -> float:
    h0 = invariant_density(map0, n_cells, **kw)
    he = invariant_density(map_eps, n_cells, **kw)
    return (he - h0).l1()


def cell_integrals(fn: Callable[[Array], Array], a: float, b: float, n_cells: int) -> Array:
    """``int_{I_i} fn`` per cell by 4-point Gauss-Legendre."""
    return GridFunction.from_function(fn, a, b, n_cells, quad="average").values * (b - a) / n_cells


def space_average(fn: Callable[[Array], Array], density: GridFunction) -> float:
    return float(np.dot(cell_integrals(fn, density.a, density.b, density.n_cells), density.values))
