"""Three-dimensional flows, Poincaré sections and the quotient map.

Four vector fields are supported:

* ``lorenz63``: the classical Lorenz system.
* ``linear_saddle``: ``x' = diag(l1, l2, l3) x``, the flow box around a singularity.
* ``geometric_lorenz``: a linear saddle box followed by an affine flight of
  fixed duration back to the input section ``{x2 = 1}``.  Its return map is
  ``P(x, y) = (sgn(x)(2|x|^theta - 1), B y |x|^nu + sgn(x)(1 - B))`` when the box
  eigenvalues are ``(l1, -theta l1, -nu l1)``.
* ``rotation``: rigid rotation in the ``(x2, x3)`` plane, every orbit periodic
  with the same period.  Used as a constant return-time field.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import DOP853, solve_ivp
from scipy.optimize import brentq

from .errors import (
    BadParameters,
    FoliationAmbiguous,
    HitSingularLeaf,
    InvalidMap,
    NoReturn,
    NotEquilibrium,
    OnStableManifold,
    StepFailure,
)
from .maps import Branch, PiecewiseExpandingMap, var_inverse_derivative

Array = np.ndarray

RTOL = 1e-9
ATOL = 1e-12
BOX_RTOL = 1e-12
BOX_ATOL = 1e-14
EVENT_XTOL = 1e-13
HORIZON = 1e3
ESCAPE_RADIUS = 1e6
SINGULAR_LEAF_RADIUS = 1e-12

# Lorenz63 origin eigenvalues, used to calibrate the geometric model
_L63_L1 = 0.5 * (-11 + math.sqrt(121 + 4 * 10 * 27))
_L63_L3 = 0.5 * (-11 - math.sqrt(121 + 4 * 10 * 27))

KINDS = ("lorenz63", "linear_saddle", "geometric_lorenz", "rotation")
_DEFAULTS = {
    "lorenz63": {"sigma": 10.0, "rho": 28.0, "b": 8.0 / 3.0},
    "linear_saddle": {"eigenvalues": [2.0, -1.0, -3.0]},
    "geometric_lorenz": {"lambda1": _L63_L1, "theta": 0.75, "nu": -_L63_L3 / _L63_L1, "B": 0.3, "t_flight": 0.5},
    "rotation": {"period": 3.0},
}


@dataclass(frozen=True)
class Singularity:
    point: tuple[float, float, float]
    eigenvalues: tuple
    lorenz_like: bool


@dataclass(frozen=True)
class FlowSystem:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BadParameters(f"unknown flow kind {self.kind!r}")
        merged = {**_DEFAULTS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        if self.kind == "geometric_lorenz":
            _check_geometric(merged["theta"], merged["B"], merged["nu"])
            if not merged["lambda1"] > 0 or not merged["t_flight"] > 0:
                raise BadParameters("lambda1 and t_flight must be positive")
        if self.kind == "linear_saddle" and len(merged["eigenvalues"]) != 3:
            raise BadParameters("linear_saddle needs three eigenvalues")
        if self.kind == "rotation" and not merged["period"] > 0:
            raise BadParameters("period must be positive")

    # -- vector field ------------------------------------------------------
    def _diag(self) -> Array:
        p = self.params
        if self.kind == "linear_saddle":
            return np.asarray(p["eigenvalues"], dtype=float)
        l1 = p["lambda1"]
        return np.array([l1, -p["theta"] * l1, -p["nu"] * l1])

    def rhs(self, t, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "lorenz63":
            return np.array([
                p["sigma"] * (x[1] - x[0]),
                x[0] * (p["rho"] - x[2]) - x[1],
                x[0] * x[1] - p["b"] * x[2],
            ])
        if self.kind == "rotation":
            w = 2 * math.pi / p["period"]
            return np.array([0.0 * x[0], -w * x[2], w * x[1]])
        return self._diag() * x

    def jacobian(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "lorenz63":
            s, r, b = p["sigma"], p["rho"], p["b"]
            return np.array([
                [-s, s, 0.0],
                [r - x[2], -1.0, -x[0]],
                [x[1], x[0], -b],
            ])
        if self.kind == "rotation":
            w = 2 * math.pi / p["period"]
            return np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -w], [0.0, w, 0.0]])
        return np.diag(self._diag())

    def singularities(self) -> list[Singularity]:
        if self.kind == "rotation":
            return []
        pts = [np.zeros(3)]
        if self.kind == "lorenz63":
            p = self.params
            if p["rho"] > 1:
                q = math.sqrt(p["b"] * (p["rho"] - 1))
                pts += [np.array([q, q, p["rho"] - 1]), np.array([-q, -q, p["rho"] - 1])]
        out = []
        for pt in pts:
            eig, ok = lorenz_like_check(self, pt)
            out.append(Singularity(tuple(float(v) for v in pt), tuple(eig.tolist()), ok))
        return out

    def lambda1(self) -> float:
        """Expanding eigenvalue of the first Lorenz-like singularity."""
        for s in self.singularities():
            if s.lorenz_like:
                return float(np.real(s.eigenvalues[0]))
        raise BadParameters("system has no Lorenz-like singularity")

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, **self.params}, sort_keys=True)

    @classmethod
    def from_json(cls, doc) -> "FlowSystem":
        if isinstance(doc, str):
            doc = json.loads(doc)
        doc = dict(doc)
        kind = doc.pop("kind")
        return cls(kind, doc)


def lorenz63(sigma: float = 10.0, rho: float = 28.0, b: float = 8.0 / 3.0) -> FlowSystem:
    return FlowSystem("lorenz63", {"sigma": sigma, "rho": rho, "b": b})


def linear_saddle(l1: float, l2: float, l3: float) -> FlowSystem:
    return FlowSystem("linear_saddle", {"eigenvalues": [l1, l2, l3]})


def geometric_lorenz(theta: float = 0.75, B: float = 0.3, nu: float | None = None,
                     lambda1: float | None = None, t_flight: float = 0.5) -> FlowSystem:
    p = {"theta": theta, "B": B, "t_flight": t_flight}
    if nu is not None:
        p["nu"] = nu
    if lambda1 is not None:
        p["lambda1"] = lambda1
    return FlowSystem("geometric_lorenz", p)


def rotation(period: float = 3.0) -> FlowSystem:
    return FlowSystem("rotation", {"period": period})


# ---------------------------------------------------------------------------
# singularities


def lorenz_like_check(system: FlowSystem, point, tol: float = 1e-10) -> tuple[Array, bool]:
    """Eigenvalues at an equilibrium, ordered ``l1 >= l2 >= l3``, and the Lorenz-like test.

    Complex spectra are returned sorted by real part and never count as
    Lorenz-like.
    """
    point = np.asarray(point, dtype=float)
    if np.linalg.norm(system.rhs(0.0, point)) >= tol:
        raise NotEquilibrium(f"|X(p)| = {np.linalg.norm(system.rhs(0.0, point)):.3g} at {point}")
    eig = np.linalg.eigvals(system.jacobian(point))
    eig = eig[np.argsort(-eig.real, kind="stable")]
    if np.all(np.abs(eig.imag) < 1e-12):
        lam = eig.real
        ok = bool(lam[0] > 0 > lam[1] > lam[2] and lam[0] + lam[1] > 0)
        return lam, ok
    return eig, False


# ---------------------------------------------------------------------------
# integration


@dataclass
class Trajectory:
    t: Array
    y: Array
    sol: Callable[[float], Array]

    @property
    def end(self) -> Array:
        return self.y[:, -1]


def integrate(system: FlowSystem, x0, t: float, rtol: float = RTOL, atol: float = ATOL) -> Trajectory:
    """Integrate ``system`` from ``x0`` over ``[0, t]`` with DOP853 and dense output."""
    if not t > 0:
        raise BadParameters("integration time must be positive")
    res = solve_ivp(system.rhs, (0.0, t), np.asarray(x0, dtype=float), method="DOP853",
                    rtol=rtol, atol=atol, dense_output=True)
    if not res.success or not np.all(np.isfinite(res.y)):
        raise StepFailure(res.message)
    return Trajectory(res.t, res.y, res.sol)


def _first_crossing(rhs, y0: Array, event: Callable[[Array], float], direction: int,
                    t_min: float = 0.0, horizon: float = HORIZON, rtol: float = RTOL, atol: float = ATOL,
                    accept: Callable[[Array], bool] | None = None,
                    guard: Callable[[Array], None] | None = None,
                    dense_segments: list | None = None) -> tuple[float, Array]:
    """Step DOP853 until ``event`` changes sign in ``direction`` after ``t_min``.

    Crossings are bracketed between accepted steps and located with Brent's
    method on the step's dense output.  ``accept`` can reject a crossing (for
    example one outside the section bounds); integration then continues.
    ``dense_segments`` collects ``(t_lo, t_hi, interpolant)`` for later
    quadrature.
    """
    solver = DOP853(rhs, 0.0, np.asarray(y0, dtype=float), horizon, rtol=rtol, atol=atol)
    t_prev, s_prev = 0.0, event(solver.y)
    while solver.status == "running":
        solver.step()
        if solver.status == "failed":
            raise StepFailure(solver.status)
        y = solver.y
        if not np.all(np.isfinite(y)) or np.linalg.norm(y[:3]) > ESCAPE_RADIUS:
            raise NoReturn("trajectory escaped")
        if guard is not None:
            guard(y)
        t_new, s_new = solver.t, event(y)
        dense = solver.dense_output()
        hit = None
        if t_new > t_min:
            lo = max(t_prev, t_min)
            s_lo = s_prev if lo == t_prev else event(dense(lo))
            crossed = (s_lo < 0 <= s_new) if direction > 0 else (s_lo > 0 >= s_new) if direction < 0 else s_lo * s_new <= 0 and s_lo != 0
            if crossed:
                th = t_new if s_new == 0 else brentq(lambda tt: event(dense(tt)), lo, t_new, xtol=EVENT_XTOL, rtol=4 * np.finfo(float).eps)
                yh = dense(th)
                if accept is None or accept(yh):
                    hit = (th, yh)
        if dense_segments is not None:
            dense_segments.append((t_prev, hit[0] if hit else t_new, dense))
        if hit is not None:
            return hit
        t_prev, s_prev = t_new, s_new
    raise NoReturn(f"no crossing within horizon {horizon}")


# ---------------------------------------------------------------------------
# passage time through the flow box


@dataclass(frozen=True)
class PassageTime:
    x1: float
    formula: float
    integrated: float

    @property
    def discrepancy(self) -> float:
        return abs(self.formula - self.integrated)


def passage_time_formula(lambda1: float, x1) -> Array:
    return -np.log(np.abs(np.asarray(x1, dtype=float))) / lambda1


def passage_time(system: FlowSystem, x1_in: float, check: bool = True,
                 rtol: float = 1e-13, atol: float = 1e-15) -> PassageTime:
    """Time for the linear saddle to carry ``x1_in`` to ``|x1| = 1``, by formula and by integration."""
    if system.kind not in ("linear_saddle", "geometric_lorenz"):
        raise BadParameters("passage_time needs a linear flow box")
    if x1_in == 0:
        raise OnStableManifold("x1 = 0 lies on the stable manifold and never exits")
    if not abs(x1_in) < 1:
        raise BadParameters("require 0 < |x1| < 1")
    l1 = float(system._diag()[0])
    t_formula = float(passage_time_formula(l1, x1_in))
    t_num = float("nan")
    if check:
        t_num, _ = _first_crossing(system.rhs, np.array([x1_in, 1.0, 0.5]),
                                   lambda y: abs(y[0]) - 1.0, +1, rtol=rtol, atol=atol)
    return PassageTime(float(x1_in), t_formula, t_num)


# ---------------------------------------------------------------------------
# sections


@dataclass(frozen=True)
class CrossSection:
    """Rectangle ``point + u*e_u + v*e_v`` with the given bounds, inside the plane ``normal . (z - point) = 0``."""

    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    e_u: tuple[float, float, float]
    e_v: tuple[float, float, float]
    bounds: tuple[float, float, float, float]  # u_lo, u_hi, v_lo, v_hi
    delta: float
    direction: int = -1

    def __post_init__(self):
        if not self.delta > 0:
            raise BadParameters("delta must be positive")
        if self.direction not in (-1, 0, 1):
            raise BadParameters("direction must be -1, 0 or +1")

    def plane(self, z) -> float:
        return float(np.dot(self.normal, np.asarray(z[:3]) - np.asarray(self.point)))

    def to_3d(self, uv) -> Array:
        u, v = uv
        return np.asarray(self.point) + u * np.asarray(self.e_u) + v * np.asarray(self.e_v)

    def to_section(self, z) -> Array:
        d = np.asarray(z)[..., :3] - np.asarray(self.point)
        return np.stack([d @ np.asarray(self.e_u), d @ np.asarray(self.e_v)], axis=-1)

    def contains(self, uv, margin: float = 0.0) -> bool:
        u, v = uv
        ul, uh, vl, vh = self.bounds
        return ul + margin <= u <= uh - margin and vl + margin <= v <= vh - margin

    def boundary_distance(self, uv) -> float:
        """Signed distance to the boundary of the rectangle (positive inside)."""
        u, v = np.asarray(uv, dtype=float).T
        ul, uh, vl, vh = self.bounds
        return np.minimum.reduce([u - ul, uh - u, v - vl, vh - v])

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, doc) -> "CrossSection":
        if isinstance(doc, str):
            doc = json.loads(doc)
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()})


def lorenz63_section(system: FlowSystem | None = None) -> CrossSection:
    """Plane ``z = rho - 1`` crossed downward; bounds sized so the attractor stays 5% of the width inside."""
    rho = (system.params["rho"] if system is not None else 28.0)
    half_u, half_v = 10.0, 10.0
    return CrossSection((0.0, 0.0, rho - 1), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                        (-half_u, half_u, -half_v, half_v), delta=0.05 * 2 * half_u, direction=-1)


def geometric_section() -> CrossSection:
    """Input section ``{x2 = 1}`` of the geometric model, coordinates ``(x1, x3)``."""
    return CrossSection((0.0, 1.0, 0.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                        (-1.0, 1.0, -1.0, 1.0), delta=0.05, direction=-1)


def rotation_section(system: FlowSystem | None = None) -> CrossSection:
    """Half-plane ``{x2 = 0, x3 > 0}`` of the rotation field, crossed with ``x2`` decreasing."""
    return CrossSection((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                        (-1.0, 1.0, 0.5, 1.5), delta=0.05, direction=-1)


def default_section(system: FlowSystem) -> CrossSection:
    if system.kind == "lorenz63":
        return lorenz63_section(system)
    if system.kind == "geometric_lorenz":
        return geometric_section()
    if system.kind == "rotation":
        return rotation_section(system)
    # a plane the linear saddle crosses once and never again
    return CrossSection((0.0, 1.0, 0.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                        (-1.0, 1.0, -1.0, 1.0), delta=0.05, direction=-1)


# ---------------------------------------------------------------------------
# returns


@dataclass(frozen=True)
class ReturnRecord:
    start: tuple[float, float]
    tau: float
    hit: tuple[float, float]
    t0: float = 0.0


@dataclass
class Segment:
    """One orbit piece from a section point to its return.

    ``pieces`` holds ``(t_lo, t_hi, path)`` where ``path(t)`` gives phase-space
    points (shape ``(3,)`` or ``(3, m)``) for times in ``[t_lo, t_hi]``.
    """

    record: ReturnRecord
    pieces: list


def _geometric_exit(system: FlowSystem, x: float, y: float, rtol: float, atol: float, pieces: list | None):
    if abs(x) < SINGULAR_LEAF_RADIUS:
        raise HitSingularLeaf(f"|x1| = {abs(x):.3g} on the input section")
    z0 = np.array([x, 1.0, y])
    t_exit, z_exit = _first_crossing(system.rhs, z0, lambda z: abs(z[0]) - 1.0, +1, rtol=rtol, atol=atol,
                                     dense_segments=pieces)
    return t_exit, z_exit


def _geometric_flight(system: FlowSystem, z_exit: Array) -> Array:
    B = system.params["B"]
    s = math.copysign(1.0, z_exit[0])
    return np.array([s * (2 * z_exit[1] - 1), 1.0, B * z_exit[2] + s * (1 - B)])


def _tolerances(system: FlowSystem, rtol, atol) -> tuple[float, float]:
    if system.kind == "geometric_lorenz":
        # the box is compared against the closed-form map at 1e-9
        return (BOX_RTOL if rtol is None else rtol), (BOX_ATOL if atol is None else atol)
    return (RTOL if rtol is None else rtol), (ATOL if atol is None else atol)


def return_segment(system: FlowSystem, section: CrossSection, x, t0: float = 0.0,
                   horizon: float = HORIZON, rtol: float | None = None, atol: float | None = None,
                   keep_path: bool = False) -> Segment:
    """First return to ``section`` after time ``t0``, optionally with the orbit path."""
    rtol, atol = _tolerances(system, rtol, atol)
    if t0 < 0:
        raise BadParameters("t0 must be nonnegative")
    x = np.asarray(x, dtype=float)
    if not section.contains(x):
        raise BadParameters(f"start {x} outside section bounds")
    pieces: list | None = [] if keep_path else None
    if system.kind == "geometric_lorenz":
        t_flight = system.params["t_flight"]
        elapsed, uv = 0.0, x
        while True:
            box = [] if keep_path else None
            t_exit, z_exit = _geometric_exit(system, uv[0], uv[1], rtol, atol, box)
            z_in = _geometric_flight(system, z_exit)
            if keep_path:
                pieces.extend((elapsed + a, elapsed + b, _shifted(d, elapsed)) for a, b, d in box)
                pieces.append((elapsed + t_exit, elapsed + t_exit + t_flight,
                               _line(z_exit, z_in, elapsed + t_exit, t_flight)))
            elapsed += t_exit + t_flight
            uv = np.array([z_in[0], z_in[2]])
            if elapsed > t0:
                break
            if elapsed > horizon:
                raise NoReturn("horizon exceeded")
        return Segment(ReturnRecord(tuple(map(float, x)), float(elapsed), tuple(map(float, uv)), float(t0)), pieces or [])

    z0 = section.to_3d(x)
    sing = [np.asarray(s.point) for s in system.singularities()]

    def guard(z):
        for p in sing:
            if np.linalg.norm(z - p) < SINGULAR_LEAF_RADIUS:
                raise HitSingularLeaf("orbit entered the singular neighbourhood")

    def accept(z):
        return section.contains(section.to_section(z))

    th, zh = _first_crossing(system.rhs, z0, section.plane, section.direction, t_min=max(t0, 1e-9),
                             horizon=horizon, rtol=rtol, atol=atol, accept=accept, guard=guard,
                             dense_segments=pieces)
    uv = section.to_section(zh)
    return Segment(ReturnRecord(tuple(map(float, x)), float(th), tuple(map(float, uv)), float(t0)), pieces or [])


def _shifted(dense, dt):
    return lambda t: dense(np.asarray(t) - dt)


def _line(z_a, z_b, t_a, duration):
    z_a, z_b = np.asarray(z_a), np.asarray(z_b)

    def path(t):
        s = (np.asarray(t, dtype=float) - t_a) / duration
        return z_a[:, None] * (1 - s) + z_b[:, None] * s if np.ndim(s) else z_a * (1 - s) + z_b * s

    return path


def poincare_return(system: FlowSystem, section: CrossSection, x, t0: float = 0.0,
                    horizon: float = HORIZON, rtol: float | None = None, atol: float | None = None) -> ReturnRecord:
    """First crossing of ``section`` after ``t0`` in its direction, inside its bounds."""
    return return_segment(system, section, x, t0, horizon, rtol, atol).record


@dataclass
class ReturnDataset:
    start: Array  # (n, 2) section coordinates
    tau: Array
    hit: Array
    hit_3d: Array
    plane_residual: Array
    wing: Array  # sign of the time integral of x1 over each excursion

    def to_csv(self, path) -> None:
        data = np.column_stack([self.start, self.tau, self.hit])
        np.savetxt(path, data, delimiter=",", fmt="%.17g", header="x_start,y_start,tau,x_hit,y_hit", comments="")


def return_dataset(system: FlowSystem, section: CrossSection, n_returns: int, z0=None,
                   transient: float = 50.0, rtol: float = RTOL, atol: float = ATOL) -> ReturnDataset:
    """Consecutive returns of one long orbit, after discarding a transient.

    The orbit is integrated in one pass; each crossing is located on the
    dense output of the step that brackets it.
    """
    z0 = np.array([1.0, 1.0, 1.0]) if z0 is None else np.asarray(z0, dtype=float)
    if transient > 0:
        z0 = integrate(system, z0, transient, rtol, atol).end
    solver = DOP853(system.rhs, 0.0, z0, np.inf, rtol=rtol, atol=atol)
    event = section.plane
    times, points, wings = [], [], []
    t_prev, s_prev, y_prev = 0.0, event(solver.y), solver.y.copy()
    x_int = 0.0
    while len(times) < n_returns + 1:
        solver.step()
        if solver.status == "failed" or not np.all(np.isfinite(solver.y)):
            raise StepFailure("integration failed while collecting returns")
        t_new, s_new = solver.t, event(solver.y)
        x_int += 0.5 * (y_prev[0] + solver.y[0]) * (t_new - t_prev)
        y_prev = solver.y.copy()
        crossed = (s_prev < 0 <= s_new) if section.direction > 0 else (s_prev > 0 >= s_new)
        if crossed:
            dense = solver.dense_output()
            th = t_new if s_new == 0 else brentq(lambda tt: event(dense(tt)), t_prev, t_new,
                                                 xtol=EVENT_XTOL, rtol=4 * np.finfo(float).eps)
            zh = dense(th)
            if section.contains(section.to_section(zh)):
                times.append(th)
                points.append(zh)
                wings.append(1.0 if x_int >= 0 else -1.0)
                x_int = 0.0
        t_prev, s_prev = t_new, s_new
        if t_new > HORIZON * (n_returns + 1):
            raise NoReturn("returns too sparse")
    times = np.asarray(times)
    pts = np.asarray(points)
    uv = section.to_section(pts)
    res = np.array([section.plane(p) for p in pts])
    return ReturnDataset(uv[:-1], np.diff(times), uv[1:], pts[1:], res[1:], np.asarray(wings[1:]))


# ---------------------------------------------------------------------------
# geometric return map


def _check_geometric(theta, B, nu) -> None:
    if not 0.5 < theta < 1:
        raise BadParameters("theta must lie in (1/2, 1)")
    if not 0 < B < 1:
        raise BadParameters("B must lie in (0, 1)")
    if not nu > 1:
        raise BadParameters("nu must exceed 1")


@dataclass(frozen=True)
class GeometricReturnMap:
    theta: float
    B: float
    nu: float

    def __post_init__(self):
        _check_geometric(self.theta, self.B, self.nu)

    def f(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        return np.sign(x) * (2 * np.abs(x) ** self.theta - 1)

    def g(self, x, y) -> Array:
        x = np.asarray(x, dtype=float)
        return self.B * np.asarray(y, dtype=float) * np.abs(x) ** self.nu + np.sign(x) * (1 - self.B)

    def __call__(self, x, y) -> tuple[Array, Array]:
        return self.f(x), self.g(x, y)

    def df(self, x) -> Array:
        with np.errstate(divide="ignore"):
            return 2 * self.theta * np.abs(np.asarray(x, dtype=float)) ** (self.theta - 1)

    def fiber_contraction(self, x) -> Array:
        """``dg/dy = B |x|^nu``."""
        return self.B * np.abs(np.asarray(x, dtype=float)) ** self.nu

    @property
    def alpha(self) -> float:
        return 1 - self.theta

    @classmethod
    def from_system(cls, system: FlowSystem) -> "GeometricReturnMap":
        p = system.params
        return cls(p["theta"], p["B"], p["nu"])


def geometric_return_map(theta: float, B: float, nu: float) -> GeometricReturnMap:
    return GeometricReturnMap(float(theta), float(B), float(nu))


# ---------------------------------------------------------------------------
# collapsing the stable foliation


def _locate_jump(fn: Callable[[Array], Array], lo: float, hi: float, tol: float = 1e-15) -> float:
    """Bisect for a jump of ``fn`` inside ``[lo, hi]``: keep the half whose ends disagree most."""
    f_lo, f_hi = float(fn(np.array([lo]))[0]), float(fn(np.array([hi]))[0])
    while hi - lo > tol * max(1.0, abs(lo), abs(hi)):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        fm = float(fn(np.array([mid]))[0])
        if abs(fm - f_lo) < abs(fm - f_hi):
            lo, f_lo = mid, fm
        else:
            hi, f_hi = mid, fm
    return 0.5 * (lo + hi)


def collapse_foliation(P: GeometricReturnMap, y_ref: float = 0.0, n_grid: int = 2**12) -> PiecewiseExpandingMap:
    """Quotient of the geometric return map along its vertical stable leaves.

    The leaf coordinate is ``x``.  Branch breaks are detected as jumps in the
    tabulated first coordinate of ``P(., y_ref)``.
    """
    first = lambda x: P(x, np.full(np.shape(x), y_ref))[0]
    xs = np.linspace(-1.0, 1.0, n_grid + 1)[:-1] + 1.0 / n_grid  # midpoints, avoids leaf 0
    vals = first(xs)
    jumps = np.abs(np.diff(vals))
    typical = np.median(jumps)
    cand = np.flatnonzero(jumps > 20 * typical)
    # a jump reverses the direction of travel, a steep smooth stretch does not
    cuts = []
    for i in cand:
        c = _locate_jump(first, xs[i], xs[i + 1])
        cuts.append(0.0 if abs(c) < 1e-12 else c)
    edges = [-1.0, *cuts, 1.0]
    branches = []
    for lo, hi in zip(edges, edges[1:]):
        mid = np.array([0.5 * (lo + hi)])
        orient = 1 if P.df(mid)[0] * np.sign(first(np.array([hi - 1e-9]))[0] - first(np.array([lo + 1e-9]))[0]) > 0 else -1
        side = 1.0 if mid[0] > 0 else -1.0

        def fwd(x, side=side):
            x = np.asarray(x, dtype=float)
            return side * (2 * np.abs(x) ** P.theta - 1)

        branches.append(Branch(lo, hi, fwd, P.df, orient))
    proto = PiecewiseExpandingMap((-1.0, 1.0), tuple(branches), beta=2 * P.theta, alpha=P.alpha, var_bound=1.0)
    var = var_inverse_derivative(proto, P.alpha)
    return PiecewiseExpandingMap((-1.0, 1.0), tuple(branches), beta=2 * P.theta, alpha=P.alpha,
                                 var_bound=var * (1 + 1e-9), family="quotient",
                                 params={"theta": P.theta, "B": P.B, "nu": P.nu})


def semiconjugacy_residual(P: GeometricReturnMap, fmap: PiecewiseExpandingMap, n_samples: int = 10**4,
                           seed: int = 0) -> float:
    """``sup |f(p(z)) - p(P(z))|`` over random points off the singular leaf."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n_samples)
    y = rng.uniform(-1, 1, n_samples)
    keep = np.abs(x) > SINGULAR_LEAF_RADIUS
    x, y = x[keep], y[keep]
    return float(np.max(np.abs(fmap(x) - P(x, y)[0])))


# -- the Lorenz63 path: data-driven leaves --------------------------------


def _variational_rhs(system: FlowSystem):
    def rhs(t, w):
        z = w[:3]
        J = system.jacobian(z)
        M = w[3:].reshape(3, 3)
        return np.concatenate([system.rhs(t, z), (J @ M).ravel()])

    return rhs


def return_jacobian(system: FlowSystem, section: CrossSection, uv, rtol: float = RTOL, atol: float = ATOL) -> Array:
    """2x2 derivative of the return map in section coordinates, via variational equations."""
    z0 = section.to_3d(uv)
    w0 = np.concatenate([z0, np.eye(3).ravel()])

    def accept(w):
        return section.contains(section.to_section(w[:3]))

    _, wh = _first_crossing(_variational_rhs(system), w0, lambda w: section.plane(w[:3]), section.direction,
                            t_min=1e-9, rtol=rtol, atol=atol, accept=accept)
    zh, M = wh[:3], wh[3:].reshape(3, 3)
    n = np.asarray(section.normal)
    X = system.rhs(0.0, zh)
    E = np.column_stack([section.e_u, section.e_v])
    W = M @ E
    W = W - np.outer(X, n @ W) / (n @ X)  # slide along the flow back into the plane
    return E.T @ W


def stable_direction(system: FlowSystem, section: CrossSection, uv) -> Array:
    """Most contracted unit direction of the return-map derivative at ``uv``."""
    J = return_jacobian(system, section, uv)
    _, _, vt = np.linalg.svd(J)
    d = vt[-1]
    return d if d[np.argmax(np.abs(d))] > 0 else -d


@dataclass
class QuotientTable:
    """Tabulated quotient map ``leaf coordinate in -> leaf coordinate out``.

    Rows are grouped by branch; ``cut`` is the leaf coordinate separating
    them and ``residual`` the worst normalized distance of a data point from
    the tabulated curve.
    """

    leaf_in: Array
    leaf_out: Array
    branch: Array
    cut: float
    direction: Array
    residual: float

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.leaf_in, self.leaf_out]), delimiter=",", fmt="%.17g",
                   header="leaf_in,leaf_out", comments="")

    def to_map(self) -> PiecewiseExpandingMap:
        """Piecewise linear interpolant of the table, one branch per side of the cut.

        Raises InvalidMap when a tabulated branch is not monotone or has a
        slope at most 1.
        """
        branches, slopes = [], []
        lo_all, hi_all = float(self.leaf_in[0]), float(self.leaf_in[-1])
        edges = [lo_all, self.cut, hi_all]
        for k, (lo, hi) in enumerate(zip(edges, edges[1:])):
            sel = (self.branch == k) & (self.leaf_in > lo) & (self.leaf_in < hi)
            xin, yin = self.leaf_in[sel], self.leaf_out[sel]
            if len(xin) < 2:
                raise InvalidMap("branch with fewer than two table points")
            # extend the end segments linearly to the branch edges
            xs = np.concatenate([[lo], xin, [hi]])
            ys = np.concatenate([[0.0], yin, [0.0]])
            ys[0] = yin[0] + (lo - xin[0]) * (yin[1] - yin[0]) / (xin[1] - xin[0])
            ys[-1] = yin[-1] + (hi - xin[-1]) * (yin[-1] - yin[-2]) / (xin[-1] - xin[-2])
            s = np.diff(ys) / np.diff(xs)
            if not (np.all(s > 0) or np.all(s < 0)):
                raise InvalidMap("tabulated branch is not monotone")
            slopes.append(float(np.min(np.abs(s))))
            orient = 1 if s[0] > 0 else -1
            branches.append(Branch(lo, hi, lambda t, xs=xs, ys=ys: np.interp(t, xs, ys),
                                   lambda t, xs=xs, s=s: np.abs(s[np.clip(np.searchsorted(xs, t) - 1, 0, len(s) - 1)]),
                                   orient))
        beta = min(slopes)
        if not beta > 1:
            raise InvalidMap(f"tabulated map is not expanding (min slope {beta:.3g})")
        return PiecewiseExpandingMap((lo_all, hi_all), tuple(branches), beta=beta, alpha=1.0,
                                     var_bound=np.inf, family="table")


def _polyline_distance(px: Array, py: Array, qx: Array, qy: Array) -> Array:
    """Distance from each point ``(px, py)`` to the polyline through ``(qx, qy)``."""
    ax, ay, bx, by = qx[:-1], qy[:-1], qx[1:], qy[1:]
    dx, dy = bx - ax, by - ay
    L2 = np.maximum(dx * dx + dy * dy, 1e-300)
    t = np.clip(((px[:, None] - ax) * dx + (py[:, None] - ay) * dy) / L2, 0.0, 1.0)
    ex = px[:, None] - (ax + t * dx)
    ey = py[:, None] - (ay + t * dy)
    return np.sqrt(np.min(ex * ex + ey * ey, axis=1))


def quotient_from_returns(data: ReturnDataset, direction, n_bins: int = 64, max_residual: float = 0.05) -> QuotientTable:
    """Collapse returns along a fixed stable direction and tabulate the quotient map.

    The leaf coordinate of a section point is its component orthogonal to
    ``direction``.  Points are split into branches by the wing their
    excursion visits, and the cut sits between the two branches.  Each branch is tabulated by
    medians over equal-count bins.  The residual is the largest distance of a
    data point from the tabulated curve, both axes scaled to unit range; above
    ``max_residual`` the leaves do not explain the data and
    FoliationAmbiguous is raised.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    perp = np.array([-d[1], d[0]])
    p_in = data.start @ perp
    p_out = data.hit @ perp
    # branches are the two symbols of the excursion (which wing is visited)
    labels = np.unique(data.wing)
    if len(labels) != 2:
        raise FoliationAmbiguous("returns visit only one wing")
    parts = [(p_in[data.wing == w], p_out[data.wing == w]) for w in labels]
    parts.sort(key=lambda xy: float(np.median(xy[0])))
    parts = [(xs[np.argsort(xs, kind="stable")], ys[np.argsort(xs, kind="stable")]) for xs, ys in parts]
    cut = 0.5 * (parts[0][0].max() + parts[1][0].min())
    span_in, span_out = np.ptp(p_in), np.ptp(p_out)
    rows_x, rows_y, rows_b, residual = [], [], [], 0.0
    for b, (xs, ys) in enumerate(parts):
        m = max(2, min(n_bins // 2, len(xs) // 8))
        groups = np.array_split(np.arange(len(xs)), m)
        tx = np.array([np.median(xs[g]) for g in groups])
        ty = np.array([np.median(ys[g]) for g in groups])
        # residual curve is anchored at the outermost points so it spans the data
        cx = np.concatenate([[xs[0]], tx, [xs[-1]]])
        cy = np.concatenate([[ys[0]], ty, [ys[-1]]])
        dist = _polyline_distance(xs / span_in, ys / span_out, cx / span_in, cy / span_out)
        residual = max(residual, float(dist.max()))
        rows_x.append(tx)
        rows_y.append(ty)
        rows_b.append(np.full(len(tx), b))
    if residual > max_residual:
        raise FoliationAmbiguous(f"leaf residual {residual:.3g} exceeds {max_residual}")
    return QuotientTable(np.concatenate(rows_x), np.concatenate(rows_y), np.concatenate(rows_b),
                         float(cut), perp, residual)


def collapse_lorenz63(system: FlowSystem, section: CrossSection, data: ReturnDataset,
                      n_directions: int = 32, n_bins: int = 64, max_residual: float = 0.05) -> QuotientTable:
    """Estimate the stable direction at sampled returns and bin the quotient map."""
    step = max(1, len(data.start) // n_directions)
    dirs = np.array([stable_direction(system, section, uv) for uv in data.start[::step][:n_directions]])
    ref = dirs[0]
    dirs = dirs * np.sign(dirs @ ref)[:, None]
    mean = dirs.mean(axis=0)
    return quotient_from_returns(data, mean / np.linalg.norm(mean), n_bins, max_residual)


# ---------------------------------------------------------------------------
# integrability of the return time


@dataclass(frozen=True)
class ReturnTimeIntegral:
    estimate: float
    estimate_half: float
    converged: bool
    slope: float
    slope_target: float
    n_samples: int
    failures: int

    @property
    def slope_rel_error(self) -> float:
        return abs(self.slope - self.slope_target) / abs(self.slope_target)


def return_time_integral(system: FlowSystem, section: CrossSection, n_samples: int, seed: int = 0,
                         tau: Callable[[Array], float] | None = None, n_levels: int = 12,
                         near_levels: int = 6, rel_tol: float = 0.02) -> ReturnTimeIntegral:
    """Stratified Monte Carlo mean of the return time over the section rectangle.

    The ``u`` range is split at 0 (the singular leaf) and each side into
    dyadic bands ``2^-j``-close to it plus a core band, so the logarithmic
    singularity is resolved.  Returns the normalized integral (mean over the
    rectangle) from ``n_samples`` points and from the first half of them.
    The slope of tau against ``-log|u|`` on the ``near_levels`` closest bands
    is compared with ``1/lambda1``.
    """
    if n_samples < 1000:
        raise BadParameters("need at least 1000 samples")
    rng = np.random.default_rng(seed)
    ul, uh, vl, vh = section.bounds
    strata = []
    for side, width in ((1.0, uh), (-1.0, -ul)):
        if width <= 0:
            continue
        for j in range(n_levels):
            strata.append((side, width * 2.0 ** -(j + 1), width * 2.0 ** -j, j))
        strata.append((side, 0.0, width * 2.0 ** -n_levels, n_levels))
    per = max(2, n_samples // len(strata))
    total_w = (uh - ul)
    if tau is None:
        def tau(uv):
            return poincare_return(system, section, uv).tau
    sums_full = sums_half = 0.0
    xs_near, ts_near = [], []
    failures = 0
    for side, a, b, j in strata:
        r = rng.uniform(a, b, per)
        r = np.where(r == 0, b * 0.5, r)  # never land on the leaf itself
        v = rng.uniform(vl, vh, per)
        vals = np.empty(per)
        for i in range(per):
            try:
                vals[i] = tau(np.array([side * r[i], v[i]]))
            except (HitSingularLeaf, NoReturn):
                vals[i] = np.nan
                failures += 1
        ok = np.isfinite(vals)
        weight = (b - a) / total_w
        sums_full += weight * float(np.mean(vals[ok]))
        half = vals[: per // 2]
        sums_half += weight * float(np.mean(half[np.isfinite(half)]))
        if n_levels - near_levels <= j < n_levels:
            xs_near.append(-np.log(r[ok]))
            ts_near.append(vals[ok])
    X = np.concatenate(xs_near)
    T = np.concatenate(ts_near)
    slope = float(np.polyfit(X, T, 1)[0])
    try:
        target = 1.0 / system.lambda1()
    except BadParameters:
        target = float("nan")
    conv = bool(abs(sums_full - sums_half) < rel_tol * abs(sums_full))
    return ReturnTimeIntegral(float(sums_full), float(sums_half), conv, slope, target, per * len(strata), failures)
