"""The time-one image of the zero section, its front, and its zero-wall crossings.

Everything here works in the flow parametrisation ``q0 -> psi_H^1(q0, 0, 0)``.
Roots of ``q0 -> p_N^-(q0)`` are the points where the Legendrian meets the
zero wall ``{p = 0}``; their ``z`` values are the critical values of the
generating function.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .contact import ContactPoint
from .flow import DEFAULT_SPEC, FlowError, FlowSpec, transport
from .parallel import map_chunks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    """Tensor grid of base points; ``count`` samples per axis, endpoints included."""

    lo: tuple
    hi: tuple
    count: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        count = tuple(int(v) for v in np.atleast_1d(self.count))
        if not (len(lo) == len(hi) == len(count)) or not lo:
            raise ValueError("grid bounds and counts must have the same length")
        for a, b, k in zip(lo, hi, count):
            if not (np.isfinite(a) and np.isfinite(b)) or k < 1 or (k > 1 and not a < b):
                raise ValueError("each grid axis needs finite lo < hi and count >= 1")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "count", count)

    @classmethod
    def line(cls, lo: float, hi: float, count: int) -> "Grid":
        return cls((lo,), (hi,), (count,))

    @property
    def dim(self) -> int:
        return len(self.lo)

    def axes(self) -> list:
        return [np.linspace(a, b, k) for a, b, k in zip(self.lo, self.hi, self.count)]

    def points(self) -> np.ndarray:
        """All grid points in C order (last axis fastest)."""
        return np.array(list(itertools.product(*self.axes())), dtype=float).reshape(-1, self.dim)

    def to_dict(self) -> dict:
        return {"min": list(self.lo), "max": list(self.hi), "count": list(self.count)}


@dataclass
class LegendrianSample:
    grid: Grid
    q0: np.ndarray        # (G, n)
    points: np.ndarray    # (G, 2n+1), NaN rows where the flow failed
    errors: dict = field(default_factory=dict)

    @property
    def ok(self) -> np.ndarray:
        return np.all(np.isfinite(self.points), axis=1)

    @property
    def entries(self) -> list:
        return [(self.q0[i], ContactPoint.from_array(self.points[i]))
                for i in range(self.q0.shape[0]) if self.ok[i]]

    def success_fraction(self) -> float:
        return float(np.mean(self.ok))


def _flow_chunk(chunk, H, spec):
    n = chunk.shape[1]
    Y = np.concatenate([chunk, np.zeros((chunk.shape[0], n + 1))], axis=1)
    Y1, _ = transport(H, Y, 0.0, 1.0, spec)
    return list(Y1)


def _flow_grid(H, q0, spec, jobs=1):
    n = q0.shape[1]
    errors = {}

    def fallback(chunk):
        rows = []
        for q in chunk:
            try:
                rows.extend(_flow_chunk(q[None, :], H, spec))
            except FlowError as exc:
                errors[tuple(q.tolist())] = str(exc)
                rows.append(np.full(2 * n + 1, np.nan))
        return rows

    rows = map_chunks(_flow_chunk, q0, jobs, args=(H, spec), fallback=fallback)
    return np.array(rows).reshape(-1, 2 * n + 1), errors


def _check_grid(H, grid: Grid):
    if grid.dim != H.dim:
        raise ValueError(f"grid has dimension {grid.dim}, Hamiltonian has {H.dim}")


def sample_legendrian(H, grid: Grid, spec: FlowSpec = DEFAULT_SPEC, jobs: int = 1) -> LegendrianSample:
    """Flow every ``(q0, 0, 0)`` to time 1; failing points are recorded, not raised."""
    _check_grid(H, grid)
    q0 = grid.points()
    points, errors = _flow_grid(H, q0, spec, jobs)
    idx = {tuple(q.tolist()): i for i, q in enumerate(q0)}
    return LegendrianSample(grid, q0, points, {idx[k]: v for k, v in errors.items()})


def front_of(sample: LegendrianSample) -> list:
    n = sample.q0.shape[1]
    return [(sample.points[i, :n].copy(), float(sample.points[i, 2 * n]))
            for i in np.nonzero(sample.ok)[0]]


def wave_front(H, grid: Grid, spec: FlowSpec = DEFAULT_SPEC, jobs: int = 1) -> list:
    """``(q, z)`` of the sampled Legendrian."""
    return front_of(sample_legendrian(H, grid, spec, jobs))


def fold_count(sample: LegendrianSample) -> int:
    """Number of direction reversals of ``q0 -> q`` along a one-dimensional sample.

    Two or more folds mean some ``q`` carries several front values.
    """
    if sample.q0.shape[1] != 1:
        raise ValueError("fold count is defined for one-dimensional bases")
    q = sample.points[sample.ok, 0]
    s = np.sign(np.diff(q))
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


@dataclass
class SpectrumRoot:
    q0: list
    point: ContactPoint
    degenerate: bool = False
    interval: tuple | None = None

    @property
    def value(self) -> float:
        return self.point.z


@dataclass
class SpectrumReport:
    roots: list
    tol: float

    @property
    def locations(self) -> list:
        return [r.q0 for r in self.roots]

    @property
    def degenerate_flags(self) -> list:
        return [r.degenerate for r in self.roots]

    def values(self, merge: float = 1e-9) -> list:
        """Sorted distinct critical values."""
        out = []
        for v in sorted(r.value for r in self.roots):
            if not out or abs(v - out[-1]) > merge * (1.0 + abs(v)):
                out.append(v)
        return out

    def multiplicities(self, merge: float = 1e-9) -> list:
        vals = self.values(merge)
        return [sum(1 for r in self.roots if abs(r.value - v) <= merge * (1.0 + abs(v))) for v in vals]

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "values": self.values(),
            "multiplicities": self.multiplicities(),
            "roots": [{"q0": r.q0, "q": r.point.q.tolist(), "z": r.point.z,
                       "p_residual": float(np.max(np.abs(r.point.p))),
                       "degenerate": r.degenerate,
                       "interval": list(r.interval) if r.interval else None} for r in self.roots],
        }


def _end(H, q0, spec):
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    Y = np.concatenate([q0, np.zeros(q0.shape[0] + 1)])
    Y1, _ = transport(H, Y, 0.0, 1.0, spec)
    return Y1[0]


def _spectrum_1d(H, sample: LegendrianSample, spec, tol) -> list:
    q0 = sample.q0[:, 0]
    pts = sample.points
    p = pts[:, 1]
    ok = sample.ok
    zero = ok & (np.abs(p) <= tol)

    def p_of(x):
        return _end(H, [x], spec)[1]

    def root_point(x):
        return ContactPoint.from_array(_end(H, [x], spec))

    roots = []
    i = 0
    G = q0.shape[0]
    while i < G:
        if zero[i]:
            j = i
            while j + 1 < G and zero[j + 1]:
                j += 1
            if j - i > 3:
                mid = (i + j) // 2
                roots.append(SpectrumRoot([float(q0[mid])], ContactPoint.from_array(pts[mid]), True,
                                          (float(q0[i]), float(q0[j]))))
            else:
                left, right = i - 1, j + 1
                if (left >= 0 and right < G and ok[left] and ok[right]
                        and np.sign(p[left]) != np.sign(p[right])):
                    x = brentq(p_of, q0[left], q0[right], xtol=1e-14, rtol=4 * np.finfo(float).eps)
                else:
                    k = i + int(np.argmin(np.abs(p[i:j + 1])))
                    x = q0[k]
                roots.append(SpectrumRoot([float(x)], root_point(x)))
            i = j + 1
            continue
        if (i + 1 < G and ok[i] and ok[i + 1] and not zero[i + 1]
                and np.sign(p[i]) != np.sign(p[i + 1])):
            x = brentq(p_of, q0[i], q0[i + 1], xtol=1e-14, rtol=4 * np.finfo(float).eps)
            roots.append(SpectrumRoot([float(x)], root_point(x)))
        i += 1
    for r in roots:
        if not r.degenerate and np.max(np.abs(r.point.p)) > tol:
            log.warning("root at q0=%s has |p| = %.3e above tolerance", r.q0, np.max(np.abs(r.point.p)))
    return roots


def _spectrum_newton(H, sample: LegendrianSample, spec, tol, max_iter=30) -> list:
    n = sample.q0.shape[1]
    lo = np.array(sample.grid.lo)
    hi = np.array(sample.grid.hi)
    p = sample.points[:, n:2 * n]
    seeds = sample.q0[sample.ok & (np.max(np.abs(p), axis=1) <= np.quantile(np.abs(p).max(axis=1), 0.05))]
    roots = []
    for x in seeds:
        x = x.copy()
        for _ in range(max_iter):
            y = _end(H, x, spec)
            if np.max(np.abs(y[n:2 * n])) <= tol:
                break
            h = 1e-6 * (1.0 + np.max(np.abs(x)))
            J = np.empty((n, n))
            for j in range(n):
                d = np.zeros(n)
                d[j] = h
                J[:, j] = (_end(H, x + d, spec)[n:2 * n] - _end(H, x - d, spec)[n:2 * n]) / (2 * h)
            try:
                x = x - np.linalg.solve(J, y[n:2 * n])
            except np.linalg.LinAlgError:
                break
        y = _end(H, x, spec)
        if np.max(np.abs(y[n:2 * n])) > tol or np.any(x < lo) or np.any(x > hi):
            continue
        if any(np.max(np.abs(np.array(r.q0) - x)) <= 1e-8 for r in roots):
            continue
        roots.append(SpectrumRoot(x.tolist(), ContactPoint.from_array(y)))
    roots.sort(key=lambda r: r.q0)
    return roots


def spectrum(H, grid: Grid, spec: FlowSpec = DEFAULT_SPEC, tol: float = 1e-10,
             jobs: int = 1, sample: LegendrianSample | None = None) -> SpectrumReport:
    """Critical values of the generating function, from the roots of ``q0 -> p_N^-(q0)``.

    One-dimensional bases use sign changes on the grid refined by Brent's
    method; runs of more than three grid cells with ``|p| <= tol`` are
    reported once, flagged degenerate. Higher dimensions use Newton's method
    from the grid points with the smallest ``|p|``.
    """
    _check_grid(H, grid)
    if sample is None:
        sample = sample_legendrian(H, grid, spec, jobs)
    if H.dim == 1:
        roots = _spectrum_1d(H, sample, spec, tol)
    else:
        roots = _spectrum_newton(H, sample, spec, tol)
    return SpectrumReport(roots, tol)


def zero_wall_crossings(H, grid: Grid, spec: FlowSpec = DEFAULT_SPEC, tol: float = 1e-10,
                        jobs: int = 1) -> list:
    """Points ``(q, 0, z)`` where the Legendrian meets ``{p = 0}``.

    Degenerate plateaus contribute every grid point they contain.
    """
    sample = sample_legendrian(H, grid, spec, jobs)
    report = spectrum(H, grid, spec, tol, sample=sample)
    n = H.dim
    out = []
    for r in report.roots:
        if r.degenerate and n == 1:
            a, b = r.interval
            inside = sample.ok & (sample.q0[:, 0] >= a) & (sample.q0[:, 0] <= b)
            for y in sample.points[inside]:
                out.append(ContactPoint(y[:n], np.zeros(n), y[2 * n]))
        else:
            out.append(ContactPoint(r.point.q, np.zeros(n), r.point.z))
    return out


def reconcile_with_genfun(H, report: SpectrumReport, part, c=None, spec: FlowSpec = DEFAULT_SPEC) -> float:
    """Largest disagreement between the flow-side spectrum and critical values of ``S``.

    At each non-degenerate root the fibre-critical point of ``S`` over ``q0``
    is solved for; its ``S`` value and ``p_N^-`` must match the flow.
    """
    from .genfun import CutoffParams, S_eval, critical_solve, iota_S

    c = CutoffParams() if c is None else c
    worst = 0.0
    for r in report.roots:
        if r.degenerate:
            continue
        sol = critical_solve(H, r.q0, part, c, spec)
        pt = iota_S(H, sol.e, part, c, spec, verify=False)
        S = S_eval(H, sol.e, part, c, spec)
        worst = max(worst, abs(S - r.value), float(np.max(np.abs(pt.p))),
                    float(np.max(np.abs(pt.q - r.point.q))))
    return worst
