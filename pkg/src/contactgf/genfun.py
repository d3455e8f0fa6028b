"""Finite-dimensional generating function from broken contact Hamiltonian trajectories.

A fibre point ``e = (q0, X, P)`` with ``X, P`` in ``(R^n)^{N-1}`` defines a
broken path on the uniform partition ``t_k = k/N``:

* ``gamma_1`` is the Hamiltonian trajectory from ``y_0^+ = (q0, 0, 0)`` over ``[0, 1/N]``;
* at each junction ``k = 1..N-1`` the endpoint ``y_k^-`` jumps to
  ``y_k^+ = (q_k^- + Xt_k, Pt_k, z_k^- + <Pt_k, Xt_k>)`` along a horizontal
  path (a fibre move in ``p`` followed by the lift of the straight line in ``q``);
* ``gamma_{k+1}`` then flows from ``y_k^+`` over ``[k/N, (k+1)/N]``.

``Xt = rho(|X|) X`` and ``Pt = P / rho(|X|)`` keep the jumps shorter than
``eps0`` while preserving ``<Xt, Pt> = <X, P>``. The generating function is

    S(e) = sum_k <P_k, X_k> + sum_k (z_k^- - z_{k-1}^+)  ( = z_N^- )

and its differential in the coordinates ``((q_k^-, pt_k)_{k<N}, q_N^-)`` is

    dS = sum_k e^{g_k} (<d pt_k, xt_k> - <y_k, d q_k^->) + <p_N^-, d q_N^->

with ``y_k = Pt_k - p_k^-`` and ``g_k`` the summed conformal exponents of the
later segments, so vertical critical points are exactly the unbroken
trajectories and ``S`` generates ``psi_H^1(zero section)``.

All heavy routines are vectorised over a stack of raw fibre vectors
``(q0, X.ravel(), P.ravel())``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .action import Path
from .contact import ContactPoint
from .flow import DEFAULT_SPEC, FlowSpec, Trajectory, integrate, jacobian_stack, transport
from .rng import keyed_generator

log = logging.getLogger(__name__)


class TelescopingError(AssertionError):
    pass


class CriticalSolveError(ArithmeticError):
    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class Partition:
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValueError("partition needs an integer N >= 2")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) / self.N

    def time(self, k: int) -> float:
        return k / self.N


@dataclass(frozen=True)
class CutoffParams:
    delta: float = 0.2
    eps0: float = 0.5

    def __post_init__(self):
        if not (0 < self.delta < self.eps0):
            raise ValueError("cutoff needs 0 < delta < eps0")


@dataclass(frozen=True)
class FiberPoint:
    q0: np.ndarray
    X: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        q0 = np.atleast_1d(np.asarray(self.q0, dtype=float))
        X = np.asarray(self.X, dtype=float)
        P = np.asarray(self.P, dtype=float)
        n = q0.shape[0]
        X = X.reshape(-1, n)
        P = P.reshape(-1, n)
        if X.shape != P.shape:
            raise ValueError("X and P must have the same shape")
        if not (np.all(np.isfinite(q0)) and np.all(np.isfinite(X)) and np.all(np.isfinite(P))):
            raise ValueError("fibre point must be finite")
        object.__setattr__(self, "q0", q0)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "P", P)

    @property
    def dim(self) -> int:
        return self.q0.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[0] + 1

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.q0, self.X.ravel(), self.P.ravel()])

    @classmethod
    def from_vector(cls, v, N: int, n: int) -> "FiberPoint":
        v = np.asarray(v, dtype=float)
        m = (N - 1) * n
        return cls(v[:n], v[n:n + m].reshape(N - 1, n), v[n + m:n + 2 * m].reshape(N - 1, n))

    @classmethod
    def zero(cls, q0, N: int) -> "FiberPoint":
        q0 = np.atleast_1d(np.asarray(q0, dtype=float))
        n = q0.shape[0]
        return cls(q0, np.zeros((N - 1, n)), np.zeros((N - 1, n)))


def _check_fiber(e: FiberPoint, part: Partition, H=None):
    if e.N != part.N:
        raise ValueError(f"fibre point has N={e.N}, partition has N={part.N}")
    if H is not None and e.dim != H.dim:
        raise ValueError(f"fibre point has dimension {e.dim}, Hamiltonian has {H.dim}")


# ---------------------------------------------------------------------------
# Cutoff


def shrunk_norm(r, c: CutoffParams):
    """``r * rho(r)``: identity up to ``delta``, then a tanh saturation below ``eps0``."""
    r = np.asarray(r, dtype=float)
    span = c.eps0 - c.delta
    return np.where(r <= c.delta, r, c.delta + span * np.tanh((r - c.delta) / span))


def _rho(r, c: CutoffParams):
    r = np.asarray(r, dtype=float)
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > c.delta, shrunk_norm(r, c) / safe, 1.0)


def rho(r: float, c: CutoffParams) -> float:
    if r < 0:
        raise ValueError("rho is defined for r >= 0")
    return float(_rho(r, c))


def tilde_vars(e: FiberPoint, c: CutoffParams):
    """``(Xt, Pt)`` with ``Xt_k = rho(|X_k|) X_k`` and ``Pt_k = P_k / rho(|X_k|)``."""
    r = np.linalg.norm(e.X, axis=1)
    w = _rho(r, c)[:, None]
    return w * e.X, e.P / w


# ---------------------------------------------------------------------------
# Batched construction


@dataclass
class _Broken:
    """Junction data for a stack of fibre vectors (leading axis = batch)."""

    X: np.ndarray        # (B, N-1, n)
    P: np.ndarray
    Xt: np.ndarray
    Pt: np.ndarray
    y_plus: np.ndarray   # (B, N, D): y_k^+ for k = 0..N-1
    y_minus: np.ndarray  # (B, N, D): y_k^- for k = 1..N
    g_seg: np.ndarray    # (B, N): exponent of the k-th segment map at y_{k-1}^+

    @property
    def n(self) -> int:
        return self.X.shape[2]

    @property
    def increments(self) -> np.ndarray:
        """``g_{k(k+1)}`` for ``k = 1..N-1``."""
        return self.g_seg[:, 1:]

    @property
    def cumulative(self) -> np.ndarray:
        """``g_k = sum_{j >= k} g_{j(j+1)}`` for ``k = 1..N-1``."""
        inc = self.increments
        return np.cumsum(inc[:, ::-1], axis=1)[:, ::-1]

    @property
    def z_N(self) -> np.ndarray:
        return self.y_minus[:, -1, 2 * self.n]

    def segment_increments(self) -> np.ndarray:
        """``z_k^- - z_{k-1}^+`` for ``k = 1..N``; their sum is ``A = S - Q``."""
        n = self.n
        return self.y_minus[:, :, 2 * n] - self.y_plus[:, :, 2 * n]

    def S_sum(self) -> np.ndarray:
        pairing = np.einsum("bki,bki->b", self.P, self.X)
        return pairing + self.segment_increments().sum(axis=1)

    def p_minus(self) -> np.ndarray:
        """``p_k^-`` for ``k = 1..N-1``."""
        n = self.n
        return self.y_minus[:, :-1, n:2 * n]

    def mixed(self) -> np.ndarray:
        """Coordinates ``(q_1^-, pt_1, ..., q_{N-1}^-, pt_{N-1}, q_N^-)``."""
        n = self.n
        B, Nm1 = self.X.shape[:2]
        q_minus = self.y_minus[:, :, :n]
        out = np.empty((B, (2 * Nm1 + 1) * n))
        pairs = np.stack([q_minus[:, :-1], self.Pt], axis=2)  # (B, N-1, 2, n)
        out[:, :2 * Nm1 * n] = pairs.reshape(B, -1)
        out[:, 2 * Nm1 * n:] = q_minus[:, -1]
        return out


def _unpack(V, N: int, n: int):
    V = np.asarray(V, dtype=float)
    m = (N - 1) * n
    B = V.shape[0]
    return V[:, :n], V[:, n:n + m].reshape(B, N - 1, n), V[:, n + m:n + 2 * m].reshape(B, N - 1, n)


def _build(H, V, N: int, c: CutoffParams, spec: FlowSpec) -> _Broken:
    n = H.dim
    V = np.array(V, dtype=float, ndmin=2)
    if V.shape[1] != (2 * N - 1) * n:
        raise ValueError(f"raw fibre vectors must have length {(2 * N - 1) * n}")
    q0, X, P = _unpack(V, N, n)
    B = V.shape[0]
    D = 2 * n + 1
    w = _rho(np.linalg.norm(X, axis=2), c)[..., None]
    Xt = w * X
    Pt = P / w
    pair = np.einsum("bki,bki->bk", Pt, Xt)

    y_plus = np.empty((B, N, D))
    y_minus = np.empty((B, N, D))
    g_seg = np.empty((B, N))
    y = np.zeros((B, D))
    y[:, :n] = q0
    for k in range(1, N + 1):
        y_plus[:, k - 1] = y
        y_end, g = transport(H, y, (k - 1) / N, k / N, spec)
        y_minus[:, k - 1] = y_end
        g_seg[:, k - 1] = g
        if k < N:
            y = y_end.copy()
            y[:, :n] += Xt[:, k - 1]
            y[:, n:2 * n] = Pt[:, k - 1]
            y[:, 2 * n] += pair[:, k - 1]
    built = _Broken(X, P, Xt, Pt, y_plus, y_minus, g_seg)
    _telescope(built)
    return built


_TELESCOPE = {"count": 0, "worst": 0.0}


def telescoping_stats() -> dict:
    """Number of ``S`` evaluations checked in this process and the worst relative gap."""
    return dict(_TELESCOPE)


def _telescope(built: _Broken) -> np.ndarray:
    """Return ``z_N^-`` after checking it against the summed form of ``S``."""
    S_sum = built.S_sum()
    zN = built.z_N
    n = built.n
    zs = np.concatenate([built.y_plus[:, :, 2 * n], built.y_minus[:, :, 2 * n]], axis=1)
    scale = np.maximum(1.0, np.max(np.abs(zs), axis=1))
    rel = np.abs(S_sum - zN) / scale
    _TELESCOPE["count"] += rel.shape[0]
    if rel.size:
        _TELESCOPE["worst"] = max(_TELESCOPE["worst"], float(rel.max()))
    if np.any(rel > 1e-12):
        raise TelescopingError(f"S != z_N^- (relative gap {rel.max():.3e})")
    return zN


def S_batch(H, V, part: Partition, c: CutoffParams = CutoffParams(),
            spec: FlowSpec = DEFAULT_SPEC) -> np.ndarray:
    """``S`` at each row of a stack of raw fibre vectors."""
    return _build(H, V, part.N, c, spec).z_N


# ---------------------------------------------------------------------------
# Single-point API


@dataclass(frozen=True)
class BrokenTrajectory:
    segments: list                 # Trajectory for k = 1..N
    y_minus: list                  # ContactPoint y_k^-, k = 1..N
    y_plus: list                   # ContactPoint y_k^+, k = 0..N-1 (y_0^+ on the zero section)
    jumps: list                    # Path (horizontal lift of c_k), k = 1..N-1
    fiber_moves: list              # (p_k^-, Pt_k): vertical move preceding each jump
    Xt: np.ndarray
    Pt: np.ndarray
    increments: np.ndarray         # g_{k(k+1)}, k = 1..N-1
    cumulative: np.ndarray         # g_k, k = 1..N-1

    def junction_gaps(self) -> np.ndarray:
        """``|y_k^+ - y_k^-|`` for ``k = 1..N-1``."""
        return np.array([np.linalg.norm(a.as_array() - b.as_array())
                         for a, b in zip(self.y_plus[1:], self.y_minus[:-1])])


def _jump_path(y_minus: np.ndarray, xt: np.ndarray, pt: np.ndarray, samples: int = 16) -> Path:
    n = xt.shape[0]
    s = np.linspace(0.0, 1.0, samples + 1)
    Y = np.empty((samples + 1, 2 * n + 1))
    Y[:, :n] = y_minus[:n] + s[:, None] * xt
    Y[:, n:2 * n] = pt
    Y[:, 2 * n] = y_minus[2 * n] + s * float(np.dot(pt, xt))
    return Path(s, Y)


def build_broken_trajectory(H, e: FiberPoint, part: Partition, c: CutoffParams = CutoffParams(),
                            spec: FlowSpec = DEFAULT_SPEC) -> BrokenTrajectory:
    _check_fiber(e, part, H)
    N = part.N
    n = H.dim
    built = _build(H, e.to_vector()[None, :], N, c, spec)
    segments = []
    for k in range(1, N + 1):
        y0 = ContactPoint.from_array(built.y_plus[0, k - 1])
        segments.append(integrate(H, y0, part.time(k - 1), part.time(k), spec))
    jumps = []
    moves = []
    for k in range(1, N):
        ym = built.y_minus[0, k - 1]
        jumps.append(_jump_path(ym, built.Xt[0, k - 1], built.Pt[0, k - 1]))
        moves.append((ym[n:2 * n].copy(), built.Pt[0, k - 1].copy()))
    return BrokenTrajectory(
        segments=segments,
        y_minus=[ContactPoint.from_array(y) for y in built.y_minus[0]],
        y_plus=[ContactPoint.from_array(y) for y in built.y_plus[0]],
        jumps=jumps,
        fiber_moves=moves,
        Xt=built.Xt[0],
        Pt=built.Pt[0],
        increments=built.increments[0],
        cumulative=built.cumulative[0],
    )


def S_eval(H, e: FiberPoint, part: Partition, c: CutoffParams = CutoffParams(),
           spec: FlowSpec = DEFAULT_SPEC) -> float:
    _check_fiber(e, part, H)
    return float(S_batch(H, e.to_vector()[None, :], part, c, spec)[0])


@dataclass(frozen=True)
class VerticalGradient:
    d_ptilde: np.ndarray   # dS/d pt_k = e^{g_k} xt_k
    d_qminus: np.ndarray   # dS/d q_k^- = -e^{g_k} y_k
    d_qN: np.ndarray       # dS/d q_N^- = p_N^-
    weights: np.ndarray    # e^{g_k}

    def mixed_vector(self) -> np.ndarray:
        """Components ordered like the mixed coordinates ``(q_1^-, pt_1, ..., q_N^-)``."""
        pairs = np.stack([self.d_qminus, self.d_ptilde], axis=1)
        return np.concatenate([pairs.ravel(), self.d_qN])


def _vertical_gradient(built: _Broken, i: int = 0) -> VerticalGradient:
    n = built.n
    weights = np.exp(built.cumulative[i])
    y = built.Pt[i] - built.p_minus()[i]
    return VerticalGradient(
        d_ptilde=weights[:, None] * built.Xt[i],
        d_qminus=-weights[:, None] * y,
        d_qN=built.y_minus[i, -1, n:2 * n].copy(),
        weights=weights,
    )


def vertical_gradient_analytic(H, e: FiberPoint, part: Partition, c: CutoffParams = CutoffParams(),
                               spec: FlowSpec = DEFAULT_SPEC) -> VerticalGradient:
    _check_fiber(e, part, H)
    return _vertical_gradient(_build(H, e.to_vector()[None, :], part.N, c, spec))


def _central_stack(v: np.ndarray, h: float, columns=None) -> np.ndarray:
    """Rows ``v + h e_j`` then ``v - h e_j`` for the selected columns."""
    cols = np.arange(v.shape[0]) if columns is None else np.asarray(columns)
    E = np.zeros((cols.shape[0], v.shape[0]))
    E[np.arange(cols.shape[0]), cols] = h
    return np.concatenate([v + E, v - E], axis=0)


def default_gradient_step(e: FiberPoint) -> float:
    return 1e-5 * (1.0 + float(np.max(np.abs(e.to_vector()))))


def gradient_fd(H, e: FiberPoint, part: Partition, c: CutoffParams = CutoffParams(),
                spec: FlowSpec = DEFAULT_SPEC, h: Optional[float] = None) -> np.ndarray:
    """Central differences of ``S`` in the raw coordinates ``(q0, X, P)``."""
    _check_fiber(e, part, H)
    v = e.to_vector()
    h = default_gradient_step(e) if h is None else h
    if not h > 0:
        raise ValueError("h must be positive")
    S = S_batch(H, _central_stack(v, h), part, c, spec)
    d = v.shape[0]
    return (S[:d] - S[d:]) / (2.0 * h)


@dataclass(frozen=True)
class CoordinateJacobian:
    matrix: np.ndarray
    det: float
    cond: float
    structure_violation: float


def _stages(N: int, n: int):
    """Stage index of each raw column and each mixed row (see ``coordinate_jacobian``)."""
    k = np.arange(1, N)
    cols = np.concatenate([np.zeros(n, int), np.repeat(k, n), np.repeat(k, n)])
    rows = np.concatenate([np.stack([np.repeat(k - 1, n).reshape(-1, n),
                                     np.repeat(k, n).reshape(-1, n)], axis=1).ravel(),
                           np.full(n, N - 1)])
    return rows, cols


def coordinate_jacobian(H, e: FiberPoint, part: Partition, c: CutoffParams = CutoffParams(),
                        spec: FlowSpec = DEFAULT_SPEC, h: Optional[float] = None) -> CoordinateJacobian:
    """Jacobian of ``(q0, X, P) -> ((q_k^-, pt_k)_{k<N}, q_N^-)``.

    Assign stage 0 to ``q0`` and stage ``k`` to ``(X_k, P_k)``; the mixed
    coordinate ``q_k^-`` only sees stages ``< k`` and ``pt_k`` only stage ``k``.
    The Jacobian is therefore block triangular in stage order.
    ``structure_violation`` is the largest entry above the stage diagonal
    relative to the largest entry of the diagonal stage blocks.
    """
    _check_fiber(e, part, H)
    v = e.to_vector()
    h = 1e-6 * (1.0 + float(np.max(np.abs(v)))) if h is None else h
    d = v.shape[0]
    built = _build(H, _central_stack(v, h), part.N, c, spec)
    M = built.mixed()
    J = ((M[:d] - M[d:]) / (2.0 * h)).T
    rows, cols = _stages(part.N, H.dim)
    upper = cols[None, :] > rows[:, None]
    diag = cols[None, :] == rows[:, None]
    scale = np.max(np.abs(J[diag]))
    violation = float(np.max(np.abs(J[upper])) / scale) if upper.any() else 0.0
    return CoordinateJacobian(J, float(np.linalg.det(J)), float(np.linalg.cond(J)), violation)


def chain_rule_gradient(H, e: FiberPoint, part: Partition, c: CutoffParams = CutoffParams(),
                        spec: FlowSpec = DEFAULT_SPEC, h: Optional[float] = None) -> np.ndarray:
    """Raw-coordinate gradient assembled from the analytic mixed-coordinate differential."""
    grad = vertical_gradient_analytic(H, e, part, c, spec).mixed_vector()
    return coordinate_jacobian(H, e, part, c, spec, h).matrix.T @ grad


def Dk_matrix(H, e: FiberPoint, part: Partition, k: int, spec: FlowSpec = DEFAULT_SPEC,
              h: Optional[float] = None, c: CutoffParams = CutoffParams()) -> np.ndarray:
    """``D^k = D_1(q o psi_{H;k+1}) + d_3(q o psi_{H;k+1}) <pt_k, .>`` at ``y_k^+`` (flat base)."""
    _check_fiber(e, part, H)
    N = part.N
    if not 1 <= k <= N - 1:
        raise ValueError("k must satisfy 1 <= k <= N-1")
    n = H.dim
    built = _build(H, e.to_vector()[None, :], N, c, spec)
    y = built.y_plus[0, k]
    J = jacobian_stack(H, y[None, :], part.time(k), part.time(k + 1), spec, h)[0]
    return J[:n, :n] + np.outer(J[:n, 2 * n], built.Pt[0, k - 1])


# ---------------------------------------------------------------------------
# Critical points


RESIDUAL_FORMS = ("residual", "weighted", "unweighted")


def _fiber_residual(built: _Broken, form: str) -> np.ndarray:
    B = built.X.shape[0]
    jump = built.Pt - built.p_minus()
    if form == "residual":
        return np.concatenate([built.X.reshape(B, -1), jump.reshape(B, -1)], axis=1)
    weights = np.exp(built.cumulative)[..., None] if form == "weighted" else 1.0
    return np.concatenate([(weights * built.Xt).reshape(B, -1),
                           (-weights * jump).reshape(B, -1)], axis=1)


@dataclass
class CriticalBatch:
    V: np.ndarray            # raw fibre vectors (B, dimE)
    iterations: np.ndarray
    residual: np.ndarray
    converged: np.ndarray


def critical_solve_batch(H, q0s, part: Partition, c: CutoffParams = CutoffParams(),
                         spec: FlowSpec = DEFAULT_SPEC, start=None, form: str = "residual",
                         tol: float = 1e-10, max_iter: int = 50, h: float = 1e-6) -> CriticalBatch:
    """Newton's method on the fibre equations for many base points at once.

    ``q0`` is held fixed; the unknowns are ``(X, P)``. The Jacobian is a dense
    central-difference matrix. Points are frozen as soon as they converge, so
    each point's iterates do not depend on the rest of the batch.
    """
    if form not in RESIDUAL_FORMS:
        raise ValueError(f"form must be one of {RESIDUAL_FORMS}")
    N = part.N
    n = H.dim
    q0s = np.array(q0s, dtype=float, ndmin=2).reshape(-1, n)
    G = q0s.shape[0]
    M = 2 * (N - 1) * n
    if start is None:
        fib = np.zeros((G, M))
    else:
        fib = np.array(start, dtype=float).reshape(G, M)
    iterations = np.zeros(G, int)
    residual = np.full(G, np.inf)
    converged = np.zeros(G, bool)
    active = np.arange(G)
    cols = np.arange(n, n + M)
    for it in range(max_iter + 1):
        if active.size == 0:
            break
        V = np.concatenate([q0s[active], fib[active]], axis=1)
        last = it == max_iter
        rows = [V] if last else [V] + [_central_stack(v, h, cols) for v in V]
        built = _build(H, np.concatenate(rows, axis=0) if not last else V, N, c, spec)
        F_all = _fiber_residual(built, form)
        A = active.size
        F = F_all[:A]
        norm = np.max(np.abs(F), axis=1)
        residual[active] = norm
        done = norm <= tol
        converged[active[done]] = True
        if last:
            break
        stencil = F_all[A:].reshape(A, 2, M, M)  # [point, sign, column, residual]
        J = np.transpose((stencil[:, 0] - stencil[:, 1]) / (2.0 * h), (0, 2, 1))
        todo = ~done
        if todo.any():
            step = np.linalg.solve(J[todo], -F[todo][..., None])[..., 0]
            idx = active[todo]
            fib[idx] += step
            iterations[idx] += 1
        active = active[todo]
    V = np.concatenate([q0s, fib], axis=1)
    return CriticalBatch(V, iterations, residual, converged)


@dataclass(frozen=True)
class CriticalSolution:
    e: FiberPoint
    iterations: int
    residual: float


def critical_solve(H, q0, part: Partition, c: CutoffParams = CutoffParams(),
                   spec: FlowSpec = DEFAULT_SPEC, start: Optional[FiberPoint] = None,
                   form: str = "residual", tol: float = 1e-10,
                   max_iter: int = 50) -> CriticalSolution:
    """Solve ``X_k = 0``, ``Pt_k = p_k^-`` for fixed ``q0``."""
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    if q0.shape != (H.dim,) or not np.all(np.isfinite(q0)):
        raise ValueError("q0 must be a finite vector of the Hamiltonian's dimension")
    init = None
    if start is not None:
        _check_fiber(start, part, H)
        init = start.to_vector()[H.dim:][None, :]
    out = critical_solve_batch(H, q0[None, :], part, c, spec, init, form, tol, max_iter)
    e = FiberPoint.from_vector(out.V[0], part.N, H.dim)
    if not out.converged[0]:
        raise CriticalSolveError("Newton iteration did not converge", float(out.residual[0]),
                                 int(out.iterations[0]))
    return CriticalSolution(e, int(out.iterations[0]), float(out.residual[0]))


def criticality_residual(H, e: FiberPoint, part: Partition, c: CutoffParams = CutoffParams(),
                         spec: FlowSpec = DEFAULT_SPEC) -> float:
    built = _build(H, e.to_vector()[None, :], part.N, c, spec)
    return float(np.max(np.abs(_fiber_residual(built, "residual"))))


def _base_derivative_check(H, q0s, part, c, spec, h=1e-5):
    """Estimate ``dS/dq_N^-`` along the critical section by moving ``q0``.

    Returns the estimated momenta, shape ``(G, n)``.
    """
    n = H.dim
    q0s = np.array(q0s, dtype=float, ndmin=2)
    G = q0s.shape[0]
    shifted = np.concatenate([q0s[:, None, :] + h * np.eye(n)[None], q0s[:, None, :] - h * np.eye(n)[None]],
                             axis=1).reshape(G * 2 * n, n)
    sol = critical_solve_batch(H, shifted, part, c, spec)
    if not sol.converged.all():
        raise CriticalSolveError("base-direction solve failed", float(sol.residual.max()),
                                 int(sol.iterations.max()))
    built = _build(H, sol.V, part.N, c, spec)
    S = built.z_N.reshape(G, 2, n)
    qN = built.y_minus[:, -1, :n].reshape(G, 2, n, n)
    dS = (S[:, 0] - S[:, 1]) / (2 * h)                        # (G, n) d/dq0_j
    dq = np.transpose(qN[:, 0] - qN[:, 1], (0, 2, 1)) / (2 * h)  # (G, i, j) = dqN_i/dq0_j
    return np.linalg.solve(np.transpose(dq, (0, 2, 1)), dS[..., None])[..., 0]


def iota_S(H, e_star: FiberPoint, part: Partition, c: CutoffParams = CutoffParams(),
           spec: FlowSpec = DEFAULT_SPEC, verify: bool = True, tol: float = 1e-4) -> ContactPoint:
    """``(q_N^-, dS/dq_N^-, S)`` at a fibre-critical point, i.e. the point of ``psi_H^1(o)`` it generates."""
    _check_fiber(e_star, part, H)
    n = H.dim
    built = _build(H, e_star.to_vector()[None, :], part.N, c, spec)
    res = float(np.max(np.abs(_fiber_residual(built, "residual"))))
    if res > 1e-8:
        raise PreconditionError(f"fibre point is not critical (residual {res:.3e})")
    S = built.z_N[0]
    y = built.y_minus[0, -1]
    point = ContactPoint(y[:n], y[n:2 * n], S)
    if verify:
        p_est = _base_derivative_check(H, e_star.q0[None, :], part, c, spec)[0]
        gap = float(np.max(np.abs(p_est - point.p)))
        if gap > tol:
            raise PreconditionError(f"dS/dq_N^- differs from p_N^- by {gap:.3e}")
    return point


# ---------------------------------------------------------------------------
# Batch checks


@dataclass
class GenerationReport:
    max_gap: float
    points: list = field(default_factory=list)
    failures: int = 0


def _generation_rows(H, grid, part, c, spec, verify):
    grid = np.array(grid, dtype=float, ndmin=2).reshape(-1, H.dim)
    n = H.dim
    sol = critical_solve_batch(H, grid, part, c, spec)
    built = _build(H, sol.V, part.N, c, spec)
    S = built.z_N
    direct, _ = transport(H, np.concatenate([grid, np.zeros((grid.shape[0], n + 1))], axis=1),
                          0.0, 1.0, spec)
    p_est = _base_derivative_check(H, grid, part, c, spec) if verify else None
    rows = []
    for i in range(grid.shape[0]):
        row = {"q0": grid[i].tolist(), "iterations": int(sol.iterations[i]),
               "residual": float(sol.residual[i])}
        if not sol.converged[i]:
            row["error"] = "critical solve did not converge"
            rows.append(row)
            continue
        y = built.y_minus[i, -1]
        gen = np.concatenate([y[:2 * n], [S[i]]])
        row["generated"] = gen.tolist()
        row["direct"] = direct[i].tolist()
        row["gap"] = float(np.linalg.norm(gen - direct[i]))
        if p_est is not None:
            row["base_derivative_gap"] = float(np.max(np.abs(p_est[i] - y[n:2 * n])))
        rows.append(row)
    return rows


def generation_check(H, q0_grid, part: Partition, c: CutoffParams = CutoffParams(),
                     spec: FlowSpec = DEFAULT_SPEC, verify: bool = False,
                     jobs: int = 1) -> GenerationReport:
    """Compare the points generated by ``S`` with ``psi_H^1(q0, 0, 0)`` over a grid."""
    from .parallel import map_chunks

    grid = np.array(q0_grid, dtype=float, ndmin=2).reshape(-1, H.dim)
    if grid.shape[0] == 0:
        raise ValueError("empty grid")

    def fallback(chunk):
        rows = []
        for q in chunk:
            try:
                rows.extend(_generation_rows(H, q[None, :], part, c, spec, verify))
            except (ArithmeticError, AssertionError, ValueError) as exc:
                rows.append({"q0": q.tolist(), "error": f"{type(exc).__name__}: {exc}"})
        return rows

    rows = map_chunks(_generation_chunk, grid, jobs, args=(H, part, c, spec, verify),
                      fallback=fallback)
    gaps = [r["gap"] for r in rows if "gap" in r]
    failures = sum(1 for r in rows if "error" in r)
    return GenerationReport(max(gaps) if gaps else float("nan"), rows, failures)


def _generation_chunk(chunk, H, part, c, spec, verify):
    return _generation_rows(H, chunk, part, c, spec, verify)


@dataclass
class QIProbeReport:
    radii: list
    sup_A: list
    sup_Q: list
    bounded: bool
    ratio: float
    control_ratio: float


def almost_qi_probe(H, q0, part: Partition, c: CutoffParams = CutoffParams(),
                    spec: FlowSpec = DEFAULT_SPEC, rays: int = 32, radii=(1.0, 10.0, 100.0),
                    seed: int = 0, floor: float = 1e-8) -> QIProbeReport:
    """Sup-norm of the fibre gradient of ``A = S - Q`` along random rays.

    ``Q = sum <P_k, X_k>``. The same probe applied to ``Q`` is reported as a
    negative control (its fibre gradient grows linearly with the radius).
    ``bounded`` compares the largest radius with the median radius:
    ``sup(r_max) <= 2 sup(r_med) + floor``.
    """
    radii = [float(r) for r in radii]
    if sorted(radii) != radii or len(set(radii)) != len(radii):
        raise ValueError("radii must be strictly increasing")
    if radii[-1] < 100:
        raise ValueError("largest radius must be at least 100")
    N = part.N
    n = H.dim
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    M = 2 * (N - 1) * n
    dirs = np.empty((rays, M))
    for i in range(rays):
        u = keyed_generator(seed, "almost_qi_probe", i).standard_normal(M)
        dirs[i] = u / np.linalg.norm(u)

    cols = np.arange(n, n + M)
    stacks = []
    steps = []
    for r in radii:
        for u in dirs:
            v = np.concatenate([q0, r * u])
            h = 1e-5 * (1.0 + float(np.max(np.abs(v))))
            stacks.append(_central_stack(v, h, cols))
            steps.append(h)
    V = np.concatenate(stacks, axis=0)
    built = _build(H, V, N, c, spec)
    A = built.segment_increments().sum(axis=1)
    Q = np.einsum("bki,bki->b", built.P, built.X)
    h = np.array(steps)[:, None]

    def sups(values):
        diffs = values.reshape(len(radii) * rays, 2, M)
        grad = np.abs(diffs[:, 0] - diffs[:, 1]) / (2 * h)
        per_ray = grad.max(axis=1).reshape(len(radii), rays)
        return per_ray.max(axis=1).tolist()

    sup_A = sups(A)
    sup_Q = sups(Q)
    med = len(radii) // 2
    ratio = sup_A[-1] / sup_A[med] if sup_A[med] > 0 else (0.0 if sup_A[-1] == 0 else float("inf"))
    bounded = sup_A[-1] <= 2.0 * sup_A[med] + floor
    control_ratio = sup_Q[-1] / sup_Q[med]
    return QIProbeReport(radii, sup_A, sup_Q, bool(bounded), float(ratio), float(control_ratio))


@dataclass
class ReductionReport:
    max_increment: float
    max_Hz: float
    max_action_gap: float
    points: list


def symplectic_reduction_check(H, q0_grid, part: Partition, c: CutoffParams = CutoffParams(),
                               spec: FlowSpec = DEFAULT_SPEC, samples: int = 2000,
                               tol: float = 1e-6) -> ReductionReport:
    """For ``z``-independent ``H``: exponents vanish and ``S`` equals the classical action.

    ``H_z`` is checked (``<= 1e-12``) at every state the construction visits.
    """
    from .action import classical_action

    n = H.dim
    grid = np.array(q0_grid, dtype=float, ndmin=2).reshape(-1, n)
    sol = critical_solve_batch(H, grid, part, c, spec)
    if not sol.converged.all():
        raise CriticalSolveError("critical solve failed", float(sol.residual.max()),
                                 int(sol.iterations.max()))
    built = _build(H, sol.V, part.N, c, spec)
    S = built.z_N
    visited = np.concatenate([built.y_plus.reshape(-1, 2 * n + 1), built.y_minus.reshape(-1, 2 * n + 1)])
    times = np.concatenate([np.tile(part.times[:-1], grid.shape[0]), np.tile(part.times[1:], grid.shape[0])])
    _, grad = H.jet(times, visited)
    max_Hz = float(np.max(np.abs(grad[:, 2 * n])))
    if max_Hz > 1e-12:
        raise PreconditionError(f"H depends on z (|H_z| up to {max_Hz:.3e})")
    max_inc = float(np.max(np.abs(built.increments)))
    if max_inc != 0.0:
        raise AssertionError(f"conformal increments do not vanish ({max_inc:.3e})")

    t = np.linspace(0.0, 1.0, samples + 1)
    points = []
    worst = 0.0
    for i, q in enumerate(grid):
        start = np.concatenate([q, np.zeros(n + 1)])
        traj, _ = transport(H, np.repeat(start[None], samples + 1, axis=0), 0.0, t, spec)
        classical = classical_action(H, Path(t, traj[:, :2 * n]))
        gap = abs(classical - S[i])
        worst = max(worst, gap)
        points.append({"q0": q.tolist(), "S": float(S[i]), "classical_action": float(classical),
                       "gap": float(gap)})
    if worst > tol:
        log.warning("classical action gap %.3e exceeds %.1e", worst, tol)
    return ReductionReport(max_inc, max_Hz, worst, points)
