"""Fixed-step RK4 integration of contact Hamilton's equations.

The state is co-integrated with the conformal exponent ``g`` of the flow,
``dg/dt = -H_z(t, y(t))``, ``g(t0) = 0``, so that ``psi_t^* lambda = e^{g_t} lambda``.

Naming of the time-dependent maps:

* ``psi_t``: evolution from time 0 to time ``t``.
* ``phi_t = psi_t o psi_1^{-1}``: evolution from time 1 to time ``t``.
* ``phi_t^{-1} = psi_1 o psi_t^{-1}``: evolution from time ``t`` to time 1.

The last two are integrated directly between the two times rather than through
time 0; for the evolution operator ``E(s -> t)`` the composition rules
``g_{a o b} = g_a o b + g_b`` and ``g_{a^{-1}} = -g_a o a^{-1}`` give
``g_{E(s->t)}(y) = int_s^t -H_z(u, E(s->u) y) du``, which is exactly what the
co-integrated exponent accumulates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .contact import ContactPoint, TangentVector, contact_field, lambda_array


class FlowError(ArithmeticError):
    """Integration produced a non-finite state."""

    def __init__(self, message: str, last_time: float):
        self.last_time = last_time
        super().__init__(f"{message} (last valid time {last_time:.6g})")


@dataclass(frozen=True)
class FlowSpec:
    steps_per_unit_time: int = 200
    method: str = "rk4"

    def __post_init__(self):
        if int(self.steps_per_unit_time) != self.steps_per_unit_time or self.steps_per_unit_time < 10:
            raise ValueError("steps_per_unit_time must be an integer >= 10")
        if self.method != "rk4":
            raise ValueError("only the 'rk4' method is available")

    def steps_for(self, duration):
        """Number of RK4 steps used for an interval of the given length."""
        d = np.abs(np.asarray(duration, dtype=float)) * self.steps_per_unit_time
        return np.ceil(d - 1e-9).astype(int)


DEFAULT_SPEC = FlowSpec()


@dataclass(frozen=True)
class Trajectory:
    """Sampled flow segment; ``y`` has one row ``[q, p, z]`` per sample time."""

    t: np.ndarray
    y: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        if not (len(self.t) == len(self.y) == len(self.g) >= 2):
            raise ValueError("trajectory needs at least two samples of matching length")

    def point(self, i: int) -> ContactPoint:
        return ContactPoint.from_array(self.y[i])

    @property
    def end(self) -> ContactPoint:
        return self.point(-1)


def _augmented_rhs(H, t, Y):
    X, Hz = contact_field(H, t, Y)
    return X, -Hz


def transport(H, Y0, t0, t1, spec: FlowSpec = DEFAULT_SPEC, record: bool = False):
    """Integrate a stack of states from ``t0`` to ``t1`` (both scalars or per-row).

    Each row takes ``ceil(|t1 - t0| * steps_per_unit_time)`` equal steps, so a
    row's result never depends on the other rows in the batch.

    Returns ``(Y1, g1)``; with ``record=True`` also the per-step history
    ``(times, states, exponents)`` (only meaningful when all rows share times).
    """
    Y = np.array(Y0, dtype=float, ndmin=2)
    B = Y.shape[0]
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (B,)).copy()
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (B,)).copy()
    if not np.all(np.isfinite(Y)):
        raise FlowError("non-finite initial state", float(t0.min()) if B else 0.0)
    nsteps = spec.steps_for(t1 - t0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(nsteps > 0, (t1 - t0) / np.maximum(nsteps, 1), 0.0)
    g = np.zeros(B)
    history = None
    if record:
        history = ([t0.copy()], [Y.copy()], [g.copy()])

    total = int(nsteps.max()) if B else 0
    for j in range(total):
        active = nsteps > j
        if active.all():
            idx = slice(None)
        else:
            idx = np.nonzero(active)[0]
        y = Y[idx]
        dt = h[idx]
        t = t0[idx] + j * dt
        half = 0.5 * dt
        # overflow is caught below as a non-finite state
        with np.errstate(over="ignore", invalid="ignore"):
            k1, l1 = _augmented_rhs(H, t, y)
            k2, l2 = _augmented_rhs(H, t + half, y + half[:, None] * k1)
            k3, l3 = _augmented_rhs(H, t + half, y + half[:, None] * k2)
            k4, l4 = _augmented_rhs(H, t + dt, y + dt[:, None] * k3)
            y_new = y + (dt / 6.0)[:, None] * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            g_new = g[idx] + dt / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
        if not (np.all(np.isfinite(y_new)) and np.all(np.isfinite(g_new))):
            bad = ~np.all(np.isfinite(y_new), axis=1) | ~np.isfinite(g_new)
            raise FlowError("integration blew up", float(np.min(t[bad])))
        Y[idx] = y_new
        g[idx] = g_new
        if record:
            history[0].append(t0 + (j + 1) * h)
            history[1].append(Y.copy())
            history[2].append(g.copy())
    if record:
        return Y, g, history
    return Y, g


def integrate(H, y0: ContactPoint, t0: float, t1: float, spec: FlowSpec = DEFAULT_SPEC) -> Trajectory:
    """Solve ``dy/dt = X_H(t, y)`` from ``(t0, y0)`` to ``t1`` and keep every RK4 sample."""
    if t0 == t1:
        raise ValueError("t0 and t1 must differ")
    _, _, (ts, ys, gs) = transport(H, y0.as_array()[None, :], t0, t1, spec, record=True)
    return Trajectory(np.array([t[0] for t in ts]), np.array([y[0] for y in ys]),
                      np.array([g[0] for g in gs]))


def psi(H, t: float, y: ContactPoint, spec: FlowSpec = DEFAULT_SPEC):
    """``(psi_H^t(y), g_{psi_H^t}(y))``."""
    Y, g = transport(H, y.as_array(), 0.0, t, spec)
    return ContactPoint.from_array(Y[0]), float(g[0])


def phi(H, t: float, y: ContactPoint, spec: FlowSpec = DEFAULT_SPEC) -> ContactPoint:
    """``phi_H^t(y) = psi_H^t (psi_H^1)^{-1}(y)``: evolve from time 1 back to ``t``."""
    Y, _ = transport(H, y.as_array(), 1.0, t, spec)
    return ContactPoint.from_array(Y[0])


def phi_inverse(H, t: float, y: ContactPoint, spec: FlowSpec = DEFAULT_SPEC) -> ContactPoint:
    """``(phi_H^t)^{-1}(y) = psi_H^1 (psi_H^t)^{-1}(y)``: evolve from time ``t`` to 1."""
    Y, _ = transport(H, y.as_array(), t, 1.0, spec)
    return ContactPoint.from_array(Y[0])


_MAP_TIMES = {
    "psi_t": lambda t: (0.0, t),
    "phi_t": lambda t: (1.0, t),
    "phi_t_inverse": lambda t: (t, 1.0),
}


def conformal_exponent(H, map_tag: str, t: float, y: ContactPoint,
                       spec: FlowSpec = DEFAULT_SPEC) -> float:
    if map_tag not in _MAP_TIMES:
        raise ValueError(f"unknown map {map_tag!r}; expected one of {sorted(_MAP_TIMES)}")
    s0, s1 = _MAP_TIMES[map_tag](t)
    _, g = transport(H, y.as_array(), s0, s1, spec)
    return float(g[0])


def default_fd_step(y) -> float:
    return 1e-6 * (1.0 + float(np.linalg.norm(y)))


def jacobian_stack(H, Y, t0, t1, spec: FlowSpec = DEFAULT_SPEC, h=None):
    """Central-difference Jacobians of the flow map for a stack of base points.

    ``Y`` has shape ``(B, D)``; returns ``(B, D, D)`` with ``J[b, :, j]`` the
    derivative along the j-th coordinate. ``t0``/``t1`` may be per-row.
    """
    Y = np.array(Y, dtype=float, ndmin=2)
    B, D = Y.shape
    if h is None:
        h = 1e-6 * (1.0 + np.linalg.norm(Y, axis=1))
    h = np.broadcast_to(np.asarray(h, dtype=float), (B,))
    eye = np.eye(D)
    plus = Y[:, None, :] + h[:, None, None] * eye[None]
    minus = Y[:, None, :] - h[:, None, None] * eye[None]
    stack = np.concatenate([plus, minus], axis=1).reshape(B * 2 * D, D)
    rep = lambda a: np.repeat(np.broadcast_to(np.asarray(a, dtype=float), (B,)), 2 * D)
    out, _ = transport(H, stack, rep(t0), rep(t1), spec)
    out = out.reshape(B, 2, D, D)
    J = (out[:, 0] - out[:, 1]) / (2.0 * h[:, None, None])
    return np.transpose(J, (0, 2, 1))


def linearized_flow(H, y0: ContactPoint, t0: float, t1: float,
                    spec: FlowSpec = DEFAULT_SPEC, h: float | None = None) -> np.ndarray:
    """Finite-difference Jacobian of ``y -> E(t0 -> t1) y`` at ``y0``; columns ordered ``(q, p, z)``."""
    arr = y0.as_array()
    if h is None:
        h = default_fd_step(arr)
    if not h > 0:
        raise ValueError("h must be positive")
    return jacobian_stack(H, arr[None, :], t0, t1, spec, h)[0]


def conformal_identity_check(H, t: float, y: ContactPoint, v: TangentVector,
                             spec: FlowSpec = DEFAULT_SPEC, h: float | None = None) -> float:
    """``| lambda_{psi_t y}(d psi_t v) - e^{g_t(y)} lambda_y(v) |``."""
    end, g = psi(H, t, y, spec)
    J = linearized_flow(H, y, 0.0, t, spec, h)
    pushed = J @ v.as_array()
    lhs = lambda_array(end.as_array(), pushed)
    rhs = math.exp(g) * lambda_array(y.as_array(), v.as_array())
    return float(abs(lhs - rhs))
