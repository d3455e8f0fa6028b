"""Action functionals on sampled paths in ``J^1 R^n``.

Paths are sampled at ``m + 1`` uniform times on ``[0, 1]``; velocities are
estimated by centred differences (one-sided at the ends) and
integrals use the composite trapezoid rule, so everything is second order in
``1/m``.

``A_0(g) = int g^* lambda``, and the perturbed action weights the integrand
``lambda(g') + H`` by ``exp(g_{(phi_H^t)^{-1}}(g(t)))``, the conformal exponent
of the evolution from time ``t`` to time 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .contact import contact_field, dlambda_array, lambda_array
from .flow import DEFAULT_SPEC, FlowSpec, jacobian_stack, transport


@dataclass(frozen=True)
class Path:
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if t.ndim != 1 or y.ndim != 2 or y.shape[0] != t.shape[0]:
            raise ValueError("path needs t of shape (m+1,) and y of shape (m+1, D)")
        if t.shape[0] < 9:
            raise ValueError("path needs at least 9 samples (m >= 8)")
        steps = np.diff(t)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12) or steps[0] <= 0:
            raise ValueError("path samples must be uniform and increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    @classmethod
    def uniform(cls, y) -> "Path":
        y = np.asarray(y, dtype=float)
        return cls(np.linspace(0.0, 1.0, y.shape[0]), y)

    @classmethod
    def from_function(cls, f, m: int) -> "Path":
        t = np.linspace(0.0, 1.0, m + 1)
        return cls(t, np.array([f(s) for s in t], dtype=float))

    @property
    def m(self) -> int:
        return self.t.shape[0] - 1

    def velocity(self) -> np.ndarray:
        return np.gradient(self.y, self.t, axis=0, edge_order=1)

    def shifted(self, eta, h: float) -> "Path":
        return Path(self.t, self.y + h * np.asarray(eta, dtype=float))


def _trapezoid(f, t):
    return float(np.trapezoid(f, t))


def action_A0(path: Path) -> float:
    return _trapezoid(lambda_array(path.y, path.velocity()), path.t)


def _to_time_one(H, path: Path, spec: FlowSpec):
    """States and conformal exponents of ``(phi_H^t)^{-1}`` applied sample-wise."""
    return transport(H, path.y, path.t, 1.0, spec)


def _integrand(H, path: Path) -> np.ndarray:
    return lambda_array(path.y, path.velocity()) + H.value(path.t, path.y)


def action_AH(H, path: Path, spec: FlowSpec = DEFAULT_SPEC) -> float:
    _, g = _to_time_one(H, path, spec)
    return _trapezoid(np.exp(g) * _integrand(H, path), path.t)


def gauge_transform(H, path: Path, spec: FlowSpec = DEFAULT_SPEC) -> Path:
    """``t -> (phi_H^t)^{-1}(gamma(t))``."""
    Y, _ = _to_time_one(H, path, spec)
    return Path(path.t, Y)


def effective_action(H, path: Path, spec: FlowSpec = DEFAULT_SPEC) -> float:
    n = (path.y.shape[1] - 1) // 2
    return -action_AH(H, path, spec) + float(path.y[-1, 2 * n])


def carnot_residual(H, path: Path) -> float:
    """Max over interior samples of ``|lambda(gamma') + H(t, gamma)|``."""
    r = _integrand(H, path)
    return float(np.max(np.abs(r[1:-1])))


def horizontality_residual(path: Path) -> float:
    """Max over interior samples of ``|lambda(gamma')|``."""
    return float(np.max(np.abs(lambda_array(path.y, path.velocity())[1:-1])))


def first_variation_check(H, path: Path, eta, spec: FlowSpec = DEFAULT_SPEC,
                          h: float = 1e-5):
    """Compare a central difference of ``A_H`` along ``eta`` with the first-variation formula.

    Returns ``(fd, formula)``. The formula is

        int dlambda(dE eta, dE (gamma' - X_H)) dt + lambda(eta(1)) - e^{g_{psi_1}(gamma(0))} lambda(eta(0))

    with ``dE`` the linearised evolution from time ``t`` to time 1.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != path.y.shape or not np.all(np.isfinite(eta)):
        raise ValueError("eta must be finite and sampled like the path")
    fd = (action_AH(H, path.shifted(eta, h), spec)
          - action_AH(H, path.shifted(eta, -h), spec)) / (2.0 * h)

    J = jacobian_stack(H, path.y, path.t, 1.0, spec)
    X, _ = contact_field(H, path.t, path.y)
    defect = path.velocity() - X
    a = np.einsum("bij,bj->bi", J, eta)
    b = np.einsum("bij,bj->bi", J, defect)
    bulk = _trapezoid(dlambda_array(a, b), path.t)
    _, g0 = transport(H, path.y[0], 0.0, 1.0, spec)
    boundary = (lambda_array(path.y[-1], eta[-1])
                - math.exp(g0[0]) * lambda_array(path.y[0], eta[0]))
    return float(fd), float(bulk + boundary)


def classical_action(Hbar, path: Path) -> float:
    """``int p.q' - Hbar(t, q, p) dt`` for a path sampled in ``(q, p)`` coordinates.

    ``Hbar`` is evaluated with ``z = 0``; it should not depend on ``z``.
    """
    n = Hbar.dim
    if path.y.shape[1] != 2 * n:
        raise ValueError(f"classical path must have {2 * n} columns")
    q = path.y[:, :n]
    p = path.y[:, n:]
    qdot = np.gradient(q, path.t, axis=0, edge_order=1)
    Y = np.concatenate([path.y, np.zeros((path.y.shape[0], 1))], axis=1)
    integrand = np.sum(p * qdot, axis=1) - Hbar.value(path.t, Y)
    return _trapezoid(integrand, path.t)


def trajectory_path(H, y0, m: int, spec: FlowSpec = DEFAULT_SPEC) -> Path:
    """The Hamiltonian trajectory through ``y0`` at time 0, sampled at ``m + 1`` uniform times."""
    y0 = np.asarray(y0, dtype=float)
    t = np.linspace(0.0, 1.0, m + 1)
    Y, _ = transport(H, np.repeat(y0[None, :], m + 1, axis=0), 0.0, t, spec)
    return Path(t, Y)


def random_smooth_path(rng: np.random.Generator, n: int, m: int, amplitude: float = 0.5,
                       modes: int = 3) -> Path:
    """``y0 + b t + sum_k a_k sin(k pi t)`` with random coefficients of the given size."""
    t = np.linspace(0.0, 1.0, m + 1)
    D = 2 * n + 1
    y0 = rng.uniform(-1.0, 1.0, D)
    b = rng.uniform(-amplitude, amplitude, D)
    a = rng.uniform(-amplitude, amplitude, (modes, D)) / np.arange(1, modes + 1)[:, None]
    basis = np.sin(np.pi * np.outer(t, np.arange(1, modes + 1)))
    return Path(t, y0 + np.outer(t, b) + basis @ a)
