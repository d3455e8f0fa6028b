"""Geometry of the one-jet bundle ``J^1 R^n`` with contact form ``dz - p dq``.

Orientation convention: ``dlambda = dq ^ dp``, i.e. ``dlambda(d/dq, d/dp) = +1``.

With ``H = -lambda(X_H)`` and ``dH = X_H _| dlambda + R[H] lambda`` one finds,
writing ``X_H = (a, b, c)`` in ``(q, p, z)`` components,

* ``lambda(X_H) = c - p.a = -H``;
* contracting with ``d/dp_i``: ``H_{p_i} = a_i`` (the ``lambda`` term has no ``dp``);
* contracting with ``d/dq_i``: ``H_{q_i} = -b_i - p_i H_z``;

hence ``X_H = (H_p, -H_q - p H_z, p.H_p - H)``. ``H = -1`` gives the Reeb field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ContactPoint:
    q: np.ndarray
    p: np.ndarray
    z: float

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float)).copy()
        p = np.atleast_1d(np.asarray(self.p, dtype=float)).copy()
        if q.shape != p.shape or q.ndim != 1:
            raise ValueError("q and p must be vectors of equal length")
        q.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "z", float(self.z))

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.p, [self.z]])

    @classmethod
    def from_array(cls, arr) -> "ContactPoint":
        arr = np.asarray(arr, dtype=float)
        n = (arr.shape[0] - 1) // 2
        return cls(arr[:n], arr[n:2 * n], arr[2 * n])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array())))


@dataclass(frozen=True)
class TangentVector:
    dq: np.ndarray
    dp: np.ndarray
    dz: float

    def __post_init__(self):
        dq = np.atleast_1d(np.asarray(self.dq, dtype=float)).copy()
        dp = np.atleast_1d(np.asarray(self.dp, dtype=float)).copy()
        if dq.shape != dp.shape or dq.ndim != 1:
            raise ValueError("dq and dp must be vectors of equal length")
        dq.setflags(write=False)
        dp.setflags(write=False)
        object.__setattr__(self, "dq", dq)
        object.__setattr__(self, "dp", dp)
        object.__setattr__(self, "dz", float(self.dz))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.dq, self.dp, [self.dz]])

    @classmethod
    def from_array(cls, arr) -> "TangentVector":
        arr = np.asarray(arr, dtype=float)
        n = (arr.shape[0] - 1) // 2
        return cls(arr[:n], arr[n:2 * n], arr[2 * n])


def split(Y: np.ndarray):
    """Views ``(q, p, z)`` of a state array of shape ``(..., 2n+1)``."""
    n = (Y.shape[-1] - 1) // 2
    return Y[..., :n], Y[..., n:2 * n], Y[..., 2 * n]


# Array forms operate on stacks of shape (..., 2n+1).

def lambda_array(Y, V):
    _, p, _ = split(np.asarray(Y))
    dq, _, dz = split(np.asarray(V))
    return dz - np.sum(p * dq, axis=-1)


def dlambda_array(V, W):
    vq, vp, _ = split(np.asarray(V))
    wq, wp, _ = split(np.asarray(W))
    return np.sum(vq * wp - vp * wq, axis=-1)


def contact_field(H, t, Y):
    """Contact Hamiltonian vector field at a stack of states.

    Returns ``(X, Hz)`` where ``X`` has the shape of ``Y`` and ``Hz`` is the
    Reeb derivative ``R[H] = dH/dz`` (needed for conformal exponents).
    """
    val, grad = H.jet(t, Y)
    n = (Y.shape[1] - 1) // 2
    Hq = grad[:, :n]
    Hp = grad[:, n:2 * n]
    Hz = grad[:, 2 * n]
    p = Y[:, n:2 * n]
    X = np.empty_like(Y)
    X[:, :n] = Hp
    X[:, n:2 * n] = -Hq - p * Hz[:, None]
    X[:, 2 * n] = np.einsum("ij,ij->i", p, Hp) - val
    return X, Hz


def lambda_eval(y: ContactPoint, v: TangentVector) -> float:
    return float(v.dz - np.dot(y.p, v.dq))


def dlambda_eval(y: ContactPoint, v: TangentVector, w: TangentVector) -> float:
    return float(np.dot(v.dq, w.dp) - np.dot(v.dp, w.dq))


def reeb(y: ContactPoint) -> TangentVector:
    n = y.dim
    return TangentVector(np.zeros(n), np.zeros(n), 1.0)


def hamiltonian_vector_field(H, t: float, y: ContactPoint) -> TangentVector:
    arr = y.as_array()
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite state")
    X, _ = contact_field(H, float(t), arr[None, :])
    return TangentVector.from_array(X[0])


def xi_projection(y: ContactPoint, v: TangentVector) -> TangentVector:
    """Component of ``v`` in the contact distribution along the Reeb splitting."""
    lam = lambda_eval(y, v)
    return TangentVector(v.dq, v.dp, v.dz - lam)


def darboux_frame(y: ContactPoint) -> list:
    """The frame ``D/dq_i = d/dq_i + p_i d/dz``, ``d/dp_i`` of the contact distribution."""
    n = y.dim
    frame = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        frame.append(TangentVector(e, np.zeros(n), y.p[i]))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        frame.append(TangentVector(np.zeros(n), e, 0.0))
    return frame
