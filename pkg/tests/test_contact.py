import numpy as np
import pytest

from conftest import FAMILY
from contactgf.contact import (ContactPoint, TangentVector, darboux_frame, dlambda_eval,
                               hamiltonian_vector_field, lambda_eval, reeb, xi_projection)
from contactgf.hamlang import parse


def cp(q, p, z):
    return ContactPoint(q, p, z)


def tv(dq, dp, dz):
    return TangentVector(dq, dp, dz)


def test_lambda_examples():
    assert lambda_eval(cp([0], [0], 0), tv([1], [0], 0)) == 0
    assert lambda_eval(cp([4], [-3], 2), tv([0], [0], 1)) == 1
    assert lambda_eval(cp([0], [2], 0), tv([3], [0], 5)) == -1


def test_dlambda_examples(rng):
    v = TangentVector.from_array(rng.normal(size=5))
    y = cp([0, 0], [0, 0], 0)
    assert dlambda_eval(y, v, v) == 0
    assert dlambda_eval(cp([0], [0], 0), tv([1], [0], 0), tv([0], [1], 0)) == 1
    assert dlambda_eval(y, tv([0, 0], [0, 0], 1), v) == 0


def test_dlambda_antisymmetric(rng):
    y = cp([0.1, 0.2], [0.3, 0.4], 0.5)
    for _ in range(50):
        a, b = rng.normal(size=(2, 5))
        v = TangentVector.from_array(a)
        w = TangentVector.from_array(b)
        assert dlambda_eval(y, v, w) == -dlambda_eval(y, w, v)


def test_reeb(rng):
    y = cp(rng.normal(size=2), rng.normal(size=2), 1.0)
    R = reeb(y)
    assert np.array_equal(R.as_array(), [0, 0, 0, 0, 1])
    assert lambda_eval(y, R) == 1
    v = TangentVector.from_array(rng.normal(size=5))
    assert dlambda_eval(y, R, v) == 0


def test_vector_field_examples():
    X = hamiltonian_vector_field(parse("-1", 1), 0.0, cp([0.3], [0.2], 0.1))
    assert np.array_equal(X.as_array(), [0, 0, 1])
    X = hamiltonian_vector_field(parse("2*z", 1), 0.0, cp([0.3], [0.7], -0.4))
    assert np.allclose(X.as_array(), [0, -1.4, 0.8])
    X = hamiltonian_vector_field(parse("cos(q1)", 1), 0.0, cp([0], [0], 0))
    assert np.allclose(X.as_array(), [0, 0, -1])


def test_lambda_of_field_is_minus_H(rng):
    srcs = FAMILY + ["p1^2/2 + cos(q1)", "2*z", "exp(0.3*q1)*p1 - z^2"]
    worst = 0.0
    for i in range(1000):
        H = parse(srcs[i % len(srcs)], 1)
        t = rng.uniform(0, 1)
        y = ContactPoint.from_array(rng.uniform(-2, 2, 3))
        X = hamiltonian_vector_field(H, t, y)
        worst = max(worst, abs(lambda_eval(y, X) + H(t, y)))
    assert worst <= 1e-12


def test_z_independent_field_is_symplectic():
    H = parse("p1^2/2 + sin(q1)*p2 + q2^3", 2)
    y = cp([0.3, -0.5], [0.8, 1.2], 0.7)
    X = hamiltonian_vector_field(H, 0.0, y)
    assert np.array_equal(X.dq, [0.8, np.sin(0.3)])
    assert np.array_equal(X.dp, [-np.cos(0.3) * 1.2, -3 * 0.25])


def test_xi_projection():
    y = cp([0.0], [2.0], 0.0)
    assert np.array_equal(xi_projection(y, reeb(y)).as_array(), [0, 0, 0])
    v = tv([1.0], [0.5], 2.0)
    assert lambda_eval(y, v) == 0
    assert np.array_equal(xi_projection(y, v).as_array(), v.as_array())
    out = xi_projection(y, tv([1.0], [0.0], 3.0))
    assert np.array_equal(out.as_array(), [1, 0, 2])
    assert lambda_eval(y, out) == 0


@pytest.mark.parametrize("n", [1, 2, 3])
def test_darboux_frame_nondegenerate(n, rng):
    # unit vectors of xi measured in the frame's own coordinates
    for _ in range(100):
        y = ContactPoint.from_array(rng.uniform(-5, 5, 2 * n + 1))
        frame = darboux_frame(y)
        assert all(abs(lambda_eval(y, f)) < 1e-12 for f in frame)
        c = rng.normal(size=2 * n)
        c /= np.linalg.norm(c)
        v = TangentVector.from_array(sum(ci * f.as_array() for ci, f in zip(c, frame)))
        assert abs(lambda_eval(y, v)) < 1e-12
        best = max(abs(dlambda_eval(y, v, w)) for w in frame)
        assert best >= 1.0 / np.sqrt(2 * n) - 1e-12
        if n <= 2:
            assert best >= 0.5


def test_contact_point_validation():
    with pytest.raises(ValueError):
        ContactPoint([1.0, 2.0], [1.0], 0.0)
    assert not ContactPoint([np.nan], [0.0], 0.0).is_finite()
