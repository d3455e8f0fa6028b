import math

import numpy as np
import pytest

from conftest import FAMILY, family, pendulum_rhs, reference_flow
from contactgf.contact import ContactPoint, TangentVector, lambda_eval
from contactgf.flow import (FlowError, FlowSpec, conformal_exponent, conformal_identity_check,
                            integrate, linearized_flow, phi, phi_inverse, psi, transport)
from contactgf.hamlang import parse


def cp(*a):
    return ContactPoint.from_array(np.array(a, dtype=float))


def test_flowspec_validation():
    with pytest.raises(ValueError):
        FlowSpec(5)
    with pytest.raises(ValueError):
        FlowSpec(100, method="euler")
    assert FlowSpec(200).steps_for(0.25) == 50


def test_reeb_flow():
    traj = integrate(parse("-1", 1), cp(0.2, -0.3, 0.5), 0.0, 0.7)
    assert np.allclose(traj.end.as_array(), [0.2, -0.3, 1.2], atol=1e-14)
    assert np.all(traj.g == 0)
    assert traj.t[0] == 0.0 and traj.t[-1] == pytest.approx(0.7)


@pytest.mark.parametrize("q0", [-2.5, -0.4, 0.0, 1.1, 3.0])
def test_potential_flow(q0):
    end, g = psi(parse("cos(q1)", 1), 1.0, cp(q0, 0, 0))
    assert np.max(np.abs(end.as_array() - [q0, math.sin(q0), -math.cos(q0)])) <= 1e-10
    assert g == 0.0


def test_linear_z_flow():
    end, g = psi(parse("2*z", 1), 1.0, cp(0, 1, 1))
    e2 = math.exp(-2)
    assert end.q[0] == 0
    assert abs(end.p[0] - e2) <= 1e-8 * e2 and abs(end.z - e2) <= 1e-8 * e2
    assert g == pytest.approx(-2.0, rel=1e-12)


def test_backward_run():
    traj = integrate(parse("p1^2/2", 1), cp(0, 1, 0), 1.0, 0.0)
    assert np.all(np.diff(traj.t) < 0)
    assert np.allclose(traj.end.as_array(), [-1, 1, -0.5])


def test_blow_up_reports_time():
    with pytest.raises(FlowError) as info:
        psi(parse("z^2", 1), 1.0, cp(0, 0, -10))
    # exact solution z = -10/(1 - 10t) leaves every bound at t = 0.1; RK4 may step slightly past it
    assert 0.05 < info.value.last_time < 0.2


def test_matches_reference_integration():
    y0 = [0.4, -0.3, 0.2]
    ref = reference_flow(pendulum_rhs(1.0), y0, 0.0, 1.0)
    end, _ = psi(parse("p1^2/2 + cos(q1)", 1), 1.0, ContactPoint.from_array(y0))
    assert np.max(np.abs(end.as_array() - ref)) <= 1e-8


def test_rk4_order():
    H = parse("p1^2/2 + cos(q1)", 1)
    y0 = np.array([[0.4, -0.3, 0.2], [2.0, 0.5, 0.0], [-1.0, 0.0, 0.0]])
    ref = np.array([reference_flow(pendulum_rhs(1.0), y, 0.0, 1.0) for y in y0])
    coarse, _ = transport(H, y0, 0.0, 1.0, FlowSpec(10))
    fine, _ = transport(H, y0, 0.0, 1.0, FlowSpec(20))
    ratio = np.abs(coarse - ref).max() / np.abs(fine - ref).max()
    assert ratio >= 12


def test_batch_rows_independent():
    H = family()[2]
    Y = np.random.default_rng(0).uniform(-1, 1, (7, 3))
    t1 = np.linspace(0.1, 1.0, 7)
    batch, gb = transport(H, Y, 0.0, t1)
    for i in range(7):
        one, g1 = transport(H, Y[i], 0.0, t1[i])
        assert np.array_equal(one[0], batch[i]) and g1[0] == gb[i]


def test_composition():
    H = parse("p1^2/2 + cos(q1) + 0.3*z*p1", 1)
    y = cp(0.3, 0.2, -0.1)
    once, g_once = psi(H, 0.75, y)
    mid, g_mid = psi(H, 0.25, y)
    Y, g_rest = transport(H, mid.as_array(), 0.25, 0.75)
    assert np.max(np.abs(Y[0] - once.as_array())) <= 1e-9
    assert abs(g_mid + g_rest[0] - g_once) <= 1e-9


def test_phi_at_one_is_identity():
    H_list = family() + [parse("p1^2/2 + cos(q1)", 1)]
    Y = np.random.default_rng(3).uniform(-2, 2, (100, 3))
    for H in H_list:
        for y in Y:
            assert np.max(np.abs(phi(H, 1.0, ContactPoint.from_array(y)).as_array() - y)) <= 1e-9


def test_phi_reeb():
    out = phi(parse("-1", 1), 0.3, cp(0.1, 0.2, 0.5))
    assert np.allclose(out.as_array(), [0.1, 0.2, 0.5 + 0.3 - 1.0], atol=1e-14)


@pytest.mark.parametrize("src", FAMILY)
def test_phi_round_trips(src):
    H = parse(src, 1)
    y = cp(0.3, -0.6, 0.4)
    back, _ = psi(H, 1.0, phi(H, 0.0, y))
    assert np.max(np.abs(back.as_array() - y.as_array())) <= 1e-8
    for t in (0.0, 0.35, 0.8):
        rt = phi_inverse(H, t, phi(H, t, y))
        assert np.max(np.abs(rt.as_array() - y.as_array())) <= 1e-8


def test_conformal_exponent_examples():
    y = cp(0.3, -0.2, 0.6)
    H = parse("p1^2/2 + cos(q1)", 1)
    for tag in ("psi_t", "phi_t", "phi_t_inverse"):
        assert conformal_exponent(H, tag, 0.4, y) == 0.0
    Hz = parse("2*z", 1)
    for t in (0.2, 0.5, 1.0):
        assert conformal_exponent(Hz, "psi_t", t, y) == pytest.approx(-2 * t, abs=1e-12)
        assert conformal_exponent(Hz, "phi_t", t, y) == pytest.approx(2 * (1 - t), abs=1e-12)
    for G in family():
        assert abs(conformal_exponent(G, "phi_t_inverse", 1.0, y)) <= 1e-9
    with pytest.raises(ValueError):
        conformal_exponent(H, "psi", 0.5, y)


def test_linearized_examples():
    J = linearized_flow(parse("-1", 1), cp(0.1, 0.2, 0.3), 0.0, 1.0)
    assert np.max(np.abs(J - np.eye(3))) <= 1e-9
    J = linearized_flow(parse("2*z", 1), cp(0.1, 0.2, 0.3), 0.0, 1.0)
    e2 = math.exp(-2)
    assert np.max(np.abs(J - np.diag([1, e2, e2]))) <= 1e-6
    with pytest.raises(ValueError):
        linearized_flow(parse("2*z", 1), cp(0, 0, 0), 0.0, 1.0, h=0.0)


def test_liouville_determinant():
    # div X_H = -(n+1) H_z for the contact vector field; here H_z = 0.5
    H = parse("cos(q1)+0.5*z", 1)
    for y in ([0.3, 0.1, -0.2], [2.0, -1.0, 0.5]):
        J = linearized_flow(H, ContactPoint.from_array(y), 0.0, 1.0)
        t = np.linspace(0, 1, 201)
        div = np.full_like(t, -2 * 0.5)
        oracle = math.exp(np.trapezoid(div, t))
        assert abs(np.linalg.det(J) / oracle - 1) <= 1e-4


def test_liouville_determinant_nonconstant():
    # oracle: quadrature of -2 H_z along the reference trajectory
    H = parse("0.3*z*cos(q1) + 0.2*p1^2", 1)
    y0 = np.array([0.4, -0.5, 0.3])
    from contactgf.action import trajectory_path
    path = trajectory_path(H, y0, 400, FlowSpec(1000))
    div = -2 * 0.3 * np.cos(path.y[:, 0])
    oracle = math.exp(np.trapezoid(div, path.t))
    J = linearized_flow(H, ContactPoint.from_array(y0), 0.0, 1.0)
    assert abs(np.linalg.det(J) / oracle - 1) <= 1e-4


def test_conformal_identity_examples(rng):
    H = parse("p1^2/2 + cos(q1)", 1)
    for _ in range(10):
        y = ContactPoint.from_array(rng.uniform(-1, 1, 3))
        v = TangentVector.from_array(rng.uniform(-1, 1, 3))
        assert conformal_identity_check(H, rng.uniform(0, 1), y, v) <= 1e-6
    assert conformal_identity_check(parse("2*z", 1), 0.6, cp(0.1, 0.2, 0.3),
                                    TangentVector([0.0], [0.0], 1.0)) <= 1e-8


def test_contact_distribution_preserved(rng):
    H = family()[3]
    y = cp(0.2, 0.5, -0.3)
    v = TangentVector([1.0], [0.3], 0.5)  # lambda(v) = 0.5 - 0.5 = 0
    assert lambda_eval(y, v) == 0
    end, _ = psi(H, 0.8, y)
    J = linearized_flow(H, y, 0.0, 0.8)
    pushed = TangentVector.from_array(J @ v.as_array())
    assert abs(lambda_eval(end, pushed)) <= 1e-6
