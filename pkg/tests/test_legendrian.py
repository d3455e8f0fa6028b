import math

import numpy as np
import pytest

from conftest import compact, pendulum_rhs, reference_flow
from contactgf.genfun import Partition
from contactgf.hamlang import parse
from contactgf.legendrian import (Grid, fold_count, reconcile_with_genfun, sample_legendrian,
                                  spectrum, wave_front, zero_wall_crossings)

ZERO = parse("0", 1)
SCALE = (1 - math.exp(-0.7)) / 0.7


def test_grid():
    g = Grid((0.0, -1.0), (1.0, 1.0), (3, 2))
    assert g.points().shape == (6, 2)
    assert np.array_equal(g.points()[1], [0.0, 1.0])
    with pytest.raises(ValueError):
        Grid.line(1.0, 0.0, 5)
    with pytest.raises(ValueError):
        Grid((0.0,), (1.0, 2.0), (3,))
    with pytest.raises(ValueError):
        sample_legendrian(ZERO, Grid((0, 0), (1, 1), (2, 2)))


def test_sample_trivial():
    s = sample_legendrian(ZERO, Grid.line(-2, 2, 9))
    assert np.array_equal(s.points[:, 1:], np.zeros((9, 2)))
    assert np.array_equal(s.points[:, 0], s.q0[:, 0])
    assert s.success_fraction() == 1.0


def test_sample_closed_forms():
    g = Grid.line(-3, 3, 31)
    q = g.points()[:, 0]
    s = sample_legendrian(parse("cos(q1)", 1), g)
    assert np.max(np.abs(s.points - np.column_stack([q, np.sin(q), -np.cos(q)]))) <= 1e-8
    s = sample_legendrian(parse("cos(q1)+0.7*z", 1), g)
    assert np.max(np.abs(s.points - np.column_stack([q, SCALE * np.sin(q), -SCALE * np.cos(q)]))) <= 1e-6


def test_front_examples():
    front = wave_front(parse("cos(q1)", 1), Grid.line(-3, 3, 13))
    assert all(abs(z + math.cos(q[0])) <= 1e-10 for q, z in front)
    front = wave_front(ZERO, Grid.line(-3, 3, 13))
    assert all(z == 0.0 for _, z in front)


def test_front_folds():
    g = Grid.line(-4, 4, 801)
    folded = sample_legendrian(compact("p1^2/2 + 4*cos(q1)"), g)
    assert fold_count(folded) >= 2
    graphical = sample_legendrian(compact("p1^2/2 + cos(q1)"), g)
    assert fold_count(graphical) == 0


def test_front_folds_reference():
    # independent integration of the pendulum reproduces the reversal of q0 -> q(1)
    q0 = np.linspace(-4, 4, 161)
    q1 = np.array([reference_flow(pendulum_rhs(4.0), [q, 0, 0], 0, 1)[0] for q in q0])
    s = np.sign(np.diff(q1))
    ref_folds = int(np.count_nonzero(s[1:] != s[:-1]))
    ours = fold_count(sample_legendrian(compact("p1^2/2 + 4*cos(q1)"), Grid.line(-4, 4, 161)))
    assert ref_folds == ours >= 2
    q1 = np.array([reference_flow(pendulum_rhs(1.0), [q, 0, 0], 0, 1)[0] for q in q0])
    assert np.all(np.diff(q1) > 0)


def test_front_refinement_is_pointwise():
    H = compact("p1^2/2 + 4*cos(q1)")
    coarse = sample_legendrian(H, Grid.line(-2, 2, 11))
    fine = sample_legendrian(H, Grid.line(-2, 2, 21))
    shared = 0
    for i, q in enumerate(coarse.q0[:, 0]):
        j = np.nonzero(fine.q0[:, 0] == q)[0]
        if j.size:
            shared += 1
            assert np.array_equal(coarse.points[i], fine.points[j[0]])
    assert shared >= 9


def test_spectrum_potential():
    rep = spectrum(compact("cos(q1)"), Grid.line(-4, 4, 401))
    assert np.allclose(rep.values(), [-1, 1], atol=1e-6)
    assert rep.multiplicities() == [1, 2]
    locs = sorted(r[0] for r in rep.locations)
    assert np.allclose(locs, [-math.pi, 0, math.pi], atol=1e-8, rtol=0)
    assert not any(rep.degenerate_flags)
    assert all(np.max(np.abs(r.point.p)) <= 1e-8 for r in rep.roots)


def test_spectrum_linear_z():
    rep = spectrum(parse("cos(q1)+0.7*z", 1), Grid.line(-4, 4, 401))
    assert np.allclose(sorted(r[0] for r in rep.locations), [-math.pi, 0, math.pi], atol=1e-8)
    assert np.allclose(rep.values(), [-SCALE, SCALE], atol=1e-6)


def test_spectrum_degenerate():
    rep = spectrum(ZERO, Grid.line(-4, 4, 41))
    assert rep.values() == [0.0]
    assert rep.degenerate_flags == [True]
    pts = zero_wall_crossings(ZERO, Grid.line(-4, 4, 41))
    assert len(pts) == 41


def test_spectrum_empty():
    g = Grid.line(-4, 4, 41)
    H = compact("q1")
    assert spectrum(H, g).roots == []
    assert zero_wall_crossings(H, g) == []
    # reference: dp/dt = -1 on the plateau
    ref = reference_flow(lambda t, y: [0.0, -1.0, -y[0]], [0.5, 0, 0], 0, 1)
    assert ref[1] == pytest.approx(-1.0)


def test_zero_wall_potential():
    pts = zero_wall_crossings(parse("cos(q1)", 1), Grid.line(-4, 4, 81))
    got = sorted((p.q[0], p.z) for p in pts)
    want = [(-math.pi, 1.0), (0.0, -1.0), (math.pi, 1.0)]
    assert np.allclose(got, want, atol=1e-8)
    assert all(p.p[0] == 0 for p in pts)


def test_spectrum_consistent_with_samples():
    H = compact("0.25*p1^2 + 0.5*cos(q1) + 0.3*z")
    rep = spectrum(H, Grid.line(-4, 4, 201))
    assert rep.roots
    for r in rep.roots:
        s = sample_legendrian(H, Grid.line(r.q0[0], r.q0[0] + 1, 2))
        assert abs(s.points[0, 1]) <= 1e-10
        assert s.points[0, 2] == r.value


@pytest.mark.parametrize("src", ["cos(q1)", "0.25*p1^2 + 0.5*cos(q1) + 0.3*z", "cos(q1)+0.7*z"])
def test_spectrum_agrees_with_genfun(src):
    H = compact(src)
    rep = spectrum(H, Grid.line(-4, 4, 201))
    assert reconcile_with_genfun(H, rep, Partition(16)) <= 1e-6


def test_spectrum_two_dimensional():
    H = parse("cos(q1)*cos(q2)", 2)
    rep = spectrum(H, Grid((-1, -1), (1, 1), (11, 11)))
    assert len(rep.roots) == 1
    assert np.allclose(rep.locations[0], [0, 0], atol=1e-8)
    assert rep.values() == pytest.approx([-1.0])


def test_parallel_sampling_matches_serial():
    H = compact("p1^2/2 + 4*cos(q1)")
    g = Grid.line(-4, 4, 64)
    a = sample_legendrian(H, g, jobs=1)
    b = sample_legendrian(H, g, jobs=2)
    assert np.array_equal(a.points, b.points)
