import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spacetime_control.fem import (DegenerateElementError, InterpolationWarning,
                                   OutOfDomainError, SpaceKind, build_dof_map,
                                   element_geometry, evaluate_fe, interpolate, quadrature,
                                   simplex_monomial_integral)
from spacetime_control.mesh import BoundaryTag, SpaceTimeMesh
from spacetime_control.problems import example1


def _single_tet(X):
    X = np.asarray(X, dtype=float)
    cells = np.array([[0, 1, 2, 3]])
    z = np.zeros(1, dtype=np.int64)
    e = np.empty(0, dtype=np.int64)
    return SpaceTimeMesh(X, cells, z + 3, z, np.empty((0, 3), dtype=np.int64), e, e)


REF = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]


@pytest.mark.parametrize("kind, n", [(SpaceKind.X0H, 36), (SpaceKind.XTH, 36),
                                     (SpaceKind.FULL, 125), (SpaceKind.X0H_NEUMANN, 100),
                                     (SpaceKind.XTH_NEUMANN, 100)])
def test_dof_counts(mesh5, kind, n):
    d = build_dof_map(mesh5, kind)
    assert d.n_dofs == n
    assert d.n_dofs + d.constrained.size == mesh5.n_vertices


def test_x0h_constrains_initial_and_lateral(mesh5):
    d = build_dof_map(mesh5, SpaceKind.X0H)
    X = mesh5.vertices[d.constrained]
    lateral = np.any((X[:, :2] == 0) | (X[:, :2] == 1), axis=1)
    assert np.all((X[:, 2] == 0) | lateral)
    F = mesh5.vertices[d.free]
    assert np.all(F[:, 2] > 0) and np.all((F[:, :2] > 0) & (F[:, :2] < 1))


def test_dirichlet_lifting(mesh5):
    d = build_dof_map(mesh5, SpaceKind.X0H_NEUMANN, {BoundaryTag.SIGMA_ZERO: lambda X: X[:, 0]})
    np.testing.assert_allclose(d.dirichlet_values, mesh5.vertices[d.constrained, 0])
    full = d.expand(np.zeros(d.n_dofs))
    np.testing.assert_allclose(full[d.constrained], d.dirichlet_values)


def test_reference_geometry():
    g = element_geometry(_single_tet(REF), 0)
    assert g.volume == pytest.approx(1 / 6)
    np.testing.assert_allclose(g.dt_phi, [-1, 0, 0, 1])
    np.testing.assert_allclose(g.grad_phi.sum(axis=0), 0, atol=1e-15)
    X = np.asarray(REF, float)
    np.testing.assert_allclose(g.grad_phi @ (X[1:] - X[0]).T,
                               np.vstack([-np.ones(3), np.eye(3)]), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0))
def test_geometry_scaling(s):
    g1 = element_geometry(_single_tet(REF), 0)
    gs = element_geometry(_single_tet(s * np.asarray(REF, float)), 0)
    assert gs.volume == pytest.approx(s ** 3 / 6)
    np.testing.assert_allclose(gs.grad_phi, g1.grad_phi / s, rtol=1e-12)


def test_degenerate_element():
    with pytest.raises(DegenerateElementError):
        element_geometry(_single_tet([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 0, 1]]), 0)


def _monomial_on_reference(rule, a, b, c):
    x = rule.points[:, 1]
    y = rule.points[:, 2]
    t = rule.points[:, 3]
    return float(rule.weights @ (x ** a * y ** b * t ** c)) / 6.0


def test_quadrature_rules():
    r1 = quadrature(1)
    np.testing.assert_allclose(r1.points, [[0.25] * 4])
    assert r1.weights.tolist() == [1.0]
    assert _monomial_on_reference(quadrature(2), 2, 0, 0) == pytest.approx(1 / 60, rel=1e-13)
    assert _monomial_on_reference(quadrature(4), 2, 1, 1) == pytest.approx(1 / 2520, rel=1e-12)
    with pytest.raises(ValueError):
        quadrature(3)


@pytest.mark.parametrize("degree", [1, 2, 4])
def test_quadrature_exactness(degree):
    rule = quadrature(degree)
    assert np.all(rule.weights > 0)
    assert rule.weights.sum() == pytest.approx(1.0, rel=1e-14)
    for alpha in np.ndindex(*(rule.exactness_degree + 1,) * 4):
        if sum(alpha) > rule.exactness_degree:
            continue
        val = rule.weights @ np.prod(rule.points ** np.array(alpha), axis=1)
        assert val == pytest.approx(simplex_monomial_integral(alpha), rel=1e-12, abs=1e-15)


def test_partition_of_unity(mesh5):
    rng = np.random.default_rng(1)
    ones = np.ones(mesh5.n_vertices)
    for _ in range(50):
        assert evaluate_fe(mesh5, ones, rng.random(3)) == pytest.approx(1.0, abs=1e-13)
    lam = rng.dirichlet(np.ones(4), size=100)
    assert np.max(np.abs(lam.sum(axis=1) - 1)) < 1e-13


def test_affine_reproduction(mesh5):
    f = lambda X: 0.3 + X[:, 0] - 2 * X[:, 1] + 4 * X[:, 2]
    vals = interpolate(f, mesh5)
    rng = np.random.default_rng(2)
    P = rng.random((20, 3))
    got = np.array([evaluate_fe(mesh5, vals, p) for p in P])
    np.testing.assert_allclose(got, f(P), atol=1e-12)
    assert evaluate_fe(mesh5, np.zeros(125), P[0]) == 0.0
    v = 17
    assert evaluate_fe(mesh5, vals, mesh5.vertices[v]) == pytest.approx(vals[v], abs=1e-13)


def test_out_of_domain(mesh5):
    with pytest.raises(OutOfDomainError):
        evaluate_fe(mesh5, np.zeros(125), [0.5, 0.5, 1.1])


def test_interpolation_warning(mesh5):
    d = build_dof_map(mesh5, SpaceKind.X0H)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        x = interpolate(example1().exact_u, mesh5, d)
    assert x.shape == (d.n_dofs,)
    with pytest.warns(InterpolationWarning):
        interpolate(lambda X: np.ones(len(X)), mesh5, d)
    full = build_dof_map(mesh5, SpaceKind.FULL)
    np.testing.assert_array_equal(interpolate(lambda X: np.ones(len(X)), mesh5, full),
                                  np.ones(125))
