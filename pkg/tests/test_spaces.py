import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from fsidlm.errors import UnknownBoundarySet, UnknownRule
from fsidlm.mesh import fluid_box_mesh
from fsidlm.spaces import (eval_basis, p1_basis, q1_basis, q2_basis, vector_q1_space, vector_q2_space,
                           disc_p1_space, volume_quadrature)


def test_q1_nodal_at_origin():
    v, _ = q1_basis(0.0, 0.0)
    np.testing.assert_array_equal(v, [1, 0, 0, 0])


def test_q2_center():
    v, _ = q2_basis(0.5, 0.5)
    assert v.sum() == pytest.approx(1.0, abs=1e-15)
    assert v[4] == pytest.approx(1.0)


def test_p1_center():
    V = vector_q2_space(fluid_box_mesh(2, 2))
    Q = disc_p1_space(V.mesh)
    v, _ = eval_basis(Q, 3, (0.5, 0.5))
    np.testing.assert_array_equal(v, [1, 0, 0])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_partition_of_unity(xi, eta):
    for basis in (q1_basis, q2_basis):
        v, g = basis(xi, eta)
        assert abs(v.sum() - 1.0) <= 1e-14
        assert np.abs(g.sum(axis=0)).max() <= 1e-13


def test_q2_nodal_property():
    pts = np.array([[bx / 2, by / 2] for by in range(3) for bx in range(3)])
    v, _ = q2_basis(pts[:, 0], pts[:, 1])
    np.testing.assert_allclose(v, np.eye(9), atol=1e-15)


def test_triangle_rule_weights_and_cubic_exactness():
    r = volume_quadrature("Triangle4pt")
    np.testing.assert_allclose(r.weights, [25 / 48, 25 / 48, 25 / 48, -9 / 16])
    assert r.weights.sum() == pytest.approx(1.0)
    # reference triangle (0,0),(1,0),(0,1), area 1/2
    x, y = sympy.symbols("x y")
    verts = np.array([(0, 0), (1, 0), (0, 1)], float)
    pts = r.points @ verts
    for i in range(4):
        for j in range(4 - i):
            exact = float(sympy.integrate(sympy.integrate(x ** i * y ** j, (y, 0, 1 - x)), (x, 0, 1)))
            approx = 0.5 * np.sum(r.weights * pts[:, 0] ** i * pts[:, 1] ** j)
            assert approx == pytest.approx(exact, abs=1e-15)


def test_vertex_rule_total_weight_and_bilinear_exactness():
    r = volume_quadrature("VertexQuad")
    assert r.weights.sum() == pytest.approx(1.0)
    f = lambda x, y: 1 + 2 * x - y + 3 * x * y
    assert np.sum(r.weights * f(r.points[:, 0], r.points[:, 1])) == pytest.approx(1 + 1 - 0.5 + 0.75)


def test_gauss3x3_integrates_x2y2():
    r = volume_quadrature("GaussQuad3x3")
    assert np.sum(r.weights * r.points[:, 0] ** 2 * r.points[:, 1] ** 2) == pytest.approx(1 / 9, abs=1e-15)


def test_unknown_rule():
    with pytest.raises(UnknownRule):
        volume_quadrature("Simpson")


def test_dof_counts_and_maps():
    m = fluid_box_mesh(3, 2)
    V, Q = vector_q2_space(m), disc_p1_space(m)
    assert V.n_dofs == 2 * 7 * 5
    assert Q.n_dofs == 18
    for S in (V, Q):
        used = np.unique(S.elem_dof_map)
        np.testing.assert_array_equal(used, np.arange(S.n_dofs))
    from fsidlm.mesh import quarter_annulus_mesh
    S = vector_q1_space(quarter_annulus_mesh(4, 3))
    assert S.n_dofs == 2 * 5 * 4


def test_boundary_sets_annulus_layout():
    V = vector_q2_space(fluid_box_mesh(2, 2))
    n = V.n_nodes
    xy = V.node_coords
    left = V.dofs("left_normal")
    assert np.all(left < n) and np.allclose(xy[left, 0], 0.0)
    bottom = V.dofs("bottom_normal")
    assert np.all(bottom >= n) and np.allclose(xy[bottom - n, 1], 0.0)
    top = V.dofs("top")
    assert top.size == 2 * 5
    assert V.dofs([]).size == 0
    with pytest.raises(UnknownBoundarySet):
        V.dofs("front")
