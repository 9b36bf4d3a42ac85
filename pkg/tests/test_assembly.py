import numpy as np
import pytest
import scipy.sparse as sp

from fsidlm.assembly import (MaterialLaw, SolidGeometry, assemble_fluid_blocks, assemble_multiplier_mass,
                             assemble_solid_linear, solid_residual_and_tangent, solid_energy)
from fsidlm.errors import NonFiniteValue
from fsidlm.mesh import fluid_box_mesh, quarter_annulus_mesh, solid_rect_mesh
from fsidlm.spaces import disc_p1_space, vector_q1_space, vector_q2_space


def _sym(A):
    A = sp.csr_matrix(A)
    return abs(A - A.T).max() <= 1e-12 * abs(A).max()


def test_fluid_blocks_basic_identities():
    m = fluid_box_mesh(1, 1)
    V, Q = vector_q2_space(m), disc_p1_space(m)
    fb = assemble_fluid_blocks(V, Q, 1.0, 0.1, 0.01)
    c = np.concatenate([np.full(V.n_nodes, 0.7), np.full(V.n_nodes, -1.3)])
    assert np.abs(fb.K_f @ c).max() < 1e-14
    assert fb.M_f.sum() == pytest.approx(2.0)
    u = np.concatenate([V.node_coords[:, 0], np.zeros(V.n_nodes)])
    assert (fb.B @ u)[0] == pytest.approx(1.0)
    for A in (fb.A_f, fb.M_f, fb.K_f):
        assert _sym(A)


def test_fluid_mass_row_sums():
    m = fluid_box_mesh(3, 3, (0, 2, 0, 1))
    V, Q = vector_q2_space(m), disc_p1_space(m)
    fb = assemble_fluid_blocks(V, Q, 1.0, 0.1, 0.01)
    assert fb.M_f.sum() == pytest.approx(2 * 2.0)
    assert np.linalg.eigvalsh(fb.M_f.toarray()).min() > 0


def test_solid_linear_kernel_and_energy():
    S = vector_q1_space(solid_rect_mesh(1, 1, (0, 1, 0, 1)))
    K = assemble_solid_linear(S, 10.0)
    assert np.abs(K @ np.concatenate([np.full(4, 2.0), np.full(4, -1.0)])).max() < 1e-13
    X = np.concatenate([S.node_coords[:, 0], np.zeros(4)])
    assert 0.5 * X @ (K @ X) == pytest.approx(5.0)
    assert _sym(K)


def test_multiplier_mass_unit_square():
    S = vector_q1_space(solid_rect_mesh(1, 1, (0, 1, 0, 1)))
    L = assemble_multiplier_mass(S).toarray()
    # lexicographic node order: 0-3 and 1-2 are the diagonal pairs
    m4 = np.array([[4, 2, 2, 1], [2, 4, 1, 2], [2, 1, 4, 2], [1, 2, 2, 4]]) / 36
    np.testing.assert_allclose(L, np.kron(np.eye(2), m4), atol=1e-15)


def test_multiplier_mass_annulus_total():
    exact = 2 * np.pi / 4 * (0.25 - 0.09)
    errs = []
    for n in (8, 16, 32):
        L = assemble_multiplier_mass(vector_q1_space(quarter_annulus_mesh(n, n // 2)))
        errs.append(abs(L.sum() - exact))
        assert _sym(L)
    assert errs[2] < errs[1] < errs[0]
    assert np.log2(errs[1] / errs[2]) > 1.9


def test_linear_tangent_is_stiffness(annulus_space):
    law = MaterialLaw("linear", 10.0)
    K = assemble_solid_linear(annulus_space, 10.0)
    X = np.random.default_rng(0).standard_normal(annulus_space.n_dofs)
    r, KT = solid_residual_and_tangent(annulus_space, law, X)
    assert abs(KT - K).max() <= 1e-14
    np.testing.assert_allclose(r, K @ X, atol=1e-12)


def test_exponential_identity_residual_is_gamma_divergence_load(bar_space):
    law = MaterialLaw("exponential", gamma=1.333, eta=9.242)
    X = np.concatenate([bar_space.node_coords[:, 0], bar_space.node_coords[:, 1]])
    r, _ = solid_residual_and_tangent(bar_space, law, X)
    # P = gamma*I, so r_i = gamma * int div(chi_i) = gamma * K_1 X where K_1 is the kappa=1 Laplacian
    K1 = assemble_solid_linear(bar_space, 1.0)
    np.testing.assert_allclose(r, 1.333 * (K1 @ X), atol=1e-12)


def test_exponential_translation_invariance(bar_space, rng):
    law = MaterialLaw("exponential", gamma=1.333, eta=9.242)
    X0 = np.concatenate([bar_space.node_coords[:, 0], bar_space.node_coords[:, 1]])
    X = X0 + 0.01 * rng.standard_normal(X0.size)
    r, _ = solid_residual_and_tangent(bar_space, law, X)
    n = bar_space.n_nodes
    assert abs(r[:n].sum()) <= 1e-12 * max(1.0, np.abs(r).max())
    assert abs(r[n:].sum()) <= 1e-12 * max(1.0, np.abs(r).max())


@pytest.mark.parametrize("kind", ["linear", "exponential"])
def test_tangent_matches_finite_differences(kind, bar_space, rng):
    law = MaterialLaw(kind, kappa=10.0, gamma=1.333, eta=9.242)
    geom = SolidGeometry(bar_space)
    X0 = np.concatenate([bar_space.node_coords[:, 0], bar_space.node_coords[:, 1]])
    for _ in range(10):
        # perturbation well below the element height keeps F moderate
        X = X0 + 0.003 * rng.standard_normal(X0.size)
        d = rng.standard_normal(X0.size)
        _, K = solid_residual_and_tangent(bar_space, law, X, geom)
        h = 1e-7  # central differences; truncation error is O(h^2)
        fd = (solid_residual_and_tangent(bar_space, law, X + h * d, geom)[0]
              - solid_residual_and_tangent(bar_space, law, X - h * d, geom)[0]) / (2 * h)
        assert np.linalg.norm(K @ d - fd) <= 1e-6 * np.linalg.norm(fd)


def test_residual_is_energy_gradient(bar_space, rng):
    law = MaterialLaw("exponential", gamma=1.333, eta=9.242)
    X = np.concatenate([bar_space.node_coords[:, 0], bar_space.node_coords[:, 1]]) \
        + 0.003 * rng.standard_normal(2 * bar_space.n_nodes)
    d = rng.standard_normal(X.size)
    r, _ = solid_residual_and_tangent(bar_space, law, X)
    h = 1e-6
    fd = (solid_energy(bar_space, law, X + h * d) - solid_energy(bar_space, law, X - h * d)) / (2 * h)
    assert r @ d == pytest.approx(fd, rel=1e-6)


def test_exponential_overflow_guard(bar_space):
    law = MaterialLaw("exponential", gamma=1.0, eta=50.0)
    X = 10 * np.concatenate([bar_space.node_coords[:, 0], bar_space.node_coords[:, 1]])
    with pytest.raises(NonFiniteValue):
        solid_residual_and_tangent(bar_space, law, X)


def test_material_law_validation():
    with pytest.raises(ValueError):
        MaterialLaw("linear", kappa=-1.0)
    with pytest.raises(ValueError):
        MaterialLaw("plastic")
