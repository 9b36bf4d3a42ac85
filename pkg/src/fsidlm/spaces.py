"""
Finite element spaces: vector Q2 velocity, discontinuous P1 pressure and
vector Q1 for the solid map and the multiplier.

Vector dofs are stored component-blocked: ``dof = c * n_nodes + node``.
Local orderings:

* Q1 -- the four element corners, counterclockwise from reference ``(0,0)``.
* Q2 -- the 3x3 lexicographic node grid, ``a = 3 * b_eta + b_xi``.
* P1 (discontinuous) -- ``{1, (x - x_c)/h_x, (y - y_c)/h_y}``; on the uniform
  fluid grid this is ``{1, xi - 1/2, eta - 1/2}`` in every cell.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import UnknownBoundarySet, UnknownRule
from .mesh import QuadMesh


class SpaceKind(Enum):
    VECTOR_Q2 = "VectorQ2"
    DISC_P1 = "DiscP1"
    VECTOR_Q1 = "VectorQ1"


# ---------------------------------------------------------------------------
# reference basis functions on [0,1]^2
# ---------------------------------------------------------------------------

def q1_basis(xi, eta):
    """Values ``(..., 4)`` and reference gradients ``(..., 4, 2)``."""
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    a, b = 1.0 - xi, 1.0 - eta
    vals = np.stack([a * b, xi * b, xi * eta, a * eta], axis=-1)
    dxi = np.stack([-b, b, eta, -eta], axis=-1)
    deta = np.stack([-a, -xi, xi, a], axis=-1)
    return vals, np.stack([dxi, deta], axis=-1)


def _lagrange2(t):
    t = np.asarray(t, dtype=float)
    v = np.stack([(1 - t) * (1 - 2 * t), 4 * t * (1 - t), t * (2 * t - 1)], axis=-1)
    d = np.stack([4 * t - 3, 4 - 8 * t, 4 * t - 1], axis=-1)
    return v, d


def q2_basis(xi, eta):
    """Values ``(..., 9)`` and reference gradients ``(..., 9, 2)``."""
    vx, dx = _lagrange2(xi)
    vy, dy = _lagrange2(eta)
    vals = (vy[..., :, None] * vx[..., None, :]).reshape(vx.shape[:-1] + (9,))
    gxi = (vy[..., :, None] * dx[..., None, :]).reshape(vals.shape)
    geta = (dy[..., :, None] * vx[..., None, :]).reshape(vals.shape)
    return vals, np.stack([gxi, geta], axis=-1)


def p1_basis(xi, eta):
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    vals = np.stack([np.ones_like(xi), xi - 0.5, eta - 0.5], axis=-1)
    g = np.zeros(vals.shape + (2,))
    g[..., 1, 0] = 1.0
    g[..., 2, 1] = 1.0
    return vals, g


Q2_NODE_OFFSETS = np.array([[bx, by] for by in range(3) for bx in range(3)])


# ---------------------------------------------------------------------------
# spaces
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FeSpace:
    kind: SpaceKind
    mesh: QuadMesh
    n_nodes: int
    node_coords: np.ndarray
    elem_nodes: np.ndarray
    n_components: int
    boundary_dof_sets: dict = field(default_factory=dict)

    @property
    def n_dofs(self) -> int:
        return self.n_components * self.n_nodes

    @property
    def n_local(self) -> int:
        return self.elem_nodes.shape[1]

    @property
    def elem_dof_map(self) -> np.ndarray:
        """Global dofs per element, component-blocked locally as well."""
        return np.concatenate([self.elem_nodes + c * self.n_nodes
                               for c in range(self.n_components)], axis=1)

    def basis(self, xi, eta):
        if self.kind is SpaceKind.VECTOR_Q2:
            return q2_basis(xi, eta)
        if self.kind is SpaceKind.VECTOR_Q1:
            return q1_basis(xi, eta)
        return p1_basis(xi, eta)

    def dofs(self, names) -> np.ndarray:
        if isinstance(names, str):
            names = [names]
        out = []
        for name in names:
            if name not in self.boundary_dof_sets:
                raise UnknownBoundarySet(f"{name!r} is not a boundary set of {self.kind.value}")
            out.append(self.boundary_dof_sets[name])
        if not out:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(out))


def _edge_sets(n_nodes, nxn, nyn):
    """Node indices on the four edges of an ``nxn x nyn`` node grid."""
    idx = np.arange(n_nodes).reshape(nyn, nxn)
    return {"left": idx[:, 0], "right": idx[:, -1], "bottom": idx[0, :], "top": idx[-1, :]}


def _vector_boundary_sets(n_nodes, nxn, nyn):
    edges = _edge_sets(n_nodes, nxn, nyn)
    normal_comp = {"left": 0, "right": 0, "bottom": 1, "top": 1}
    sets = {}
    for name, nodes in edges.items():
        sets[name] = np.concatenate([nodes, nodes + n_nodes])
        sets[f"{name}_normal"] = nodes + normal_comp[name] * n_nodes
        sets[f"{name}_tangential"] = nodes + (1 - normal_comp[name]) * n_nodes
    sets["boundary"] = np.unique(np.concatenate([sets[k] for k in ("left", "right", "bottom", "top")]))
    return sets


def vector_q2_space(mesh: QuadMesh) -> FeSpace:
    if not mesh.is_fluid_box:
        raise TypeError("the Q2 velocity space lives on the fluid box mesh")
    nx, ny = mesh.nx, mesh.ny
    nxn, nyn = 2 * nx + 1, 2 * ny + 1
    d = mesh.domain
    X, Y = np.meshgrid(np.linspace(d.x_min, d.x_max, nxn), np.linspace(d.y_min, d.y_max, nyn))
    coords = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    base = (2 * j * nxn + 2 * i).ravel()
    elem_nodes = base[:, None] + (Q2_NODE_OFFSETS[:, 1] * nxn + Q2_NODE_OFFSETS[:, 0])[None, :]
    n = nxn * nyn
    return FeSpace(SpaceKind.VECTOR_Q2, mesh, n, coords, elem_nodes, 2,
                   _vector_boundary_sets(n, nxn, nyn))


def disc_p1_space(mesh: QuadMesh) -> FeSpace:
    if not mesh.is_fluid_box:
        raise TypeError("the P1 pressure space lives on the fluid box mesh")
    ne = mesh.n_elements
    elem_nodes = np.arange(3 * ne).reshape(ne, 3)
    centers = mesh.vertices[mesh.elem_to_vertex].mean(axis=1)
    return FeSpace(SpaceKind.DISC_P1, mesh, 3 * ne, np.repeat(centers, 3, axis=0), elem_nodes, 1)


def vector_q1_space(mesh: QuadMesh) -> FeSpace:
    n = mesh.n_vertices
    return FeSpace(SpaceKind.VECTOR_Q1, mesh, n, mesh.vertices, mesh.elem_to_vertex, 2,
                   _vector_boundary_sets(n, mesh.nx + 1, mesh.ny + 1))


def eval_basis(space: FeSpace, elem: int, ref_pt):
    """Scalar basis values and reference gradients at ``ref_pt`` on ``elem``.

    Every element shares the reference functions in this implementation, so
    ``elem`` only selects which global dofs the values belong to
    (``space.elem_nodes[elem]``).
    """
    if not 0 <= elem < space.mesh.n_elements:
        raise IndexError(f"element {elem} out of range")
    xi, eta = ref_pt
    return space.basis(xi, eta)


def pressure_means(Q: FeSpace) -> np.ndarray:
    """Weights ``w`` with ``mean(p) = w @ p`` for a discontinuous P1 field."""
    areas = Q.mesh.element_areas()
    w = np.zeros(Q.n_dofs)
    w[Q.elem_nodes[:, 0]] = areas / areas.sum()
    return w


def constant_pressure_vector(Q: FeSpace) -> np.ndarray:
    v = np.zeros(Q.n_dofs)
    v[Q.elem_nodes[:, 0]] = 1.0
    return v


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Points in reference coordinates and weights summing to the cell measure.

    Quad rules use ``(xi, eta)`` on ``[0,1]^2``; the triangle rule stores
    barycentric coordinates and weights that sum to one (multiply by the
    triangle area).
    """
    points: np.ndarray
    weights: np.ndarray


def _gauss3x3():
    g = np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)])
    w = np.array([5.0, 8.0, 5.0]) / 9.0
    x = 0.5 * (g + 1.0)
    w = 0.5 * w
    X, Y = np.meshgrid(x, x, indexing="xy")
    W = np.outer(w, w)
    return QuadratureRule(np.column_stack([X.ravel(), Y.ravel()]), W.ravel())


_RULES = {
    "GaussQuad3x3": _gauss3x3,
    "VertexQuad": lambda: QuadratureRule(
        np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), np.full(4, 0.25)),
    "Triangle4pt": lambda: QuadratureRule(
        np.array([[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6], [1 / 3, 1 / 3, 1 / 3]]),
        np.array([25 / 48, 25 / 48, 25 / 48, -9 / 16])),
}


def volume_quadrature(kind: str) -> QuadratureRule:
    try:
        return _RULES[kind]()
    except KeyError:
        raise UnknownRule(f"unknown quadrature rule {kind!r}") from None


def gauss_legendre_square(n: int) -> QuadratureRule:
    """Tensor Gauss rule with ``n`` points per direction on ``[0,1]^2``."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    X, Y = np.meshgrid(x, x, indexing="xy")
    return QuadratureRule(np.column_stack([X.ravel(), Y.ravel()]), np.outer(w, w).ravel())


# ---------------------------------------------------------------------------
# boundary conditions
# ---------------------------------------------------------------------------

def apply_dirichlet(space: FeSpace, named_sets, system):
    """Eliminate homogeneous velocity constraints from a block system.

    Constrained rows and columns are zeroed with a unit diagonal and zero
    right-hand side.  ``named_sets`` are keys of ``space.boundary_dof_sets``.
    """
    dofs = space.dofs(list(named_sets))
    if dofs.size == 0:
        return system
    return system.with_velocity_constraints(dofs)
