"""
Assembly of the time independent blocks and of the solid stiffness.

All element loops are vectorized over elements with ``einsum``; triplets are
merged into CSR by :func:`triplets_to_csr`, which orders duplicates by
(row, column, input position) so the result does not depend on how the
triplets were produced.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import MeshMismatch, NonFiniteValue
from .spaces import (FeSpace, SpaceKind, gauss_legendre_square, p1_basis, q1_basis, q2_basis,
                     volume_quadrature)

CsrMatrix = sp.csr_matrix

EXP_OVERFLOW = 700.0


def triplets_to_csr(rows, cols, vals, shape) -> sp.csr_matrix:
    """Sum duplicate triplets in a fixed order and build a CSR matrix."""
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    if rows.size == 0:
        return sp.csr_matrix(shape)
    order = np.lexsort((cols, rows))
    r, c, v = rows[order], cols[order], vals[order]
    new = np.empty(r.size, dtype=bool)
    new[0] = True
    new[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
    starts = np.flatnonzero(new)
    summed = np.add.reduceat(v, starts)
    ur, uc = r[starts], c[starts]
    indptr = np.zeros(shape[0] + 1, dtype=np.int64)
    np.add.at(indptr, ur + 1, 1)
    np.cumsum(indptr, out=indptr)
    return sp.csr_matrix((summed, uc, indptr), shape=shape)


def _scatter(elem_rows, elem_cols, local, shape):
    """Build CSR from per-element dense blocks ``local[e, i, j]``."""
    ne, nr = elem_rows.shape
    nc = elem_cols.shape[1]
    if local.ndim == 2:
        local = np.broadcast_to(local, (ne, nr, nc))
    R = np.broadcast_to(elem_rows[:, :, None], (ne, nr, nc))
    C = np.broadcast_to(elem_cols[:, None, :], (ne, nr, nc))
    return triplets_to_csr(R, C, local, shape)


# ---------------------------------------------------------------------------
# fluid
# ---------------------------------------------------------------------------

class FluidBlocks(NamedTuple):
    A_f: sp.csr_matrix
    M_f: sp.csr_matrix
    K_f: sp.csr_matrix
    B: sp.csr_matrix


def fluid_local_matrices(hx: float, hy: float, nu: float):
    """Local mass (9x9 scalar), viscous (18x18) and divergence (3x18) blocks.

    The fluid grid is uniform, so a single set of local matrices serves every
    cell.
    """
    rule = volume_quadrature("GaussQuad3x3")
    xi, eta = rule.points[:, 0], rule.points[:, 1]
    N, dN = q2_basis(xi, eta)
    psi, _ = p1_basis(xi, eta)
    G = dN / np.array([hx, hy])
    w = rule.weights * hx * hy
    M = np.einsum("q,qa,qb->ab", w, N, N)
    GG = np.einsum("q,qai,qbi->ab", w, G, G)
    K = np.zeros((18, 18))
    for c in range(2):
        for d in range(2):
            cross = np.einsum("q,qa,qb->ab", w, G[:, :, d], G[:, :, c])
            K[9 * c:9 * c + 9, 9 * d:9 * d + 9] = 0.5 * nu * ((c == d) * GG + cross)
    Bl = np.concatenate([np.einsum("q,qk,qa->ka", w, psi, G[:, :, c]) for c in range(2)], axis=1)
    return M, K, Bl


def assemble_fluid_blocks(V: FeSpace, Q: FeSpace, rho: float, nu: float, dt: float) -> FluidBlocks:
    if V.mesh is not Q.mesh:
        raise MeshMismatch("velocity and pressure spaces must share the fluid mesh")
    if V.kind is not SpaceKind.VECTOR_Q2 or Q.kind is not SpaceKind.DISC_P1:
        raise MeshMismatch("expected a VectorQ2 velocity and DiscP1 pressure space")
    hx, hy = V.mesh.cell_size
    M9, K18, B3 = fluid_local_matrices(hx, hy, nu)
    M18 = np.zeros((18, 18))
    M18[:9, :9] = M9
    M18[9:, 9:] = M9
    vdofs = V.elem_dof_map
    n = V.n_dofs
    M_f = _scatter(vdofs, vdofs, M18, (n, n))
    K_f = _scatter(vdofs, vdofs, K18, (n, n))
    B = _scatter(Q.elem_dof_map, vdofs, B3, (Q.n_dofs, n))
    A_f = (rho / dt) * M_f + K_f
    return FluidBlocks(A_f.tocsr(), M_f, K_f, B)


def assemble_fluid_load(V: FeSpace, f, order: int = 5) -> np.ndarray:
    """Load vector ``(f, phi_i)`` for a callable ``f(x, y) -> (fx, fy)``."""
    rule = gauss_legendre_square(order)
    N, _ = q2_basis(rule.points[:, 0], rule.points[:, 1])
    hx, hy = V.mesh.cell_size
    origin = V.mesh.cell_origin(np.arange(V.mesh.n_elements))
    x = origin[:, None, 0] + hx * rule.points[None, :, 0]
    y = origin[:, None, 1] + hy * rule.points[None, :, 1]
    fx, fy = f(x, y)
    w = rule.weights * hx * hy
    out = np.zeros(V.n_dofs)
    for c, fc in enumerate((fx, fy)):
        loc = np.einsum("q,eq,qa->ea", w, np.broadcast_to(fc, x.shape), N)
        np.add.at(out, V.elem_nodes + c * V.n_nodes, loc)
    return out


# ---------------------------------------------------------------------------
# solid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaterialLaw:
    kind: str = "linear"
    kappa: float = 10.0
    gamma: float = 1.333
    eta: float = 9.242
    exp_form: str = "shifted"

    def __post_init__(self):
        if self.kind not in ("linear", "exponential"):
            raise ValueError(f"unknown material law {self.kind!r}")
        if self.kind == "linear" and not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.kind == "exponential" and not (self.gamma > 0 and self.eta > 0):
            raise ValueError("gamma and eta must be positive")
        if self.exp_form not in ("shifted", "literal"):
            raise ValueError("exp_form must be 'shifted' or 'literal'")

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    def exponent(self, trC):
        """``eta*(tr - 2)`` (shifted) or ``eta*tr - 2`` (literal)."""
        if self.exp_form == "shifted":
            return self.eta * (trC - 2.0)
        return self.eta * trC - 2.0


class SolidGeometry:
    """Quadrature data of a Q1 solid space, cached across Newton iterations."""

    def __init__(self, S: FeSpace, rule_name: str = "GaussQuad3x3"):
        if S.kind is not SpaceKind.VECTOR_Q1:
            raise MeshMismatch("solid operators need a VectorQ1 space")
        rule = volume_quadrature(rule_name)
        N, dN = q1_basis(rule.points[:, 0], rule.points[:, 1])
        quads = S.mesh.element_quads()
        J = np.einsum("eai,qaj->eqij", quads, dN)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        inv = np.empty_like(J)
        inv[..., 0, 0] = J[..., 1, 1] / det
        inv[..., 1, 1] = J[..., 0, 0] / det
        inv[..., 0, 1] = -J[..., 0, 1] / det
        inv[..., 1, 0] = -J[..., 1, 0] / det
        self.space = S
        self.N = N
        self.G = np.einsum("qaj,eqji->eqai", dN, inv)
        self.wdet = rule.weights[None, :] * det
        self.nodes = S.elem_nodes
        self.dofs = S.elem_dof_map

    def gather(self, X):
        n = self.space.n_nodes
        X = np.asarray(X, dtype=float)
        return np.stack([X[self.nodes], X[self.nodes + n]], axis=1)  # (e, c, a)

    def deformation_gradient(self, X):
        return np.einsum("eca,eqak->eqck", self.gather(X), self.G)


def _blockdiag2(local4, geom: SolidGeometry):
    ne = local4.shape[0]
    loc = np.zeros((ne, 8, 8))
    loc[:, :4, :4] = local4
    loc[:, 4:, 4:] = local4
    n = geom.space.n_dofs
    return _scatter(geom.dofs, geom.dofs, loc, (n, n))


def assemble_solid_linear(S: FeSpace, kappa: float, geom: SolidGeometry | None = None) -> sp.csr_matrix:
    geom = geom or SolidGeometry(S)
    Kl = kappa * np.einsum("eq,eqai,eqbi->eab", geom.wdet, geom.G, geom.G)
    return _blockdiag2(Kl, geom)


def assemble_multiplier_mass(S: FeSpace, geom: SolidGeometry | None = None) -> sp.csr_matrix:
    geom = geom or SolidGeometry(S)
    Ml = np.einsum("eq,qa,qb->eab", geom.wdet, geom.N, geom.N)
    return _blockdiag2(Ml, geom)


def solid_residual_and_tangent(S: FeSpace, law: MaterialLaw, X, geom: SolidGeometry | None = None,
                               K_linear: sp.csr_matrix | None = None):
    """Residual ``r_i = (P(F), grad chi_i)_B`` and its exact Jacobian.

    For the exponential law ``P = gamma * exp(arg) * F`` and the tangent acts
    as ``dP = gamma * exp(arg) * (dF + 2 eta (F:dF) F)``.
    """
    geom = geom or SolidGeometry(S)
    X = np.asarray(X, dtype=float)
    if law.is_linear:
        K = K_linear if K_linear is not None else assemble_solid_linear(S, law.kappa, geom)
        return K @ X, K
    F = geom.deformation_gradient(X)
    trC = np.einsum("eqck,eqck->eq", F, F)
    arg = law.exponent(trC)
    if not np.all(np.isfinite(arg)) or arg.max() > EXP_OVERFLOW:
        raise NonFiniteValue(f"exponential law overflow (max exponent {np.nanmax(arg):.1f})")
    g = law.gamma * np.exp(arg)
    wg = geom.wdet * g
    H = np.einsum("eqck,eqak->eqca", F, geom.G)  # F : (e_c x grad N_a)
    r_loc = np.einsum("eq,eqca->eca", wg, H).reshape(len(F), 8)
    n = S.n_dofs
    r = np.zeros(n)
    np.add.at(r, geom.dofs, r_loc)
    GG = np.einsum("eq,eqai,eqbi->eab", wg, geom.G, geom.G)
    T = 2.0 * law.eta * np.einsum("eq,eqca,eqdb->ecadb", wg, H, H)
    T[:, 0, :, 0, :] += GG
    T[:, 1, :, 1, :] += GG
    K_T = _scatter(geom.dofs, geom.dofs, T.reshape(len(F), 8, 8), (n, n))
    return r, K_T


def solid_energy(S: FeSpace, law: MaterialLaw, X, geom: SolidGeometry | None = None) -> float:
    geom = geom or SolidGeometry(S)
    F = geom.deformation_gradient(X)
    trC = np.einsum("eqck,eqck->eq", F, F)
    if law.is_linear:
        W = 0.5 * law.kappa * trC
    else:
        W = law.gamma / (2.0 * law.eta) * np.exp(law.exponent(trC))
    return float(np.sum(geom.wdet * W))


def write_matrix_market(path, A, comment: str = "") -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment)
