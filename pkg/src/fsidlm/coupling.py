"""
Fluid-solid coupling matrix ``L_f(X)`` with rows on the multiplier dofs and
columns on the fluid velocity dofs.

Two strategies:

``VertexRule``
    ``area(E)/4`` times the integrand at the four corners of every solid
    element; the fluid basis is evaluated at the located mapped corner.
``Intersection``
    the mapped element ``X(E)`` (straight edges) is clipped against every
    fluid cell it overlaps.  Each clipped polygon is pulled back to the
    reference square of ``E``, fanned into triangles around its barycenter and
    integrated with the 4-point cubic triangle rule.  Every point weight
    carries the Jacobian of ``E`` so the rule is exact for the Q1 x Q2
    integrand whenever ``X`` is affine on ``E``; on parallelograms the weight
    reduces to ``area(T_i) * omega_k``.

The intersection kernel runs element-parallel (numba ``prange``); each solid
element writes to its own slots, and the merge into CSR happens in a fixed
order, so the matrix is bitwise identical for any thread count.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
from numba import njit, prange

from .assembly import triplets_to_csr
from .errors import ClippingDegenerate, NoConvergence, PointOutsideDomain, UnknownRule
from .mesh import (INVERSE_TOL, LOCATE_TOL, QuadMesh, _clip_rect, _inverse_bilinear, locate_points,
                   quad_areas)
from .spaces import FeSpace, q2_basis

STRATEGIES = ("VertexRule", "Intersection")
AREA_CHECK_TOL = 1e-8

_TRI_BARY = np.array([[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6], [1 / 3, 1 / 3, 1 / 3]])
_TRI_W = np.array([25 / 48, 25 / 48, 25 / 48, -9 / 16])


def collapsed_gauss_triangle(n: int = 4):
    """Duffy-collapsed ``n x n`` Gauss rule in barycentric form, weights summing to one.

    Exact for polynomials of total degree ``2n - 2`` on a triangle.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    u, v, wt = u.ravel(), v.ravel(), (2.0 * wu * wv).ravel() * u.ravel()
    return np.column_stack([1.0 - u, u * (1.0 - v), u * v]), wt


# Triangle rules for the clipped pieces.  The four point rule is exact for
# cubics only; the product Q1 x Q2 integrand on an affine piece has degree 6,
# which the collapsed 4x4 rule integrates exactly.
INTERSECTION_RULES = {"four_point": (_TRI_BARY, _TRI_W), "collapsed_gauss": collapsed_gauss_triangle(4)}


@dataclass
class CouplingAssembly:
    strategy: str
    L_f: sp.csr_matrix
    stats: dict = field(default_factory=dict)


def mapped_positions(S: FeSpace, X, fluid_mesh: QuadMesh, clamp_tol: float = LOCATE_TOL) -> np.ndarray:
    """Nodal positions ``X(s_k)`` projected onto the fluid box.

    Points farther than ``clamp_tol`` outside the box raise
    :class:`PointOutsideDomain`.
    """
    n = S.n_nodes
    X = np.asarray(X, dtype=float)
    pos = np.column_stack([X[:n], X[n:2 * n]])
    d = fluid_mesh.domain
    lo = np.array([d.x_min, d.y_min])
    hi = np.array([d.x_max, d.y_max])
    out = np.maximum(lo - pos, 0.0) + np.maximum(pos - hi, 0.0)
    far = np.max(out, axis=1) > clamp_tol
    if np.any(far):
        k = int(np.flatnonzero(far)[0])
        raise PointOutsideDomain(f"solid node {k} mapped to {tuple(pos[k])}, outside the fluid box")
    return np.clip(pos, lo, hi)


def _triplets(rows_local, cols_local, vals, n_rows_scalar, n_cols_scalar):
    """Duplicate scalar local blocks onto both vector components."""
    R = np.concatenate([rows_local, rows_local + n_rows_scalar], axis=0)
    C = np.concatenate([cols_local, cols_local + n_cols_scalar], axis=0)
    Vv = np.concatenate([vals, vals], axis=0)
    return R, C, Vv


def assemble_coupling_vertex(V: FeSpace, S: FeSpace, X, clamp_tol: float = LOCATE_TOL) -> CouplingAssembly:
    t0 = time.perf_counter()
    fm = V.mesh
    pos = mapped_positions(S, X, fm, clamp_tol)
    areas = S.mesh.element_areas()
    enodes = S.elem_nodes  # (ne, 4)
    pts = pos[enodes].reshape(-1, 2)
    cells = locate_points(fm, pts)
    hx, hy = fm.cell_size
    ref = (pts - fm.cell_origin(cells)) / np.array([hx, hy])
    phi, _ = q2_basis(ref[:, 0], ref[:, 1])  # (ne*4, 9)
    w = np.repeat(areas / 4.0, 4)
    vals = w[:, None] * phi
    rows = np.broadcast_to(enodes.reshape(-1, 1), vals.shape)
    cols = V.elem_nodes[cells]
    R, C, Vv = _triplets(rows, cols, vals, S.n_nodes, V.n_nodes)
    L = triplets_to_csr(R, C, Vv, (S.n_dofs, V.n_dofs))
    stats = {"strategy": "VertexRule", "nnz": L.nnz, "polygons": 0, "triangles": 0,
             "quad_points": int(pts.shape[0]), "seconds": time.perf_counter() - t0}
    return CouplingAssembly("VertexRule", L, stats)


# ---------------------------------------------------------------------------
# intersection kernel
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _q2_vals(t, u, out):
    lx0 = (1 - t) * (1 - 2 * t)
    lx1 = 4 * t * (1 - t)
    lx2 = t * (2 * t - 1)
    ly0 = (1 - u) * (1 - 2 * u)
    ly1 = 4 * u * (1 - u)
    ly2 = u * (2 * u - 1)
    out[0] = ly0 * lx0
    out[1] = ly0 * lx1
    out[2] = ly0 * lx2
    out[3] = ly1 * lx0
    out[4] = ly1 * lx1
    out[5] = ly1 * lx2
    out[6] = ly2 * lx0
    out[7] = ly2 * lx1
    out[8] = ly2 * lx2


@njit(cache=True, nogil=True)
def _integrate_piece(rx, ry, m, Pq, Sq, cx0, cy0, hx, hy, tri_bary, tri_w, local, phi):
    """Add the fan-triangle quadrature of one pulled-back polygon to ``local``.

    Returns ``(reference area, number of triangles)``.
    """
    if m == 3:
        ntri = 1
    else:
        ntri = m
    bx = 0.0
    by = 0.0
    for k in range(m):
        bx += rx[k]
        by += ry[k]
    bx /= m
    by /= m
    area_sum = 0.0
    for t in range(ntri):
        if m == 3:
            ax_, ay_ = rx[0], ry[0]
            b1x, b1y = rx[1], ry[1]
            b2x, b2y = rx[2], ry[2]
        else:
            ax_, ay_ = bx, by
            b1x, b1y = rx[t], ry[t]
            b2x, b2y = rx[(t + 1) % m], ry[(t + 1) % m]
        tri_area = 0.5 * abs((b1x - ax_) * (b2y - ay_) - (b2x - ax_) * (b1y - ay_))
        area_sum += tri_area
        for k in range(tri_w.shape[0]):
            xi = tri_bary[k, 0] * ax_ + tri_bary[k, 1] * b1x + tri_bary[k, 2] * b2x
            eta = tri_bary[k, 0] * ay_ + tri_bary[k, 1] * b1y + tri_bary[k, 2] * b2y
            # Jacobian of the reference element map of E
            jx0 = (1 - eta) * (Sq[1, 0] - Sq[0, 0]) + eta * (Sq[2, 0] - Sq[3, 0])
            jy0 = (1 - eta) * (Sq[1, 1] - Sq[0, 1]) + eta * (Sq[2, 1] - Sq[3, 1])
            jx1 = (1 - xi) * (Sq[3, 0] - Sq[0, 0]) + xi * (Sq[2, 0] - Sq[1, 0])
            jy1 = (1 - xi) * (Sq[3, 1] - Sq[0, 1]) + xi * (Sq[2, 1] - Sq[1, 1])
            w = tri_area * tri_w[k] * abs(jx0 * jy1 - jx1 * jy0)
            z0 = (1 - xi) * (1 - eta)
            z1 = xi * (1 - eta)
            z2 = xi * eta
            z3 = (1 - xi) * eta
            px = z0 * Pq[0, 0] + z1 * Pq[1, 0] + z2 * Pq[2, 0] + z3 * Pq[3, 0]
            py = z0 * Pq[0, 1] + z1 * Pq[1, 1] + z2 * Pq[2, 1] + z3 * Pq[3, 1]
            _q2_vals((px - cx0) / hx, (py - cy0) / hy, phi)
            for b in range(9):
                wb = w * phi[b]
                local[0, b] += z0 * wb
                local[1, b] += z1 * wb
                local[2, b] += z2 * wb
                local[3, b] += z3 * wb
    return area_sum, ntri


@njit(cache=True, nogil=True)
def _is_convex(P):
    for k in range(4):
        a = P[(k + 3) % 4]
        b = P[k]
        c = P[(k + 1) % 4]
        if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) <= 0.0:
            return False
    return True


@njit(parallel=True, cache=True)
def _intersection_kernel(Pq_all, Sq_all, x_min, y_min, hx, hy, nx, ny, i0, i1, j0, j1, offsets,
                         tri_bary, tri_w, out_local, out_cell, out_used, elem_stats):
    ne = Pq_all.shape[0]
    ref_tri = np.array([[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
                        [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]]])
    tri_idx = np.array([[0, 1, 2], [0, 2, 3]])
    for e in prange(ne):
        Pq = Pq_all[e]
        Sq = Sq_all[e]
        px = np.empty(4)
        py = np.empty(4)
        outx = np.empty(24)
        outy = np.empty(24)
        rx = np.empty(24)
        ry = np.empty(24)
        phi = np.empty(9)
        convex = _is_convex(Pq)
        npieces = 1 if convex else 2
        n_poly = 0
        n_tri = 0
        ref_area = 0.0
        worst = 0.0
        slot = offsets[e]
        for j in range(j0[e], j1[e] + 1):
            for i in range(i0[e], i1[e] + 1):
                cx0 = x_min + i * hx
                cy0 = y_min + j * hy
                out_cell[slot] = j * nx + i
                local = out_local[slot]
                for piece in range(npieces):
                    if convex:
                        nv = 4
                        for k in range(4):
                            px[k] = Pq[k, 0]
                            py[k] = Pq[k, 1]
                    else:
                        nv = 3
                        for k in range(3):
                            px[k] = Pq[tri_idx[piece, k], 0]
                            py[k] = Pq[tri_idx[piece, k], 1]
                    m = _clip_rect(px, py, nv, cx0, cx0 + hx, cy0, cy0 + hy, outx, outy)
                    if m == 0:
                        continue
                    for k in range(m):
                        if convex:
                            xi, eta, res = _inverse_bilinear(Pq, outx[k], outy[k])
                            if res > worst:
                                worst = res
                        else:
                            # affine pull-back on the split triangle
                            ax_, ay_ = px[0], py[0]
                            e1x, e1y = px[1] - ax_, py[1] - ay_
                            e2x, e2y = px[2] - ax_, py[2] - ay_
                            det = e1x * e2y - e2x * e1y
                            qx, qy = outx[k] - ax_, outy[k] - ay_
                            l1 = (qx * e2y - e2x * qy) / det
                            l2 = (e1x * qy - qx * e1y) / det
                            l0 = 1.0 - l1 - l2
                            rt = ref_tri[piece]
                            xi = l0 * rt[0, 0] + l1 * rt[1, 0] + l2 * rt[2, 0]
                            eta = l0 * rt[0, 1] + l1 * rt[1, 1] + l2 * rt[2, 1]
                        rx[k] = xi
                        ry[k] = eta
                    a, t = _integrate_piece(rx, ry, m, Pq, Sq, cx0, cy0, hx, hy, tri_bary, tri_w,
                                            local, phi)
                    ref_area += a
                    n_tri += t
                    n_poly += 1
                    out_used[slot] = True
                slot += 1
        elem_stats[e, 0] = n_poly
        elem_stats[e, 1] = n_tri
        elem_stats[e, 2] = ref_area
        elem_stats[e, 3] = worst
        elem_stats[e, 4] = 0.0 if convex else 1.0


def _candidate_ranges(Pq, fm: QuadMesh):
    d = fm.domain
    hx, hy = fm.cell_size
    lo = Pq.min(axis=1)
    hi = Pq.max(axis=1)
    i0 = np.clip(np.floor((lo[:, 0] - d.x_min) / hx).astype(np.int64), 0, fm.nx - 1)
    i1 = np.clip(np.floor((hi[:, 0] - d.x_min) / hx).astype(np.int64), 0, fm.nx - 1)
    j0 = np.clip(np.floor((lo[:, 1] - d.y_min) / hy).astype(np.int64), 0, fm.ny - 1)
    j1 = np.clip(np.floor((hi[:, 1] - d.y_min) / hy).astype(np.int64), 0, fm.ny - 1)
    counts = (i1 - i0 + 1) * (j1 - j0 + 1)
    offsets = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return i0, i1, j0, j1, offsets


def assemble_coupling_intersection(V: FeSpace, S: FeSpace, X, clamp_tol: float = LOCATE_TOL,
                                   threads: int | None = None, rule: str = "collapsed_gauss") -> CouplingAssembly:
    t0 = time.perf_counter()
    if rule not in INTERSECTION_RULES:
        raise UnknownRule(f"unknown intersection rule {rule!r}")
    tri_bary, tri_w = INTERSECTION_RULES[rule]
    fm = V.mesh
    pos = mapped_positions(S, X, fm, clamp_tol)
    Pq = np.ascontiguousarray(pos[S.elem_nodes])
    Sq = np.ascontiguousarray(S.mesh.element_quads())
    i0, i1, j0, j1, offsets = _candidate_ranges(Pq, fm)
    ncand = int(offsets[-1])
    out_local = np.zeros((ncand, 4, 9))
    out_cell = np.zeros(ncand, dtype=np.int64)
    out_used = np.zeros(ncand, dtype=np.bool_)
    elem_stats = np.zeros((len(Pq), 5))
    d = fm.domain
    hx, hy = fm.cell_size
    prev = numba.get_num_threads()
    if threads is not None:
        numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
    try:
        _intersection_kernel(Pq, Sq, d.x_min, d.y_min, hx, hy, fm.nx, fm.ny, i0, i1, j0, j1, offsets,
                             tri_bary, tri_w, out_local, out_cell, out_used, elem_stats)
    finally:
        numba.set_num_threads(prev)
    worst = elem_stats[:, 3].max(initial=0.0)
    if worst > INVERSE_TOL:
        raise NoConvergence(f"pull-back of clipped vertices failed (residual {worst:.2e})")
    dev = np.abs(elem_stats[:, 2] - 1.0)
    if dev.max(initial=0.0) > AREA_CHECK_TOL:
        e = int(np.argmax(dev))
        raise ClippingDegenerate(
            f"solid element {e}: pulled-back pieces cover {elem_stats[e, 2]:.12f} of the reference cell")

    slot_elem = np.repeat(np.arange(len(Pq)), np.diff(offsets))
    used = np.flatnonzero(out_used)
    elems = slot_elem[used]
    cells = out_cell[used]
    local = out_local[used]
    rows = np.broadcast_to(S.elem_nodes[elems][:, :, None], local.shape)
    cols = np.broadcast_to(V.elem_nodes[cells][:, None, :], local.shape)
    R, C, Vv = _triplets(rows, cols, local, S.n_nodes, V.n_nodes)
    L = triplets_to_csr(R, C, Vv, (S.n_dofs, V.n_dofs))
    stats = {"strategy": "Intersection", "nnz": L.nnz,
             "polygons": int(elem_stats[:, 0].sum()), "triangles": int(elem_stats[:, 1].sum()),
             "quad_points": len(tri_w) * int(elem_stats[:, 1].sum()),
             "nonconvex": int(elem_stats[:, 4].sum()),
             "area_ratio": elem_stats[:, 2].copy(),
             "seconds": time.perf_counter() - t0}
    return CouplingAssembly("Intersection", L, stats)


def assemble_coupling(strategy: str, V: FeSpace, S: FeSpace, X, **kw) -> CouplingAssembly:
    if strategy == "VertexRule":
        kw.pop("threads", None)
        kw.pop("rule", None)
        return assemble_coupling_vertex(V, S, X, **kw)
    if strategy == "Intersection":
        return assemble_coupling_intersection(V, S, X, **kw)
    raise ValueError(f"unknown coupling strategy {strategy!r}")


def solid_reference_areas(S: FeSpace) -> np.ndarray:
    return quad_areas(S.mesh.element_quads())
