"""
Structured quadrilateral meshes and the planar geometry used by the coupling.

Vertices are numbered ``v(i, j) = j * (nx + 1) + i`` and element ``e = j * nx + i``
lists its corners counterclockwise: ``v(i,j), v(i+1,j), v(i+1,j+1), v(i,j+1)``.
The reference cell is ``[0, 1]^2`` and corner ``k`` of an element sits at
reference point ``(0,0), (1,0), (1,1), (0,1)`` respectively.

The low-level kernels (``_clip_rect``, ``_inverse_bilinear`` ...) are numba
compiled so the coupling assembly can call them from parallel loops; the public
functions wrap them with validation and exceptions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from numba import njit

from .errors import NoConvergence, PointOutsideDomain

LOCATE_TOL = 1e-12
MERGE_TOL = 1e-14
SLIVER_TOL = 1e-14
INVERSE_TOL = 1e-10
INVERSE_MAX_NEWTON = 50

REF_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


@dataclass(frozen=True)
class FluidBox:
    x_min: float
    x_max: float
    y_min: float
    y_max: float


@dataclass(frozen=True)
class SolidRect:
    x0: float
    x1: float
    y0: float
    y1: float


@dataclass(frozen=True)
class SolidQuarterAnnulus:
    r_in: float
    r_out: float


DomainKind = Union[FluidBox, SolidRect, SolidQuarterAnnulus]


@dataclass(frozen=True, eq=False)
class QuadMesh:
    nx: int
    ny: int
    vertices: np.ndarray
    elem_to_vertex: np.ndarray
    domain: DomainKind

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def n_vertices(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def is_fluid_box(self) -> bool:
        return isinstance(self.domain, FluidBox)

    @property
    def cell_size(self) -> tuple[float, float]:
        d = self._box()
        return (d.x_max - d.x_min) / self.nx, (d.y_max - d.y_min) / self.ny

    def _box(self) -> FluidBox:
        if not isinstance(self.domain, FluidBox):
            raise TypeError("operation requires a FluidBox mesh")
        return self.domain

    def element_quads(self) -> np.ndarray:
        """Corner coordinates, shape ``(n_elements, 4, 2)``."""
        return self.vertices[self.elem_to_vertex]

    def element_areas(self) -> np.ndarray:
        return quad_areas(self.element_quads())

    def cell_origin(self, elem):
        d = self._box()
        hx, hy = self.cell_size
        elem = np.asarray(elem)
        return np.stack([d.x_min + (elem % self.nx) * hx,
                         d.y_min + (elem // self.nx) * hy], axis=-1)


def _grid_connectivity(nx: int, ny: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    v0 = (j * (nx + 1) + i).ravel()
    return np.stack([v0, v0 + 1, v0 + nx + 2, v0 + nx + 1], axis=1)


def _tensor_vertices(xs, ys):
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


def fluid_box_mesh(nx: int, ny: int, box=(0.0, 1.0, 0.0, 1.0)) -> QuadMesh:
    x0, x1, y0, y1 = map(float, box)
    verts = _tensor_vertices(np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1))
    return QuadMesh(nx, ny, verts, _grid_connectivity(nx, ny), FluidBox(x0, x1, y0, y1))


def solid_rect_mesh(nx: int, ny: int, rect=(0.0, 0.4, 0.45, 0.55)) -> QuadMesh:
    x0, x1, y0, y1 = map(float, rect)
    verts = _tensor_vertices(np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1))
    return QuadMesh(nx, ny, verts, _grid_connectivity(nx, ny), SolidRect(x0, x1, y0, y1))


def quarter_annulus_mesh(nx: int, ny: int, r_in: float = 0.3, r_out: float = 0.5) -> QuadMesh:
    """``nx`` divisions along the angle, ``ny`` along the radius.

    The angle runs from pi/2 down to 0 with increasing ``i`` so that elements
    come out counterclockwise.
    """
    theta = 0.5 * np.pi * (1.0 - np.arange(nx + 1) / nx)
    r = np.linspace(r_in, r_out, ny + 1)
    T, R = np.meshgrid(theta, r, indexing="xy")
    verts = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()])
    # exact zeros on the symmetry axes
    verts[np.isclose(T.ravel(), 0.5 * np.pi), 0] = 0.0
    verts[T.ravel() == 0.0, 1] = 0.0
    return QuadMesh(nx, ny, verts, _grid_connectivity(nx, ny),
                    SolidQuarterAnnulus(float(r_in), float(r_out)))


def quad_areas(quads: np.ndarray) -> np.ndarray:
    """Signed shoelace areas of straight-edged quads ``(..., 4, 2)``."""
    x = quads[..., 0]
    y = quads[..., 1]
    return 0.5 * np.sum(x * np.roll(y, -1, axis=-1) - np.roll(x, -1, axis=-1) * y, axis=-1)


def polygon_area(poly) -> float:
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        return 0.0
    return float(quad_areas(poly[None])[0])


# ---------------------------------------------------------------------------
# point location
# ---------------------------------------------------------------------------

def locate_points(mesh: QuadMesh, pts) -> np.ndarray:
    """Vectorized :func:`locate_point`; returns flat element indices."""
    d = mesh._box()
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    hx, hy = mesh.cell_size
    bad = ((pts[:, 0] < d.x_min - LOCATE_TOL) | (pts[:, 0] > d.x_max + LOCATE_TOL)
           | (pts[:, 1] < d.y_min - LOCATE_TOL) | (pts[:, 1] > d.y_max + LOCATE_TOL))
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise PointOutsideDomain(f"point {tuple(pts[k])} lies outside the fluid box")
    i = np.clip(np.floor((pts[:, 0] - d.x_min) / hx).astype(np.int64), 0, mesh.nx - 1)
    j = np.clip(np.floor((pts[:, 1] - d.y_min) / hy).astype(np.int64), 0, mesh.ny - 1)
    return j * mesh.nx + i


def locate_point(mesh: QuadMesh, x) -> int:
    """Index of the fluid cell containing ``x``.

    Points on an interior edge go to the cell with the larger index; points
    within ``1e-12`` outside the box are clamped onto it.
    """
    return int(locate_points(mesh, np.asarray(x, dtype=float)[None])[0])


def cell_ij(mesh: QuadMesh, elem: int) -> tuple[int, int]:
    return elem % mesh.nx, elem // mesh.nx


# ---------------------------------------------------------------------------
# bilinear maps
# ---------------------------------------------------------------------------

def forward_bilinear(quad, xi, eta):
    quad = np.asarray(quad, dtype=float)
    xi = np.asarray(xi, dtype=float)[..., None]
    eta = np.asarray(eta, dtype=float)[..., None]
    return ((1 - xi) * (1 - eta) * quad[0] + xi * (1 - eta) * quad[1]
            + xi * eta * quad[2] + (1 - xi) * eta * quad[3])


@njit(cache=True, nogil=True)
def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


@njit(cache=True, nogil=True)
def _inverse_bilinear(q, x, y):
    """Returns ``(xi, eta, residual)``; residual is the inf-norm mismatch."""
    ax = q[1, 0] - q[0, 0]
    ay = q[1, 1] - q[0, 1]
    bx = q[3, 0] - q[0, 0]
    by = q[3, 1] - q[0, 1]
    cx = q[0, 0] - q[1, 0] + q[2, 0] - q[3, 0]
    cy = q[0, 1] - q[1, 1] + q[2, 1] - q[3, 1]
    dx = x - q[0, 0]
    dy = y - q[0, 1]
    scale = abs(ax) + abs(ay) + abs(bx) + abs(by)

    A = _cross(ax, ay, cx, cy)
    B = _cross(ax, ay, bx, by) - _cross(dx, dy, cx, cy)
    C = _cross(bx, by, dx, dy)
    xi = 0.5
    if abs(A) <= 1e-14 * scale * scale:
        if B != 0.0:
            xi = -C / B
    else:
        disc = B * B - 4.0 * A * C
        if disc < 0.0:
            disc = 0.0
        sq = np.sqrt(disc)
        qq = -0.5 * (B + sq) if B >= 0.0 else -0.5 * (B - sq)
        r1 = qq / A
        r2 = C / qq if qq != 0.0 else r1
        # pick the root closest to the unit interval
        d1 = max(0.0, -r1, r1 - 1.0)
        d2 = max(0.0, -r2, r2 - 1.0)
        xi = r1 if d1 <= d2 else r2
    denx = bx + cx * xi
    deny = by + cy * xi
    if abs(denx) >= abs(deny):
        eta = (dx - ax * xi) / denx if denx != 0.0 else 0.5
    else:
        eta = (dy - ay * xi) / deny

    res = 0.0
    for it in range(INVERSE_MAX_NEWTON + 1):
        fx = ax * xi + bx * eta + cx * xi * eta - dx
        fy = ay * xi + by * eta + cy * xi * eta - dy
        res = max(abs(fx), abs(fy))
        if res <= 1e-15 * max(1.0, scale) or it == INVERSE_MAX_NEWTON:
            break
        j11 = ax + cx * eta
        j12 = bx + cx * xi
        j21 = ay + cy * eta
        j22 = by + cy * xi
        det = j11 * j22 - j12 * j21
        if det == 0.0:
            break
        dxi = (j22 * fx - j12 * fy) / det
        deta = (-j21 * fx + j11 * fy) / det
        xi -= dxi
        eta -= deta
        if abs(dxi) + abs(deta) < 1e-17:
            fx = ax * xi + bx * eta + cx * xi * eta - dx
            fy = ay * xi + by * eta + cy * xi * eta - dy
            res = max(abs(fx), abs(fy))
            break
    return xi, eta, res


def inverse_bilinear(quad, x) -> tuple[float, float]:
    """Reference coordinates ``(xi, eta)`` of ``x`` in a counterclockwise quad.

    Solved in closed form (a quadratic in ``xi``) and polished by Newton.
    """
    quad = np.ascontiguousarray(quad, dtype=float)
    xi, eta, res = _inverse_bilinear(quad, float(x[0]), float(x[1]))
    if not res <= INVERSE_TOL:
        raise NoConvergence(f"inverse bilinear map residual {res:.3e} at {tuple(x)}")
    return float(xi), float(eta)


# ---------------------------------------------------------------------------
# clipping and triangulation
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _clip_halfplane(inx, iny, n, axis, value, keep_greater, outx, outy):
    m = 0
    if n == 0:
        return 0
    sx = inx[n - 1]
    sy = iny[n - 1]
    s_val = sx if axis == 0 else sy
    s_in = s_val >= value if keep_greater else s_val <= value
    for k in range(n):
        ex = inx[k]
        ey = iny[k]
        e_val = ex if axis == 0 else ey
        e_in = e_val >= value if keep_greater else e_val <= value
        if e_in != s_in:
            t = (value - s_val) / (e_val - s_val)
            if axis == 0:
                outx[m] = value
                outy[m] = sy + t * (ey - sy)
            else:
                outx[m] = sx + t * (ex - sx)
                outy[m] = value
            m += 1
        if e_in:
            outx[m] = ex
            outy[m] = ey
            m += 1
        sx = ex
        sy = ey
        s_val = e_val
        s_in = e_in
    return m


@njit(cache=True, nogil=True)
def _poly_area(px, py, n):
    a = 0.0
    for k in range(n):
        k1 = (k + 1) % n
        a += px[k] * py[k1] - px[k1] * py[k]
    return 0.5 * a


@njit(cache=True, nogil=True)
def _clip_rect(px, py, n, x0, x1, y0, y1, outx, outy):
    """Sutherland-Hodgman against ``[x0,x1]x[y0,y1]``; returns vertex count.

    Output is written to ``outx/outy``; near-duplicate vertices are merged and
    slivers below ``SLIVER_TOL * cell area`` return 0.
    """
    cap = outx.shape[0]
    ax = np.empty(cap)
    ay = np.empty(cap)
    bx = np.empty(cap)
    by = np.empty(cap)
    m = _clip_halfplane(px, py, n, 0, x0, True, ax, ay)
    m = _clip_halfplane(ax, ay, m, 0, x1, False, bx, by)
    m = _clip_halfplane(bx, by, m, 1, y0, True, ax, ay)
    m = _clip_halfplane(ax, ay, m, 1, y1, False, bx, by)
    k = 0
    for i in range(m):
        if k > 0 and abs(bx[i] - outx[k - 1]) <= MERGE_TOL and abs(by[i] - outy[k - 1]) <= MERGE_TOL:
            continue
        outx[k] = bx[i]
        outy[k] = by[i]
        k += 1
    while k > 1 and abs(outx[k - 1] - outx[0]) <= MERGE_TOL and abs(outy[k - 1] - outy[0]) <= MERGE_TOL:
        k -= 1
    if k < 3:
        return 0
    if abs(_poly_area(outx, outy, k)) < SLIVER_TOL * (x1 - x0) * (y1 - y0):
        return 0
    return k


def clip_polygon_to_cell(poly, cell) -> np.ndarray:
    """Clip a convex counterclockwise polygon to ``cell = (x0, x1, y0, y1)``.

    Returns an ``(m, 2)`` array, empty (``m == 0``) when nothing survives.
    """
    poly = np.asarray(poly, dtype=float)
    n = len(poly)
    px = np.ascontiguousarray(poly[:, 0])
    py = np.ascontiguousarray(poly[:, 1])
    cap = 2 * n + 8
    outx = np.empty(cap)
    outy = np.empty(cap)
    x0, x1, y0, y1 = map(float, cell)
    m = _clip_rect(px, py, n, x0, x1, y0, y1, outx, outy)
    return np.column_stack([outx[:m], outy[:m]])


def triangulate_from_barycenter(poly) -> list[np.ndarray]:
    """Fan of triangles around the vertex mean; triangles pass through."""
    poly = np.asarray(poly, dtype=float)
    if len(poly) == 3:
        return [poly.copy()]
    c = poly.mean(axis=0)
    n = len(poly)
    return [np.array([c, poly[k], poly[(k + 1) % n]]) for k in range(n)]
