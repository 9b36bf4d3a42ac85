"""
Monolithic block operator, exact block factorizations and preconditioned GMRES.

Unknowns are ordered ``(u, p, X, lambda)`` and the operator is::

    [ A_f   -B^T   0        L_f^T  ]
    [ -B     0     0        0      ]
    [ 0      0     K       -L_s^T  ]
    [ L_f    0    -L_s/dt   0      ]

The two diagonal blocks ``A11 = [[A_f, -B^T], [-B, 0]]`` and
``A22 = [[K, -L_s^T], [-L_s/dt, 0]]`` are factored with SuperLU (COLAMD
ordering).  In enclosed flows ``A11`` carries the constant-pressure null
vector; the factorization pins one pressure dof and every preconditioner
application, as well as the final solution, is projected onto zero pressure
mean.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit, prange

from .errors import Breakdown, FactorizationStale, MaxIterations, SingularBlock

PIVOT_TOL = 1e-14
BACKWARD_TOL = 1e-8
BREAKDOWN_TOL = 1e-30
PRECONDITIONERS = ("BlockDiag", "BlockTri")


@njit(parallel=True, cache=True)
def _csr_matvec(indptr, indices, data, x, out):
    n = indptr.shape[0] - 1
    for i in prange(n):
        s = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            s += data[k] * x[indices[k]]
        out[i] = s


def csr_matvec(A: sp.csr_matrix, x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Row-parallel ``A @ x``; each row is summed in storage order."""
    if out is None:
        out = np.empty(A.shape[0])
    _csr_matvec(A.indptr, A.indices, A.data, np.ascontiguousarray(x, dtype=float), out)
    return out


def _mask_diag(mask):
    return sp.diags(mask.astype(float), format="csr")


@dataclass(eq=False)
class BlockSystem:
    """Block operator and right-hand side of one linear(ized) solve.

    ``vel_fixed`` lists velocity dofs carrying homogeneous Dirichlet
    conditions.  ``solid_fixed`` lists solid dofs held at zero (symmetry
    planes); the multiplier dof with the same index is dropped with it, which
    puts a unit diagonal in the otherwise empty (lambda, lambda) block.
    Replacing ``L_f`` or ``K`` re-applies the constraints.  ``k_version``
    increases whenever the solid block ``K`` is replaced, which lets
    preconditioners detect stale factorizations.
    """
    A_f: sp.csr_matrix
    B: sp.csr_matrix
    K: sp.csr_matrix
    L_f: sp.csr_matrix
    L_s: sp.csr_matrix
    dt: float
    rhs: np.ndarray | None = None
    vel_fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pressure_null: tuple | None = None
    k_version: int = 0
    solid_fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    solid_values: np.ndarray | None = None

    def __post_init__(self):
        self._apply_constraints()

    # sizes -----------------------------------------------------------------
    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return self.A_f.shape[0], self.B.shape[0], self.K.shape[0], self.L_s.shape[0]

    @property
    def n(self) -> int:
        return sum(self.sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def split(self, x):
        o = self.offsets
        return tuple(x[o[i]:o[i + 1]] for i in range(4))

    # constraints -----------------------------------------------------------
    def _free_mask(self):
        mask = np.ones(self.A_f.shape[0], dtype=bool)
        mask[self.vel_fixed] = False
        return mask

    def _solid_mask(self):
        mask = np.ones(self.K.shape[0], dtype=bool)
        mask[self.solid_fixed] = False
        return mask

    def _apply_constraints(self):
        self.A_f = sp.csr_matrix(self.A_f)
        self.B = sp.csr_matrix(self.B)
        self.L_s = sp.csr_matrix(self.L_s)
        self.K = self._constrain_K(self.K)
        self.L_f = self._constrain_L_f(self.L_f)
        nl = self.L_s.shape[0]
        fixed = np.zeros(nl)
        fixed[self.solid_fixed] = 1.0
        self.C = sp.diags(fixed, format="csr")
        if self.vel_fixed.size:
            mask = self._free_mask()
            D = _mask_diag(mask)
            self.A_f = (D @ self.A_f @ D + _mask_diag(~mask)).tocsr()
            self.B = (self.B @ D).tocsr()
        if self.solid_fixed.size:
            D = _mask_diag(self._solid_mask())
            self.L_s = (D @ self.L_s @ D).tocsr()
            self.L_s.eliminate_zeros()
        if self.rhs is not None:
            self.rhs = self.rhs.copy()
            self._zero_fixed_rhs(self.rhs)

    def _constrain_K(self, K):
        K = sp.csr_matrix(K)
        if self.solid_fixed.size == 0:
            return K
        mask = self._solid_mask()
        D = _mask_diag(mask)
        return (D @ K @ D + _mask_diag(~mask)).tocsr()

    def _constrain_L_f(self, L_f):
        L_f = sp.csr_matrix(L_f)
        if self.vel_fixed.size:
            L_f = L_f @ _mask_diag(self._free_mask())
        if self.solid_fixed.size:
            L_f = _mask_diag(self._solid_mask()) @ L_f
        L_f = sp.csr_matrix(L_f)
        L_f.eliminate_zeros()
        return L_f

    def _zero_fixed_rhs(self, rhs):
        o = self.offsets
        rhs[self.vel_fixed] = 0.0
        rhs[o[2] + self.solid_fixed] = 0.0 if self.solid_values is None else self.solid_values
        rhs[o[3] + self.solid_fixed] = 0.0

    def with_velocity_constraints(self, dofs) -> "BlockSystem":
        fixed = np.union1d(self.vel_fixed, np.asarray(dofs, dtype=np.int64))
        return BlockSystem(self.A_f, self.B, self.K, self.L_f, self.L_s, self.dt,
                           None if self.rhs is None else self.rhs.copy(), fixed,
                           self.pressure_null, self.k_version, self.solid_fixed, self.solid_values)

    def with_solid_constraints(self, dofs, values=None) -> "BlockSystem":
        """Hold solid dofs ``dofs`` at ``values`` (zero by default) and drop their multipliers."""
        dofs = np.asarray(dofs, dtype=np.int64)
        vals = np.zeros(dofs.size) if values is None else np.asarray(values, dtype=float)
        if self.solid_fixed.size:
            old = np.zeros(self.solid_fixed.size) if self.solid_values is None else self.solid_values
            allv = dict(zip(self.solid_fixed.tolist(), old))
        else:
            allv = {}
        allv.update(zip(dofs.tolist(), vals))
        fixed = np.array(sorted(allv), dtype=np.int64)
        return BlockSystem(self.A_f, self.B, self.K, self.L_f, self.L_s, self.dt,
                           None if self.rhs is None else self.rhs.copy(), self.vel_fixed,
                           self.pressure_null, self.k_version, fixed, np.array([allv[k] for k in fixed]))

    def set_coupling(self, L_f):
        self.L_f = self._constrain_L_f(L_f)

    def set_solid_block(self, K):
        self.K = self._constrain_K(K)
        self.k_version += 1

    def set_rhs(self, g1, g_p, f_s, g2):
        rhs = np.concatenate([g1, g_p, f_s, g2]).astype(float)
        self._zero_fixed_rhs(rhs)
        self.rhs = rhs

    # blocks ----------------------------------------------------------------
    def A11(self) -> sp.csc_matrix:
        return sp.bmat([[self.A_f, -self.B.T], [-self.B, None]], format="csc")

    def A22(self) -> sp.csc_matrix:
        return sp.bmat([[self.K, -self.L_s.T], [-self.L_s / self.dt, self.C]], format="csc")

    def A21(self) -> sp.csr_matrix:
        nu, np_ = self.A_f.shape[0], self.B.shape[0]
        nx = self.K.shape[0]
        return sp.bmat([[sp.csr_matrix((nx, nu)), sp.csr_matrix((nx, np_))],
                        [self.L_f, sp.csr_matrix((self.L_s.shape[0], np_))]], format="csr")

    def to_sparse(self) -> sp.csr_matrix:
        return sp.bmat([[self.A_f, -self.B.T, None, self.L_f.T],
                        [-self.B, None, None, None],
                        [None, None, self.K, -self.L_s.T],
                        [self.L_f, None, -self.L_s / self.dt, self.C]], format="csr")

    def matvec(self, x) -> np.ndarray:
        u, p, X, lam = self.split(np.asarray(x, dtype=float))
        self._cache_transposes()
        y = np.empty(self.n)
        o = self.offsets
        y[o[0]:o[1]] = csr_matvec(self.A_f, u) - csr_matvec(self._BT, p) + csr_matvec(self._LfT, lam)
        y[o[1]:o[2]] = -csr_matvec(self.B, u)
        y[o[2]:o[3]] = csr_matvec(self.K, X) - csr_matvec(self._LsT, lam)
        y[o[3]:o[4]] = csr_matvec(self.L_f, u) - csr_matvec(self.L_s, X) / self.dt
        if self.solid_fixed.size:
            y[o[3] + self.solid_fixed] += lam[self.solid_fixed]
        return y

    def _cache_transposes(self):
        key = (id(self.B), id(self.L_f), id(self.L_s))
        if getattr(self, "_tkey", None) != key:
            self._BT = self.B.T.tocsr()
            self._LfT = self.L_f.T.tocsr()
            self._LsT = self.L_s.T.tocsr()
            self._tkey = key

    def project_pressure(self, x) -> np.ndarray:
        """Remove the constant-pressure component (in place) if there is one."""
        if self.pressure_null is None:
            return x
        const, weights = self.pressure_null
        o = self.offsets
        p = x[o[1]:o[2]]
        p -= (weights @ p) * const
        return x


def detect_pressure_null(B: sp.csr_matrix, const: np.ndarray, weights: np.ndarray, tol=1e-10):
    """Return ``(const, weights)`` if constant pressure is in the kernel of ``B^T``."""
    r = B.T @ const
    scale = max(1.0, abs(B).max())
    if np.max(np.abs(r), initial=0.0) <= tol * scale:
        return const, weights
    return None


class DirectFactorization:
    """Sparse LU of a square matrix; optional pinned dofs are replaced by identity rows."""

    def __init__(self, A, pinned=()):
        A = sp.csc_matrix(A)
        self.pinned = np.asarray(pinned, dtype=np.int64)
        if self.pinned.size:
            keep = np.ones(A.shape[0])
            keep[self.pinned] = 0.0
            D = sp.diags(keep)
            A = (D @ A @ D + sp.diags(1.0 - keep)).tocsc()
        self.matrix = A
        try:
            self.lu = spla.splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SingularBlock(str(exc)) from None
        d = np.abs(self.lu.U.diagonal())
        if d.size and not (np.all(np.isfinite(d)) and d.min() > 0.0):
            raise SingularBlock("zero or non-finite pivot")
        # a small pivot ratio alone is common for badly scaled blocks; only
        # reject the factorization when it cannot reproduce a probe solution
        if d.size and d.min() < PIVOT_TOL * d.max():
            x = np.random.default_rng(0).standard_normal(A.shape[0])
            b = A @ x
            xs = self.lu.solve(b)
            err = np.abs(A @ xs - b).max() / (abs(A).sum(axis=1).max() * np.abs(xs).max() + np.abs(b).max())
            if not err <= BACKWARD_TOL:
                raise SingularBlock(f"pivot ratio {d.min() / d.max():.2e} and backward error {err:.2e}")

    def solve(self, b):
        b = np.array(b, dtype=float)
        if self.pinned.size:
            b[self.pinned] = 0.0
        return self.lu.solve(b)

    def residual_ok(self, x, b) -> bool:
        A = self.matrix
        lhs = np.max(np.abs(A @ x - b))
        normA = abs(A).sum(axis=1).max()
        return lhs <= 1e-10 * (normA * np.max(np.abs(x)) + np.max(np.abs(b)))


@dataclass
class BlockFactors:
    A11: DirectFactorization
    A22: DirectFactorization
    k_version: int
    counts: dict = field(default_factory=lambda: {"A11": 0, "A22": 0})


def _pressure_pin(system: BlockSystem):
    if system.pressure_null is None:
        return ()
    const, _ = system.pressure_null
    return (system.sizes[0] + int(np.flatnonzero(const)[0]),)


def factorize_A11(system: BlockSystem) -> DirectFactorization:
    return DirectFactorization(system.A11(), _pressure_pin(system))


def factorize_A22(system: BlockSystem) -> DirectFactorization:
    return DirectFactorization(system.A22())


def factorize_blocks(system: BlockSystem) -> BlockFactors:
    f = BlockFactors(factorize_A11(system), factorize_A22(system), system.k_version)
    f.counts["A11"] += 1
    f.counts["A22"] += 1
    return f


def refactor_A22(system: BlockSystem, factors: BlockFactors) -> BlockFactors:
    factors.A22 = factorize_A22(system)
    factors.k_version = system.k_version
    factors.counts["A22"] += 1
    return factors


class BlockPreconditioner:
    """Block-diagonal or block lower-triangular preconditioner with exact blocks."""

    def __init__(self, kind: str, system: BlockSystem, factors: BlockFactors):
        if kind not in PRECONDITIONERS:
            raise ValueError(f"unknown preconditioner {kind!r}")
        self.kind = kind
        self.system = system
        self.factors = factors

    def apply(self, r) -> np.ndarray:
        s = self.system
        if s.k_version != self.factors.k_version:
            raise FactorizationStale("solid block changed since A22 was factored")
        n1 = s.sizes[0] + s.sizes[1]
        nu = s.sizes[0]
        z = np.empty_like(r)
        z[:n1] = self.factors.A11.solve(r[:n1])
        r2 = r[n1:]
        if self.kind == "BlockTri":
            r2 = r2.copy()
            r2[s.sizes[2]:] -= csr_matvec(s.L_f, z[:nu])
        z[n1:] = self.factors.A22.solve(r2)
        return s.project_pressure(z)

    __call__ = apply


@dataclass
class GmresResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool = True


def gmres(matvec, b, precon=None, tol: float = 1e-8, restart: int = 200, max_it: int = 2000,
          project=None) -> GmresResult:
    """Right-preconditioned restarted GMRES (modified Gram-Schmidt, Givens).

    Convergence is declared on the true relative residual
    ``||b - A x|| / ||b||``.  ``iterations`` counts inner (Arnoldi) steps over
    all cycles.  ``project`` is applied to the final iterate.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    M = precon if precon is not None else (lambda v: v)
    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    if bnorm == 0.0:
        return GmresResult(x, 0, 0.0)
    total = 0
    r = b.copy()
    beta = bnorm
    while True:
        m = restart
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k_done = 0
        for k in range(m):
            Z[k] = M(V[k])
            w = np.array(matvec(Z[k]), dtype=float)  # the operator may return its input
            for i in range(k + 1):
                H[i, k] = w @ V[i]
                w -= H[i, k] * V[i]
            hnext = np.linalg.norm(w)
            H[k + 1, k] = hnext
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            if denom < BREAKDOWN_TOL:
                raise Breakdown(f"Arnoldi breakdown at iteration {total + k + 1}")
            cs[k], sn[k] = H[k, k] / denom, H[k + 1, k] / denom
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k_done = k + 1
            total += 1
            # hnext ~ 0 is the lucky breakdown: the Krylov space holds the solution
            if abs(g[k + 1]) <= tol * bnorm or total >= max_it or hnext < BREAKDOWN_TOL:
                break
            V[k + 1] = w / hnext
        y = np.linalg.solve(np.triu(H[:k_done, :k_done]), g[:k_done])
        x = x + y @ Z[:k_done]
        if project is not None:
            x = project(x)
        r = b - matvec(x)
        beta = np.linalg.norm(r)
        if beta <= tol * bnorm:
            return GmresResult(x, total, beta / bnorm)
        if total >= max_it:
            raise MaxIterations(f"GMRES reached {total} iterations (relative residual {beta / bnorm:.2e})",
                                x=x, iterations=total, residual=beta / bnorm)


def solve_system(system: BlockSystem, factors: BlockFactors, precon: str = "BlockTri", tol: float = 1e-8,
                 restart: int = 200, max_it: int = 2000, rhs=None) -> GmresResult:
    """GMRES on the full block system with the chosen block preconditioner."""
    P = BlockPreconditioner(precon, system, factors)
    b = system.rhs if rhs is None else rhs
    t0 = time.perf_counter()
    res = gmres(system.matvec, b, P, tol=tol, restart=restart, max_it=max_it, project=system.project_pressure)
    res.seconds = time.perf_counter() - t0
    return res
