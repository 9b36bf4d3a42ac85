"""
Physical diagnostics and output: solid volume and volume loss, discrete
energies, per-step CSV series, legacy VTK snapshots and the strong-scaling
harness for the threaded kernels.
"""
from __future__ import annotations

import csv
import time
from pathlib import Path

import numba
import numpy as np

from .errors import NegativeElementArea
from .mesh import QuadMesh, quad_areas

CSV_COLUMNS = ("step", "time", "nit", "its", "t_coup_s", "t_sol_s", "volume", "vol_loss_pct", "nnz_Lf")
COUPLING_COLUMNS = ("step", "strategy", "nnz", "polygons", "triangles", "seconds")


def mapped_quads(mesh_B: QuadMesh, X) -> np.ndarray:
    n = mesh_B.n_vertices
    X = np.asarray(X, dtype=float)
    pos = np.column_stack([X[:n], X[n:2 * n]])
    return pos[mesh_B.elem_to_vertex]


def mapped_areas(mesh_B: QuadMesh, X) -> np.ndarray:
    return quad_areas(mapped_quads(mesh_B, X))


def solid_volume(mesh_B: QuadMesh, X, check: bool = True) -> float:
    """Area of the mapped solid mesh ``X(T_h^B)`` with straight edges."""
    a = mapped_areas(mesh_B, X)
    if check and np.any(a <= 0):
        bad = np.flatnonzero(a <= 0)
        raise NegativeElementArea(f"{bad.size} mapped solid elements have non-positive area", bad)
    return float(a.sum())


def volume_loss_pct(V0: float, V_min: float) -> float:
    return 100.0 * (V0 - V_min) / V0


def kinetic_energy(M_f, u, rho: float) -> float:
    return 0.5 * rho * float(u @ (M_f @ u))


def elastic_energy_linear(K_s, X) -> float:
    """``1/2 X^T K_s X``; ``K_s`` already carries the stiffness ``kappa``."""
    return 0.5 * float(X @ (K_s @ X))


# ---------------------------------------------------------------------------
# VTK
# ---------------------------------------------------------------------------

def _fmt(a) -> str:
    return "\n".join(" ".join(f"{v:.17g}" for v in row) for row in np.atleast_2d(a))


def write_vtk_fluid(path, V, Q, u, p) -> None:
    """Structured grid of the Q1 corners with velocity and cell-mean pressure."""
    m = V.mesh
    nxn = 2 * m.nx + 1
    corner = (np.arange(0, 2 * m.ny + 1, 2)[:, None] * nxn + np.arange(0, nxn, 2)[None, :]).ravel()
    pts = V.node_coords[corner]
    vel = np.column_stack([u[corner], u[V.n_nodes + corner], np.zeros(corner.size)])
    pmean = p[Q.elem_nodes[:, 0]]
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nfluid\nASCII\nDATASET STRUCTURED_GRID\n")
        fh.write(f"DIMENSIONS {m.nx + 1} {m.ny + 1} 1\n")
        fh.write(f"POINTS {corner.size} double\n")
        fh.write(_fmt(np.column_stack([pts, np.zeros(corner.size)])) + "\n")
        fh.write(f"POINT_DATA {corner.size}\nVECTORS velocity double\n{_fmt(vel)}\n")
        fh.write(f"CELL_DATA {m.n_elements}\nSCALARS pressure double 1\nLOOKUP_TABLE default\n")
        fh.write("\n".join(f"{v:.17g}" for v in pmean) + "\n")


def write_vtk_solid(path, S, X, lam=None) -> None:
    n = S.n_nodes
    pts = np.column_stack([X[:n], X[n:2 * n], np.zeros(n)])
    cells = S.elem_nodes
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nsolid\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {n} double\n{_fmt(pts)}\n")
        fh.write(f"CELLS {len(cells)} {5 * len(cells)}\n")
        fh.write("\n".join("4 " + " ".join(map(str, c)) for c in cells) + "\n")
        fh.write(f"CELL_TYPES {len(cells)}\n" + "\n".join(["9"] * len(cells)) + "\n")
        if lam is not None:
            mult = np.column_stack([lam[:n], lam[n:2 * n], np.zeros(n)])
            fh.write(f"POINT_DATA {n}\nVECTORS multiplier double\n{_fmt(mult)}\n")


def write_vtk_snapshot(out_dir, step: int, fields: dict, spaces: dict, raw: bool = False) -> list[Path]:
    """Write ``fluid_<step>.vtk`` and ``solid_<step>.vtk`` (plus ``.npz`` when ``raw``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    V, Q, S = spaces["V"], spaces["Q"], spaces["S"]
    for key, space in (("u", V), ("p", Q), ("X", S)):
        if len(fields[key]) != space.n_dofs:
            raise ValueError(f"field {key} has {len(fields[key])} entries, expected {space.n_dofs}")
    f = out / f"fluid_{step:06d}.vtk"
    s = out / f"solid_{step:06d}.vtk"
    write_vtk_fluid(f, V, Q, fields["u"], fields["p"])
    write_vtk_solid(s, S, fields["X"], fields.get("lam"))
    paths = [f, s]
    if raw:
        r = out / f"fields_{step:06d}.npz"
        np.savez(r, **{k: np.asarray(v) for k, v in fields.items()})
        paths.append(r)
    return paths


# ---------------------------------------------------------------------------
# sink
# ---------------------------------------------------------------------------

class DiagnosticsSink:
    """Per-step CSV writer and snapshot scheduler, flushed after every step."""

    def __init__(self, out_dir, snapshot_stride: int = 10, vtk: bool = True, raw_fields: bool = False,
                 csv_out: bool = True):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.stride = snapshot_stride
        self.vtk = vtk
        self.raw = raw_fields
        self.snapshots = []
        self._fh = self._cfh = None
        if csv_out:
            self._fh = open(self.out_dir / "steps.csv", "w", newline="")
            self._w = csv.writer(self._fh)
            self._w.writerow(CSV_COLUMNS)
            self._cfh = open(self.out_dir / "coupling_stats.csv", "w", newline="")
            self._cw = csv.writer(self._cfh)
            self._cw.writerow(COUPLING_COLUMNS)
            self._fh.flush()
            self._cfh.flush()

    def record(self, report) -> None:
        if self._fh is None:
            return
        self._w.writerow([report.step, f"{report.time:.10g}", report.nit, f"{report.its:.6g}",
                          f"{report.t_coup:.6f}", f"{report.t_sol:.6f}", f"{report.volume:.17g}",
                          f"{report.vol_loss_pct:.17g}", report.nnz_Lf])
        cs = report.coupling or {}
        self._cw.writerow([report.step, cs.get("strategy", ""), cs.get("nnz", 0), cs.get("polygons", 0),
                           cs.get("triangles", 0), f"{cs.get('seconds', 0.0):.6f}"])
        self._fh.flush()
        self._cfh.flush()

    def wants_snapshot(self, step: int, last: bool) -> bool:
        return self.vtk and (step % self.stride == 0 or last)

    def snapshot(self, step: int, fields: dict, spaces: dict) -> None:
        self.snapshots.append(write_vtk_snapshot(self.out_dir, step, fields, spaces, self.raw))

    def close(self) -> None:
        for fh in (self._fh, self._cfh):
            if fh is not None:
                fh.close()
        self._fh = self._cfh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# scaling harness
# ---------------------------------------------------------------------------

def _best_of(fn, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def scaling_harness(cfg, thread_counts=(1, 2, 4), repeats: int = 3, out_csv=None) -> list[dict]:
    """Time the assembly, intersection coupling and block matvec at each thread count.

    Speedups are relative to the first entry of ``thread_counts``.  Requests
    above ``numba.config.NUMBA_NUM_THREADS`` are capped; the effective count is
    reported.  ``identical`` tells whether ``L_f`` is bitwise equal to the
    baseline matrix.
    """
    from .coupling import assemble_coupling_intersection
    from .integrator import build_problem
    from .solver import csr_matvec

    prob = build_problem(cfg)
    V, S = prob.V, prob.S
    X0 = prob.X0
    rng = np.random.default_rng(0)
    x = rng.standard_normal(prob.system.n)
    rows = []
    base = {}
    ref_L = None
    prev = numba.get_num_threads()
    try:
        for t in thread_counts:
            eff = max(1, min(int(t), numba.config.NUMBA_NUM_THREADS))
            numba.set_num_threads(eff)
            t_asm, _ = _best_of(lambda: build_problem(cfg, assemble_only=True), repeats)
            t_coup, ca = _best_of(lambda: assemble_coupling_intersection(V, S, X0, cfg.clamp_tol, threads=eff,
                                                                           rule=cfg.intersection_rule),
                                  repeats)
            prob.system.set_coupling(ca.L_f)
            A = prob.system.to_sparse()
            t_mv, _ = _best_of(lambda: [csr_matvec(A, x) for _ in range(20)], repeats)
            L = ca.L_f
            if ref_L is None:
                ref_L = L
            identical = (L.shape == ref_L.shape and np.array_equal(L.indptr, ref_L.indptr)
                         and np.array_equal(L.indices, ref_L.indices)
                         and np.array_equal(L.data.view(np.uint64), ref_L.data.view(np.uint64)))
            for phase, sec in (("assembly", t_asm), ("coupling", t_coup), ("matvec", t_mv)):
                base.setdefault(phase, sec)
                rows.append({"threads": int(t), "effective_threads": eff, "phase": phase, "seconds": sec,
                             "speedup": base[phase] / sec, "identical": bool(identical)})
    finally:
        numba.set_num_threads(prev)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else
                               ["threads", "effective_threads", "phase", "seconds", "speedup", "identical"])
            w.writeheader()
            w.writerows(rows)
    return rows
