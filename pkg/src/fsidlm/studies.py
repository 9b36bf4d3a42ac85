"""
Parameter sweeps laid out like published refinement tables.

Each study runs its member simulations sequentially and returns a
:class:`StudyTable` whose rows hold the measured quantities next to the
published reference values where a matching configuration exists.  A run
that fails is kept as a row with ``status == "failed"``; it never aborts
the sweep.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SimConfig
from .diagnostics import scaling_harness
from .errors import FsiError
from .integrator import build_problem, run_simulation

log = logging.getLogger(__name__)

STUDY_KINDS = ("mesh_refine", "dt_refine", "precon_compare", "scaling")
PRECONS = ("BlockDiag", "BlockTri")

# Published reference values: (law, coupling, sweep axis) -> value -> fields.
# ``None`` marks a failed or missing entry.
_REF_FIELDS = ("vol_loss", "its_BlockDiag", "its_BlockTri")
_REF = {
    ("linear", "Intersection", "dofs"): {
        30534: (1.17, 12, 7), 120454: (0.506, 31, 9), 269766: (0.318, 86, 11), 478470: (0.233, 160, 12),
        746566: (0.185, 394, 13), 1074054: (0.154, None, 14), 1460934: (0.127, None, 16)},
    ("linear", "VertexRule", "dofs"): {
        30534: (0.0699, 9, 5), 120454: (0.0689, 9, 6), 269766: (0.0487, 10, 6), 478470: (0.0424, 10, 6),
        746566: (0.0409, 10, 6), 1074054: (0.0369, 10, 6), 1460934: (0.0352, 10, 6)},
    ("linear", "Intersection", "dt"): {
        0.02: (0.255, 1364, 19), 0.01: (0.233, 170, 12), 0.005: (0.204, 30, 9), 0.002: (0.188, 12, 7),
        0.001: (0.181, 8, 5)},
    ("linear", "VertexRule", "dt"): {
        0.02: (0.0627, 12, 7), 0.01: (0.0424, 10, 6), 0.005: (0.0323, 9, 5), 0.002: (0.0258, 7, 4),
        0.001: (0.0237, 6, 4)},
    ("exponential", "Intersection", "dofs"): {
        21222: (1.70, 245, 21), 83398: (1.47, 269, 23), 186534: (1.47, 388, 26), 330630: (1.47, 406, 27)},
    ("exponential", "Intersection", "dt"): {
        0.005: (1.44, 227, 19), 0.002: (1.44, 59, 13), 0.001: (1.44, 16, 10)},
    ("exponential", "VertexRule", "dt"): {
        0.02: (0.0108, None, 193), 0.01: (0.0716, None, 80), 0.005: (0.104, None, 48),
        0.002: (0.124, 955, 30), 0.001: (0.131, 710, 23)},
}


def published_reference(cfg: SimConfig, axis: str, value) -> dict:
    """Published values for ``cfg`` at sweep position ``value`` (empty when none match)."""
    table = _REF.get((cfg.law, cfg.coupling, axis), {})
    for key, vals in table.items():
        if math.isclose(float(key), float(value), rel_tol=1e-9):
            return {f"ref_{k}": v for k, v in zip(_REF_FIELDS, vals)}
    return {}


@dataclass
class StudyTable:
    kind: str
    columns: list
    rows: list = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.rows if r.get("status") == "failed")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _cell(r.get(k)) for k in self.columns})

    def to_text(self) -> str:
        cells = [[_cell(r.get(k)) or "-" for k in self.columns] for r in self.rows]
        width = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(self.columns)]
        line = "  ".join(c.rjust(w) for c, w in zip(self.columns, width))
        out = [line, "-" * len(line)]
        out += ["  ".join(c.rjust(w) for c, w in zip(row, width)) for row in cells]
        return "\n".join(out)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.4g}"
    return str(v)


def level_config(base: SimConfig, fluid_n: int) -> SimConfig:
    """Scale fluid and solid meshes together, keeping the base ratios."""
    r = fluid_n / base.fluid_nx
    return base.replace(fluid_nx=fluid_n, fluid_ny=max(1, round(base.fluid_ny * r)),
                        solid_nx=max(1, round(base.solid_nx * r)), solid_ny=max(1, round(base.solid_ny * r)))


def run_one(cfg: SimConfig, n_steps: int | None = None) -> dict:
    """Run ``cfg`` and reduce it to one table row of averages."""
    t0 = time.perf_counter()
    try:
        prob = build_problem(cfg)
    except FsiError as exc:
        return {"status": "failed", "message": str(exc)}
    t_ass = time.perf_counter() - t0
    res = run_simulation(cfg, n_steps=n_steps, problem=prob)
    t_tot = time.perf_counter() - t0
    ok = [r for r in res.reports if not r.failed]
    row = {"dofs": prob.system.n, "T_ass": t_ass, "T_tot": t_tot, "steps": len(ok),
           "status": "failed" if res.failed else "ok", "message": res.message}
    if ok:
        w = np.array([r.nit for r in ok], dtype=float)
        row.update(vol_loss=res.vol_loss_pct, T_coup=float(np.mean([r.t_coup for r in ok])),
                   nit=float(np.mean(w)), its=float(np.sum([r.its * r.nit for r in ok]) / w.sum()),
                   its_max=float(max(r.its for r in ok)), T_sol=float(np.mean([r.t_sol for r in ok])))
    return row


def _single(kind, base, sweep, n_steps, axis):
    cols = [axis, "dofs", "vol_loss", "ref_vol_loss", "T_ass", "T_coup", "nit", "its", "its_max",
            f"ref_its_{base.precon}", "T_sol", "T_tot", "status"]
    table = StudyTable(kind, cols)
    for v in sweep:
        try:
            cfg = level_config(base, int(v)) if axis == "level" else base.replace(dt=float(v))
        except FsiError as exc:
            table.rows.append({axis: v, "status": "failed", "message": str(exc)})
            continue
        log.info("%s: %s = %s", kind, axis, v)
        row = {axis: v, **run_one(cfg, n_steps)}
        ref_key = "dofs" if axis == "level" else "dt"
        row.update(published_reference(cfg, ref_key, row.get("dofs", -1) if axis == "level" else v))
        table.rows.append(row)
    return table


def _precon_compare(base, sweep, n_steps):
    cols = ["level", "dofs", "vol_loss", "ref_vol_loss", "T_ass", "T_coup"]
    for pc in PRECONS:
        cols += [f"its_{pc}", f"ref_its_{pc}", f"T_sol_{pc}", f"T_tot_{pc}"]
    cols.append("status")
    table = StudyTable("precon_compare", cols)
    for v in sweep:
        row = {"level": v}
        status = "ok"
        for pc in PRECONS:
            try:
                cfg = level_config(base.replace(precon=pc), int(v))
            except FsiError as exc:
                row.update(status="failed", message=str(exc))
                break
            r = run_one(cfg, n_steps)
            if r.get("status") == "failed":
                status = "failed"
            for k in ("dofs", "vol_loss", "T_ass", "T_coup"):
                row.setdefault(k, r.get(k))
            row[f"its_{pc}"] = r.get("its")
            row[f"T_sol_{pc}"] = r.get("T_sol")
            row[f"T_tot_{pc}"] = r.get("T_tot")
            row.update(published_reference(cfg, "dofs", r.get("dofs", -1)))
        row.setdefault("status", status)
        table.rows.append(row)
    return table


def _scaling(base, sweep, repeats=3):
    cols = ["threads", "effective_threads", "phase", "seconds", "speedup", "identical"]
    table = StudyTable("scaling", cols)
    if not sweep:
        return table
    table.rows = [dict(r, status="ok") for r in scaling_harness(base, [int(t) for t in sweep], repeats)]
    return table


def run_study(kind: str, base: SimConfig, sweep, n_steps: int | None = None, out_dir=None) -> StudyTable:
    """Run a sweep and optionally write ``study_<kind>.csv`` / ``.txt`` under ``out_dir``.

    ``sweep`` holds fluid mesh sizes for ``mesh_refine`` and ``precon_compare``
    (the solid mesh is scaled with the same factor), time steps for
    ``dt_refine`` and thread counts for ``scaling``.
    """
    if kind not in STUDY_KINDS:
        raise ValueError(f"unknown study kind {kind!r}; choose from {', '.join(STUDY_KINDS)}")
    sweep = list(sweep)
    if kind == "mesh_refine":
        table = _single(kind, base, sweep, n_steps, "level")
    elif kind == "dt_refine":
        table = _single(kind, base, sweep, n_steps, "dt")
    elif kind == "precon_compare":
        table = _precon_compare(base, sweep, n_steps)
    else:
        table = _scaling(base, sweep)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.write_csv(out / f"study_{kind}.csv")
        (out / f"study_{kind}.txt").write_text(table.to_text() + "\n")
    return table
