"""
Semi-implicit backward Euler time stepping of the coupled system.

Each step freezes the coupling matrix at the old position ``X^n`` and solves

    A_f u - B^T p + L_f^T lam = rho/dt M_f u^n
    -B u                      = 0
    P(X) - L_s^T lam          = f_s
    L_f u - L_s X / dt        = -L_s X^n / dt

once for the linear law, or by Newton iterations (solid block linearized,
``A22`` refactored every iteration) for the exponential law.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import (FluidBlocks, MaterialLaw, SolidGeometry, assemble_fluid_blocks, assemble_multiplier_mass,
                       assemble_solid_linear, solid_energy, solid_residual_and_tangent)
from .config import SimConfig
from .coupling import assemble_coupling
from .diagnostics import (DiagnosticsSink, kinetic_energy, mapped_areas, solid_volume, volume_loss_pct)
from .errors import ElementInversion, FsiError, NewtonDiverged, NonFiniteValue
from .mesh import fluid_box_mesh, quarter_annulus_mesh, solid_rect_mesh
from .solver import (BlockSystem, detect_pressure_null, factorize_A11, factorize_A22, gmres,
                     BlockPreconditioner, BlockFactors)
from .spaces import (FeSpace, constant_pressure_vector, disc_p1_space, pressure_means, vector_q1_space,
                     vector_q2_space)

log = logging.getLogger(__name__)

NEWTON_MAX_HALVINGS = 12


@dataclass
class SolidState:
    X: np.ndarray
    X_prev: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.X)):
            raise NonFiniteValue("solid state has non-finite entries")


@dataclass
class StepReport:
    step: int
    time: float
    nit: int
    its: float
    t_coup: float
    t_sol: float
    volume: float
    vol_loss_pct: float
    nnz_Lf: int = 0
    coupling: dict = field(default_factory=dict)
    constraint_residual: float = 0.0
    divergence: float = 0.0
    failed: bool = False
    message: str = ""


@dataclass(eq=False)
class Problem:
    cfg: SimConfig
    V: FeSpace
    Q: FeSpace
    S: FeSpace
    fluid: FluidBlocks
    L_s: sp.csr_matrix
    K_s: sp.csr_matrix | None
    law: MaterialLaw
    geom: SolidGeometry
    system: BlockSystem
    X0: np.ndarray
    X_ref: np.ndarray
    f_ref: np.ndarray


def initial_map(cfg: SimConfig, S: FeSpace) -> np.ndarray:
    s = S.node_coords
    if cfg.initial_map == "stretch":
        x, y = s[:, 0] / cfg.stretch, s[:, 1] * cfg.stretch
    else:
        x, y = s[:, 0], s[:, 1]
    return np.concatenate([x, y])


def material_law(cfg: SimConfig) -> MaterialLaw:
    return MaterialLaw(cfg.law, cfg.kappa, cfg.gamma, cfg.eta, cfg.exp_form)


def build_problem(cfg: SimConfig, assemble_only: bool = False) -> Problem:
    """Meshes, spaces, time independent blocks, constraints and initial map."""
    fm = fluid_box_mesh(cfg.fluid_nx, cfg.fluid_ny, cfg.box)
    if cfg.solid_kind == "annulus":
        sm = quarter_annulus_mesh(cfg.solid_nx, cfg.solid_ny, cfg.r_in, cfg.r_out)
    else:
        sm = solid_rect_mesh(cfg.solid_nx, cfg.solid_ny, cfg.solid_rect)
    V, Q, S = vector_q2_space(fm), disc_p1_space(fm), vector_q1_space(sm)
    fluid = assemble_fluid_blocks(V, Q, cfg.rho, cfg.nu, cfg.dt)
    geom = SolidGeometry(S)
    L_s = assemble_multiplier_mass(S, geom)
    law = material_law(cfg)
    K_s = assemble_solid_linear(S, law.kappa, geom) if law.is_linear else None
    X0 = initial_map(cfg, S)
    X_ref = np.concatenate([S.node_coords[:, 0], S.node_coords[:, 1]])
    f_ref = np.zeros(S.n_dofs)
    if cfg.stress_free_reference:
        f_ref = solid_residual_and_tangent(S, law, X_ref, geom, K_s)[0]
    K = K_s if K_s is not None else sp.csr_matrix((S.n_dofs, S.n_dofs))
    system = BlockSystem(fluid.A_f, fluid.B, K, sp.csr_matrix((S.n_dofs, V.n_dofs)), L_s, cfg.dt)
    if not assemble_only:
        system = system.with_velocity_constraints(V.dofs(list(cfg.dirichlet))) if cfg.dirichlet else system
        system.pressure_null = detect_pressure_null(system.B, constant_pressure_vector(Q), pressure_means(Q))
        dofs = solid_constraint_dofs(cfg.solid_constraints, S)
        if dofs.size:
            system = system.with_solid_constraints(dofs, X0[dofs])
    return Problem(cfg, V, Q, S, fluid, L_s, K_s, law, geom, system, X0, X_ref, f_ref)


def solid_constraint_dofs(names, S: FeSpace) -> np.ndarray:
    """Solid dofs held fixed on the reference-domain axes.

    ``x0_normal`` / ``y0_normal`` fix the normal component of ``X`` on nodes
    with ``s1 = 0`` / ``s2 = 0`` (symmetry planes); ``x0_clamped`` fixes both
    components on ``s1 = 0``.
    """
    s = S.node_coords
    n = S.n_nodes
    on_x0 = np.flatnonzero(np.abs(s[:, 0]) <= 1e-14)
    on_y0 = np.flatnonzero(np.abs(s[:, 1]) <= 1e-14)
    out = []
    for name in names:
        if name == "x0_normal":
            out.append(on_x0)
        elif name == "y0_normal":
            out.append(n + on_y0)
        elif name == "x0_clamped":
            out += [on_x0, n + on_x0]
        else:
            raise ValueError(f"unknown solid constraint {name!r}")
    return np.unique(np.concatenate(out)) if out else np.zeros(0, dtype=np.int64)


def point_load(cfg: SimConfig, S: FeSpace) -> np.ndarray:
    """Nodal load of magnitude ``bar_force`` pointing down at the node nearest ``force_point``."""
    f = np.zeros(S.n_dofs)
    if cfg.scenario != "bar" or cfg.bar_force == 0.0:
        return f
    k = int(np.argmin(np.linalg.norm(S.node_coords - np.asarray(cfg.force_point), axis=1)))
    f[S.n_nodes + k] = -cfg.bar_force
    return f


class Simulation:
    """Time stepper holding the fields ``u, p, X, lam`` and the block factorizations."""

    def __init__(self, cfg: SimConfig, problem: Problem | None = None):
        self.cfg = cfg
        self.prob = problem or build_problem(cfg)
        p = self.prob
        self.system = p.system
        self.u = np.zeros(p.V.n_dofs)
        self.p = np.zeros(p.Q.n_dofs)
        self.lam = np.zeros(p.S.n_dofs)
        self.state = SolidState(p.X0.copy(), p.X0.copy())
        self.t = 0.0
        self.step_index = 0
        self.V0 = solid_volume(p.S.mesh, p.X0)
        self.V_min = self.V0
        self._load = point_load(cfg, p.S)
        self.factor_counts = {"A11": 0, "A22": 0}
        self._A11 = None
        self._A22 = None
        self._A22_version = -1

    # helpers ---------------------------------------------------------------
    @property
    def X(self):
        return self.state.X

    def load(self, t_new: float) -> np.ndarray:
        if t_new <= self.cfg.force_t_end + 1e-12:
            return self._load
        return np.zeros_like(self._load)

    def _factors(self) -> BlockFactors:
        if self._A11 is None:
            self._A11 = factorize_A11(self.system)
            self.factor_counts["A11"] += 1
        if self._A22 is None or self._A22_version != self.system.k_version:
            self._A22 = factorize_A22(self.system)
            self._A22_version = self.system.k_version
            self.factor_counts["A22"] += 1
        return BlockFactors(self._A11, self._A22, self._A22_version)

    def _gmres(self, rhs):
        c = self.cfg
        P = BlockPreconditioner(c.precon, self.system, self._factors())
        return gmres(self.system.matvec, rhs, P, tol=c.gmres_tol, restart=c.gmres_restart, max_it=c.gmres_max_it,
                     project=self.system.project_pressure)

    def couple(self, X):
        c = self.cfg
        ca = assemble_coupling(c.coupling, self.prob.V, self.prob.S, X, clamp_tol=c.clamp_tol, threads=c.threads,
                               rule=c.intersection_rule)
        self.system.set_coupling(ca.L_f)
        return ca

    def fields(self) -> dict:
        return {"u": self.u, "p": self.p, "X": self.X, "lam": self.lam}

    def elastic_energy(self, X) -> float:
        """Stored energy, shifted by the reference stress term when that is removed."""
        p = self.prob
        if p.law.is_linear:
            ee = 0.5 * float(X @ (p.K_s @ X))
        else:
            ee = solid_energy(p.S, p.law, X, p.geom)
        if self.cfg.stress_free_reference:
            ee -= float(p.f_ref @ X)
        return ee

    def energy(self) -> tuple[float, float]:
        """Kinetic and elastic energy of the current state."""
        ek = kinetic_energy(self.prob.fluid.M_f, self.u, self.cfg.rho)
        return ek, self.elastic_energy(self.X)

    def _rhs(self, t_new):
        p = self.prob
        g1 = (self.cfg.rho / self.cfg.dt) * (p.fluid.M_f @ self.u)
        # constrained columns drop out: fixed dofs keep their old values
        g2 = -(self.system.L_s @ self.X) / self.cfg.dt
        f_s = self.load(t_new) + p.f_ref
        s = self.system
        if p.law.is_linear and s.solid_fixed.size:
            # lift the fixed values into the free rows of the linear solid equation
            f_s = f_s - p.K_s[:, s.solid_fixed] @ s.solid_values
        return g1, np.zeros(p.Q.n_dofs), f_s, g2

    def _pack(self):
        return np.concatenate([self.u, self.p, self.X, self.lam])

    def _unpack(self, z):
        u, p, X, lam = self.system.split(z)
        return u.copy(), p.copy(), X.copy(), lam.copy()

    # steps -----------------------------------------------------------------
    def step(self) -> StepReport:
        if self.prob.law.is_linear:
            return self.step_linear()
        return self.step_newton()

    def step_linear(self) -> StepReport:
        """One semi-implicit step solved as a single linear system."""
        t_new = (self.step_index + 1) * self.cfg.dt
        t0 = time.perf_counter()
        ca = self.couple(self.X)
        t_coup = time.perf_counter() - t0
        self.system.set_rhs(*self._rhs(t_new))
        t0 = time.perf_counter()
        res = self._gmres(self.system.rhs)
        t_sol = time.perf_counter() - t0
        return self._accept(res.x, t_new, 1, res.iterations, t_coup, t_sol, ca)

    def newton_residual(self, z, r_s=None):
        s = self.system
        u, p, X, lam = s.split(z)
        if r_s is None:
            r_s, _ = solid_residual_and_tangent(self.prob.S, self.prob.law, X, self.prob.geom, self.prob.K_s)
        R = s.matvec(np.concatenate([u, p, np.zeros_like(X), lam])) - s.rhs
        o = s.offsets
        R[o[2]:o[3]] += r_s
        R[o[3]:o[4]] -= (s.L_s @ X) / s.dt
        R[s.vel_fixed] = u[s.vel_fixed]
        if s.solid_fixed.size:
            R[o[2] + s.solid_fixed] = X[s.solid_fixed] - s.solid_values
        return R

    def step_newton(self) -> StepReport:
        """One semi-implicit step with Newton iterations on the solid law."""
        c = self.cfg
        pr = self.prob
        t_new = (self.step_index + 1) * c.dt
        t0 = time.perf_counter()
        ca = self.couple(self.X)
        t_coup = time.perf_counter() - t0
        self.system.set_rhs(*self._rhs(t_new))
        z = self._pack()
        t0 = time.perf_counter()
        r_s, K_T = solid_residual_and_tangent(pr.S, pr.law, self.X, pr.geom, pr.K_s)
        R = self.newton_residual(z, r_s)
        r0 = max(1.0, np.abs(R).max())
        its = []
        nit = 0
        while True:
            self.system.set_solid_block(K_T)
            res = self._gmres(-R)
            its.append(res.iterations)
            nit += 1
            z, R, r_s, K_T = self._line_search(z, res.x, np.linalg.norm(R), c.newton_tol * r0)
            rn = np.abs(R).max()
            if rn <= c.newton_tol * r0:
                break
            if nit >= c.newton_max_nit:
                raise NewtonDiverged(f"step {self.step_index + 1}: residual {rn:.3e} after {nit} iterations")
        t_sol = time.perf_counter() - t0
        return self._accept(z, t_new, nit, float(np.mean(its)), t_coup, t_sol, ca)

    def _line_search(self, z, dz, rn0, good_enough):
        """Backtrack along ``dz`` until the residual is finite and decreases.

        The full step is taken whenever it reduces the residual 2-norm or its
        max-norm already meets ``good_enough``, so converging iterations keep
        their quadratic rate.
        """
        pr = self.prob
        alpha = 1.0
        for _ in range(NEWTON_MAX_HALVINGS + 1):
            zt = z + alpha * dz
            self.system.project_pressure(zt)
            X = self.system.split(zt)[2]
            try:
                r_s, K_T = solid_residual_and_tangent(pr.S, pr.law, X, pr.geom, pr.K_s)
                R = self.newton_residual(zt, r_s)
                rn = np.linalg.norm(R)
            except NonFiniteValue:
                rn = np.inf
            if rn < rn0 or np.isfinite(rn) and np.abs(R).max() <= good_enough:
                return zt, R, r_s, K_T
            alpha *= 0.5
        raise NewtonDiverged(f"step {self.step_index + 1}: no residual decrease along the Newton direction")

    def _accept(self, z, t_new, nit, its, t_coup, t_sol, ca) -> StepReport:
        u, p, X, lam = self._unpack(z)
        s = self.system
        con = s.L_f @ u - s.L_s @ (X - self.X) / s.dt
        div = np.max(np.abs(s.B @ u), initial=0.0)
        areas = mapped_areas(self.prob.S.mesh, X)
        if np.any(areas <= 0):
            bad = np.flatnonzero(areas <= 0)
            msg = f"step {self.step_index + 1}: {bad.size} mapped solid elements inverted"
            if self.cfg.abort_on_inversion:
                raise ElementInversion(msg)
            log.warning(msg)
        self.state = SolidState(X, self.X)
        self.u, self.p, self.lam = u, p, lam
        self.step_index += 1
        self.t = t_new
        vol = float(areas.sum())
        self.V_min = min(self.V_min, vol)
        return StepReport(self.step_index, t_new, nit, its, t_coup, t_sol, vol, volume_loss_pct(self.V0, self.V_min),
                          ca.L_f.nnz, {k: v for k, v in ca.stats.items() if np.isscalar(v) or isinstance(v, str)},
                          float(np.max(np.abs(con), initial=0.0)), float(div))


@dataclass
class RunResult:
    reports: list
    fields: dict
    sim: Simulation
    failed: bool = False
    message: str = ""

    @property
    def vol_loss_pct(self) -> float:
        return volume_loss_pct(self.sim.V0, self.sim.V_min)


def run_simulation(cfg: SimConfig, sink: DiagnosticsSink | None = None, n_steps: int | None = None,
                   callback=None, raise_errors: bool = False, problem: Problem | None = None) -> RunResult:
    """Run ``cfg.T / cfg.dt`` steps (or ``n_steps``), streaming reports to ``sink``.

    A failing step stops the run; the partial output stays on disk and the
    result is marked failed unless ``raise_errors`` is set.
    """
    sim = Simulation(cfg, problem)
    N = cfg.n_steps if n_steps is None else n_steps
    reports = []
    spaces = {"V": sim.prob.V, "Q": sim.prob.Q, "S": sim.prob.S}
    if sink is not None and sink.vtk:
        sink.snapshot(0, sim.fields(), spaces)
    failed, msg = False, ""
    for k in range(N):
        try:
            rep = sim.step()
        except FsiError as exc:
            if raise_errors:
                raise
            failed, msg = True, f"{type(exc).__name__}: {exc}"
            log.error("run aborted at step %d: %s", k + 1, msg)
            reports.append(StepReport(k + 1, (k + 1) * cfg.dt, 0, 0, 0, 0, float("nan"), float("nan"),
                                      failed=True, message=msg))
            break
        reports.append(rep)
        if callback is not None:
            callback(sim, rep)
        if sink is not None:
            sink.record(rep)
            if rep.step % sink.stride == 0 or rep.step == N:
                if sink.vtk:
                    sink.snapshot(rep.step, sim.fields(), spaces)
    return RunResult(reports, sim.fields(), sim, failed, msg)


class StokesStepper:
    """Unsteady Stokes sub-solver (no solid): backward Euler on the ``A11`` block."""

    def __init__(self, V: FeSpace, Q: FeSpace, rho: float, nu: float, dt: float, dirichlet=("boundary",)):
        self.V, self.Q = V, Q
        self.rho, self.dt = rho, dt
        self.blocks = assemble_fluid_blocks(V, Q, rho, nu, dt)
        empty_s = sp.csr_matrix((0, 0))
        sys = BlockSystem(self.blocks.A_f, self.blocks.B, empty_s, sp.csr_matrix((0, V.n_dofs)), empty_s, dt)
        self.system = sys.with_velocity_constraints(V.dofs(list(dirichlet)))
        self.system.pressure_null = detect_pressure_null(self.system.B, constant_pressure_vector(Q),
                                                         pressure_means(Q))
        self.factor = factorize_A11(self.system)

    def step(self, u_n, f_load, u_bc=None):
        """Advance one step; ``f_load`` is the assembled body force at the new time."""
        nu_ = self.V.n_dofs
        rhs = np.zeros(nu_ + self.Q.n_dofs)
        rhs[:nu_] = (self.rho / self.dt) * (self.blocks.M_f @ u_n) + f_load
        rhs[self.system.vel_fixed] = 0.0
        z = self.factor.solve(rhs)
        if self.system.pressure_null is not None:
            const, w = self.system.pressure_null
            pz = z[nu_:]
            pz -= (w @ pz) * const
        return z[:nu_], z[nu_:]
