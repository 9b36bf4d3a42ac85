"""
Acceptance suite.

Each test prints one ``A<n> PASS|FAIL`` line with the measured quantities
and then asserts the criterion.  The lines are also collected and repeated
in the terminal summary so they appear even with output capture on.
Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""
import time

import numba
import numpy as np
import pytest
import sympy as sy

from fsidlm.assembly import assemble_fluid_load, assemble_multiplier_mass
from fsidlm.config import SimConfig
from fsidlm.coupling import assemble_coupling
from fsidlm.diagnostics import scaling_harness
from fsidlm.integrator import Simulation, StokesStepper, build_problem, run_simulation
from fsidlm.mesh import fluid_box_mesh, solid_rect_mesh
from fsidlm.spaces import (disc_p1_space, gauss_legendre_square, q1_basis, q2_basis, vector_q1_space,
                           vector_q2_space)
from fsidlm.studies import level_config, run_one

from conftest import ACCEPTANCE_LINES, small_bar

pytestmark = pytest.mark.acceptance

# desk-scale annulus levels: fluid n x n, solid 3n x 3n/2; the finest has 30534 dofs
LEVELS = (8, 16, 32)
BASE = SimConfig(fluid_nx=32, fluid_ny=32, solid_nx=96, solid_ny=48)


def report(tag, ok, detail):
    line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
    print("\n" + line)
    ACCEPTANCE_LINES.append(line)
    return ok


# ---------------------------------------------------------------------------
# 1. partition of unity
# ---------------------------------------------------------------------------

def test_a1_partition_of_unity():
    rng = np.random.default_rng(2024)
    worst = {"VertexRule": 0.0, "Intersection": 0.0}
    t0 = time.perf_counter()
    for nf in LEVELS:
        prob = build_problem(level_config(BASE, nf))
        V, S = prob.V, prob.S
        h = 0.2 / S.mesh.ny
        ones_f = np.ones(V.n_dofs)
        Ls1 = assemble_multiplier_mass(S) @ np.ones(S.n_dofs)
        for _ in range(5):
            X = np.clip(prob.X0 + 0.25 * h * rng.standard_normal(S.n_dofs), 0.0, 1.0)
            for strategy in worst:
                L = assemble_coupling(strategy, V, S, X).L_f
                worst[strategy] = max(worst[strategy], np.abs(L @ ones_f - Ls1).max())
    ok = all(v <= 1e-12 for v in worst.values())
    report("A1", ok, f"max |L_f 1 - L_s 1| VertexRule {worst['VertexRule']:.2e}, "
                     f"Intersection {worst['Intersection']:.2e} (tol 1e-12, {time.perf_counter() - t0:.0f}s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. intersection quadrature exactness
# ---------------------------------------------------------------------------

def _piece_oracle(V, S, n_gauss=10):
    """Entries of L_f by n x n Gauss on every (solid element, fluid cell) rectangle overlap."""
    fm = V.mesh
    hx, hy = fm.cell_size
    g = gauss_legendre_square(n_gauss)
    L = np.zeros((S.n_dofs, V.n_dofs))
    for snodes in S.elem_nodes:
        c = S.node_coords[snodes]
        x0, y0 = c.min(axis=0)
        x1, y1 = c.max(axis=0)
        for j in range(int(np.floor(y0 / hy + 1e-9)), int(np.ceil(y1 / hy - 1e-9))):
            for i in range(int(np.floor(x0 / hx + 1e-9)), int(np.ceil(x1 / hx - 1e-9))):
                a0, a1 = max(x0, i * hx), min(x1, (i + 1) * hx)
                b0, b1 = max(y0, j * hy), min(y1, (j + 1) * hy)
                if a1 - a0 <= 0 or b1 - b0 <= 0:
                    continue
                x = a0 + (a1 - a0) * g.points[:, 0]
                y = b0 + (b1 - b0) * g.points[:, 1]
                w = g.weights * (a1 - a0) * (b1 - b0)
                chi, _ = q1_basis((x - x0) / (x1 - x0), (y - y0) / (y1 - y0))
                phi, _ = q2_basis(x / hx - i, y / hy - j)
                local = np.einsum("q,qa,qb->ab", w, chi, phi)
                cell = i + fm.nx * j
                for comp in range(2):
                    rows = comp * S.n_nodes + snodes
                    cols = comp * V.n_nodes + V.elem_nodes[cell]
                    L[np.ix_(rows, cols)] += local
    return L


def test_a2_intersection_quadrature_exact():
    V = vector_q2_space(fluid_box_mesh(8, 8))
    cases = {
        "solid finer": vector_q1_space(solid_rect_mesh(8, 4, (0.25, 0.75, 0.25, 0.5))),
        "solid coarser": vector_q1_space(solid_rect_mesh(2, 1, (0.125, 0.875, 0.25, 0.75))),
    }
    errs = {}
    for name, S in cases.items():
        X = np.concatenate([S.node_coords[:, 0], S.node_coords[:, 1]])
        L = assemble_coupling("Intersection", V, S, X).L_f.toarray()
        errs[name] = np.abs(L - _piece_oracle(V, S)).max()
    ok = max(errs.values()) <= 1e-12
    report("A2", ok, ", ".join(f"{k} max entry error {v:.2e}" for k, v in errs.items()) + " (tol 1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# 3. energy stability
# ---------------------------------------------------------------------------

def test_a3_energy_non_increasing():
    details, ok = [], True
    for dt in (0.02, 0.01, 0.005):
        cfg = level_config(BASE, LEVELS[0]).replace(dt=dt)
        energies = []
        run_simulation(cfg, callback=lambda sim, rep: energies.append(sum(sim.energy())), raise_errors=True)
        sim0 = Simulation(cfg)
        e = np.array([sum(sim0.energy())] + energies)
        rise = np.max(np.diff(e))
        good = rise <= 1e-12 * abs(e[0])
        ok &= good
        details.append(f"dt={dt}: {len(e) - 1} steps, max increase {rise:.2e}")
    report("A3", ok, "; ".join(details))
    assert ok


# ---------------------------------------------------------------------------
# 4. volume loss trend
# ---------------------------------------------------------------------------

def test_a4_volume_loss_trend():
    rows = [run_one(level_config(BASE.replace(coupling="VertexRule"), nf)) for nf in LEVELS]
    loss = [r["vol_loss"] for r in rows]
    finest = rows[-1]
    decreasing = all(a > b for a, b in zip(loss, loss[1:]))
    ok = decreasing and finest["dofs"] == 30534 and finest["vol_loss"] < 0.2
    report("A4", ok, "VertexRule loss % " + ", ".join(f"{r['dofs']} dofs: {r['vol_loss']:.4f}" for r in rows)
           + f"; strictly decreasing {decreasing}; {finest['dofs']} dofs < 0.2%: {finest['vol_loss'] < 0.2} "
             "(published 0.0699)")
    assert ok


# ---------------------------------------------------------------------------
# 5. preconditioner robustness
# ---------------------------------------------------------------------------

A5_STEPS = 50
PUBLISHED_TRI_INTERSECTION = (7, 9, 11)


def _its(coupling, precon, nf):
    return run_one(level_config(BASE.replace(coupling=coupling, precon=precon), nf), A5_STEPS)["its"]


def test_a5_preconditioner_robustness():
    diag_i = [_its("Intersection", "BlockDiag", nf) for nf in LEVELS]
    tri_i = [_its("Intersection", "BlockTri", nf) for nf in LEVELS]
    diag_v = [_its("VertexRule", "BlockDiag", nf) for nf in LEVELS]
    tri_v = [_its("VertexRule", "BlockTri", nf) for nf in LEVELS]
    grows = all(a < b for a, b in zip(diag_i, diag_i[1:]))
    in_band = all(0.4 * p <= m <= 1.6 * p for m, p in zip(tri_i, PUBLISHED_TRI_INTERSECTION))
    bounded = max(diag_v) <= 16 and max(tri_v) <= 9.6
    ok = grows and in_band and bounded
    fmt = lambda v: "/".join(f"{x:.1f}" for x in v)
    report("A5", ok, f"mean its over {A5_STEPS} steps at fluid {'/'.join(map(str, LEVELS))}: "
                     f"Intersection BlockDiag {fmt(diag_i)} (grows {grows}), BlockTri {fmt(tri_i)} "
                     f"(band 7/9/11 +-60%: {in_band}); VertexRule BlockDiag {fmt(diag_v)} (<=16), "
                     f"BlockTri {fmt(tri_v)} (<=9.6): {bounded}")
    assert ok


# ---------------------------------------------------------------------------
# 6. Newton behaviour
# ---------------------------------------------------------------------------

def test_a6_newton():
    cfg = small_bar(20, precon="BlockTri", dt=0.005)
    nits = []
    res = run_simulation(cfg, n_steps=15, callback=lambda sim, rep: nits.append(rep.nit))
    late = nits[5:]
    nit_ok = not res.failed and len(late) > 0 and max(late) <= 3

    # full Jacobian of the Newton residual against central differences
    rng = np.random.default_rng(7)
    sim = Simulation(cfg)
    pr = sim.prob
    s = sim.system
    sim.couple(sim.X)
    s.set_rhs(*sim._rhs(cfg.dt))
    o = s.offsets
    h_s = 0.1 / cfg.solid_ny
    worst = 0.0
    from fsidlm.assembly import solid_residual_and_tangent
    for _ in range(10):
        z = rng.standard_normal(s.n)
        z[o[2]:o[3]] = pr.X0 + 0.05 * h_s * rng.standard_normal(pr.S.n_dofs)
        z[o[2] + s.solid_fixed] = s.solid_values
        d = rng.standard_normal(s.n)
        d[o[2] + s.solid_fixed] = 0.0
        _, K_T = solid_residual_and_tangent(pr.S, pr.law, z[o[2]:o[3]], pr.geom, pr.K_s)
        s.set_solid_block(K_T)
        Jd = s.to_sparse() @ d
        eps = 1e-7
        fd = (sim.newton_residual(z + eps * d) - sim.newton_residual(z - eps * d)) / (2 * eps)
        worst = max(worst, np.linalg.norm(Jd - fd) / np.linalg.norm(fd))
    jac_ok = worst <= 1e-6
    ok = nit_ok and jac_ok
    report("A6", ok, f"bar dt=0.005, {res.sim.system.n} dofs: nit per step {nits} "
                     f"(<=3 after step 5: {nit_ok}); Jacobian vs FD max rel error {worst:.2e} (<=1e-6)")
    assert ok


# ---------------------------------------------------------------------------
# 7. time step refinement
# ---------------------------------------------------------------------------

def test_a7_dt_refinement():
    horizon = 0.2
    its = {}
    for dt in (0.02, 0.01, 0.005):
        cfg = level_config(BASE.replace(coupling="Intersection", precon="BlockTri", dt=dt), 16)
        its[dt] = run_one(cfg, int(round(horizon / dt)))["its"]
    vals = list(its.values())
    ok = all(b <= a for a, b in zip(vals, vals[1:]))
    report("A7", ok, "Intersection BlockTri mean its " + ", ".join(f"dt={k}: {v:.2f}" for k, v in its.items())
           + f"; non-increasing {ok}")
    assert ok


# ---------------------------------------------------------------------------
# 8. threaded coupling assembly
# ---------------------------------------------------------------------------

def test_a8_threaded_scaling():
    cfg = BASE.replace(coupling="Intersection")
    rows = scaling_harness(cfg, (1, 4), repeats=3)
    coup = {r["threads"]: r for r in rows if r["phase"] == "coupling"}
    speedup = coup[4]["speedup"]
    identical = all(r["identical"] for r in rows)
    ok = speedup >= 2.0 and identical
    report("A8", ok, f"Intersection coupling speedup at 4 threads {speedup:.2f} (>=2.0), effective threads "
                     f"{coup[4]['effective_threads']} of {numba.config.NUMBA_NUM_THREADS} available; "
                     f"bitwise identical {identical}")
    assert ok


# ---------------------------------------------------------------------------
# 9. Stokes manufactured solution
# ---------------------------------------------------------------------------

def test_a9_stokes_mms():
    x, y, t = sy.symbols("x y t")
    rho, nu, dt = 1.0, 0.1, 0.1
    psi = x ** 2 * (1 - x) ** 2 * y ** 2 * (1 - y) ** 2
    U = [sy.diff(psi, y), -sy.diff(psi, x)]  # divergence free, zero on the boundary
    P = sy.cos(sy.pi * x) * sy.sin(sy.pi * y)
    X = (x, y)

    def eps(i, j):
        return (sy.diff(U[i], X[j]) + sy.diff(U[j], X[i])) / 2

    # u(x, t) = (1 + t) U(x): linear in time, so backward Euler adds no time error
    f = [rho * U[i] + (1 + t) * (-sum(sy.diff(nu * eps(i, j), X[j]) for j in range(2)) + sy.diff(P, X[i]))
         for i in range(2)]
    f_num = sy.lambdify((x, y, t), f, "numpy")
    U_num = sy.lambdify((x, y), U, "numpy")
    errs = []
    for n in (4, 8, 16):
        m = fluid_box_mesh(n, n)
        V, Q = vector_q2_space(m), disc_p1_space(m)
        stepper = StokesStepper(V, Q, rho, nu, dt)
        c = V.node_coords
        u = np.concatenate([np.broadcast_to(v, c[:, 0].shape) for v in U_num(c[:, 0], c[:, 1])]).astype(float)
        tn = 0.0
        for k in range(3):
            tn = (k + 1) * dt
            F = assemble_fluid_load(V, lambda a, b: [np.broadcast_to(v, a.shape) for v in f_num(a, b, tn)])
            u, _ = stepper.step(u, F)
        g = gauss_legendre_square(6)
        N, _ = q2_basis(g.points[:, 0], g.points[:, 1])
        hx, hy = m.cell_size
        o = m.cell_origin(np.arange(m.n_elements))
        qx = o[:, None, 0] + hx * g.points[None, :, 0]
        qy = o[:, None, 1] + hy * g.points[None, :, 1]
        exact = U_num(qx, qy)
        err2 = 0.0
        for comp in range(2):
            uh = np.einsum("qa,ea->eq", N, u[comp * V.n_nodes + V.elem_nodes])
            err2 += np.sum((uh - (1 + tn) * exact[comp]) ** 2 * g.weights * hx * hy)
        errs.append(np.sqrt(err2))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    ok = rates.min() >= 2.5
    report("A9", ok, "L2 velocity errors " + ", ".join(f"{e:.3e}" for e in errs)
           + " at n=4/8/16; observed orders " + ", ".join(f"{r:.2f}" for r in rates) + " (>=2.5)")
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v", "-s"]))
