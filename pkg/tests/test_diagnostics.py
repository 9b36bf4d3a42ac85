import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsidlm.assembly import assemble_fluid_blocks
from fsidlm.diagnostics import (CSV_COLUMNS, DiagnosticsSink, kinetic_energy, solid_volume, volume_loss_pct,
                                write_vtk_snapshot)
from fsidlm.errors import NegativeElementArea
from fsidlm.integrator import run_simulation
from fsidlm.mesh import fluid_box_mesh, quarter_annulus_mesh, solid_rect_mesh
from fsidlm.spaces import disc_p1_space, vector_q1_space, vector_q2_space

from conftest import small_annulus

RECT = solid_rect_mesh(5, 3, (0.1, 0.6, 0.2, 0.5))


def _coords(mesh):
    v = mesh.vertices
    return v[:, 0].copy(), v[:, 1].copy()


def test_identity_volume_and_loss():
    x, y = _coords(RECT)
    assert solid_volume(RECT, np.concatenate([x, y])) == pytest.approx(0.15, abs=1e-15)
    assert volume_loss_pct(2.0, 1.5) == pytest.approx(25.0)
    assert volume_loss_pct(2.0, 2.0) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-2, 2), st.floats(0.2, 5))
def test_volume_invariant_under_translation_and_unimodular_maps(tx, ty, shear, stretch):
    x, y = _coords(RECT)
    V0 = solid_volume(RECT, np.concatenate([x, y]))
    A = np.array([[stretch, shear], [0.0, 1.0 / stretch]])
    xy = np.column_stack([x, y]) @ A.T + [tx, ty]
    assert solid_volume(RECT, np.concatenate([xy[:, 0], xy[:, 1]])) == pytest.approx(V0, rel=1e-12)


def test_annulus_volume_converges():
    exact = np.pi / 4 * (0.25 - 0.09)
    m = quarter_annulus_mesh(64, 32)
    x, y = _coords(m)
    assert solid_volume(m, np.concatenate([x, y])) == pytest.approx(exact, rel=1e-3)


def test_inverted_element_raises():
    x, y = _coords(RECT)
    with pytest.raises(NegativeElementArea) as info:
        solid_volume(RECT, np.concatenate([-x, y]))
    assert len(info.value.elements) == RECT.n_elements


def test_kinetic_energy_of_uniform_flow():
    m = fluid_box_mesh(3, 3)
    V, Q = vector_q2_space(m), disc_p1_space(m)
    fb = assemble_fluid_blocks(V, Q, 1.0, 0.1, 0.01)
    u = np.concatenate([np.full(V.n_nodes, 3.0), np.full(V.n_nodes, 4.0)])
    assert kinetic_energy(fb.M_f, u, 2.0) == pytest.approx(25.0)


def test_vtk_uniform_velocity(tmp_path):
    m = fluid_box_mesh(2, 2)
    V, Q = vector_q2_space(m), disc_p1_space(m)
    S = vector_q1_space(solid_rect_mesh(2, 1))
    u = np.concatenate([np.ones(V.n_nodes), np.zeros(V.n_nodes)])
    X = np.concatenate([S.node_coords[:, 0], S.node_coords[:, 1]])
    f, s = write_vtk_snapshot(tmp_path, 3, {"u": u, "p": np.zeros(Q.n_dofs), "X": X},
                              {"V": V, "Q": Q, "S": S})
    assert f.name == "fluid_000003.vtk" and s.name == "solid_000003.vtk"
    lines = f.read_text().splitlines()
    i = lines.index("VECTORS velocity double")
    assert lines[i + 1:i + 10] == ["1 0 0"] * 9
    text = s.read_text()
    assert "CELLS 2 10" in text and "CELL_TYPES 2" in text


def test_vtk_rejects_wrong_field_size(tmp_path):
    m = fluid_box_mesh(2, 2)
    V, Q = vector_q2_space(m), disc_p1_space(m)
    S = vector_q1_space(solid_rect_mesh(2, 1))
    with pytest.raises(ValueError):
        write_vtk_snapshot(tmp_path, 0, {"u": np.zeros(3), "p": np.zeros(Q.n_dofs), "X": np.zeros(S.n_dofs)},
                           {"V": V, "Q": Q, "S": S})


def test_sink_csv_and_snapshot_schedule(tmp_path):
    cfg = small_annulus(4, T=2.0, dt=0.01)
    with DiagnosticsSink(tmp_path, snapshot_stride=10, vtk=True, raw_fields=True) as sink:
        res = run_simulation(cfg, sink)
    assert not res.failed and len(res.reports) == 200
    with open(tmp_path / "steps.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 201
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 201))
    assert len(sorted(tmp_path.glob("fluid_*.vtk"))) == 21
    assert len(sorted(tmp_path.glob("solid_*.vtk"))) == 21
    assert len(sorted(tmp_path.glob("fields_*.npz"))) == 21
    data = np.load(tmp_path / "fields_000200.npz")
    np.testing.assert_array_equal(data["X"], res.fields["X"])
    # the reported loss is a running maximum
    loss = [float(r[7]) for r in rows[1:]]
    assert np.all(np.diff(loss) >= 0)


def test_sink_without_csv(tmp_path):
    with DiagnosticsSink(tmp_path, vtk=False, csv_out=False) as sink:
        run_simulation(small_annulus(4), sink, n_steps=2)
    assert not (tmp_path / "steps.csv").exists()


def test_empty_run_writes_one_snapshot_pair(tmp_path):
    with DiagnosticsSink(tmp_path, vtk=True) as sink:
        res = run_simulation(small_annulus(4, T=0.0), sink)
    assert res.reports == []
    assert [p.name for p in sorted(tmp_path.glob("*.vtk"))] == ["fluid_000000.vtk", "solid_000000.vtk"]
