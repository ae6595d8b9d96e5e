import csv
import re

import numpy as np
import pytest

from nnrk_fracture.driver import Simulation
from nnrk_fracture.export import (
    CELL_COLUMNS,
    atomic_write_text,
    export_fields,
    write_cell_csv,
    write_csv,
    write_mesh_csv,
    write_transect,
    write_vtk,
)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_atomic_write_leaves_no_temporaries(tmp_path):
    target = tmp_path / "sub" / "a.csv"
    write_csv(target, ("a", "b"), [(1, 0.5)])
    write_csv(target, ("a", "b"), [(2, 0.25)])
    atomic_write_text(tmp_path / "sub" / "note.txt", "hello")
    assert sorted(p.name for p in target.parent.iterdir()) == ["a.csv", "note.txt"]
    assert read_rows(target) == [{"a": "2", "b": "0.25"}]


def test_floats_round_trip_exactly(tmp_path):
    value = 0.1 + 0.2
    write_csv(tmp_path / "f.csv", ("v",), [(np.float64(value),)])
    assert float(read_rows(tmp_path / "f.csv")[0]["v"]) == value


@pytest.fixture
def bar(make_config):
    return Simulation(make_config())


def test_zero_state_cell_file(bar, tmp_path):
    path = write_cell_csv(tmp_path / "cells.csv", bar.cell_fields())
    rows = read_rows(path)
    assert len(rows) == bar.mesh.n_cells
    assert tuple(rows[0]) == CELL_COLUMNS
    for name in ("u1", "u2", "u1_nn", "eps11", "eps12", "damage", "psi0_plus"):
        assert all(float(r[name]) == 0.0 for r in rows)
    assert sum(float(r["area"]) for r in rows) == pytest.approx(2.0)


def test_vtk_counts(bar, tmp_path):
    path = write_vtk(tmp_path / "cells.vtk", bar.mesh, bar.cell_fields())
    text = path.read_text()
    assert int(re.search(r"CELL_TYPES (\d+)", text).group(1)) == bar.mesh.n_cells
    assert int(re.search(r"CELL_DATA (\d+)", text).group(1)) == bar.mesh.n_cells
    assert "damage" in text


def test_export_fields_formats(bar, tmp_path):
    written = export_fields(bar.cell_fields(), bar.mesh, tmp_path / "fields", "step_0001", ("csv", "vtk"))
    assert [p.name for p in written] == ["step_0001.csv", "step_0001.vtk"]
    assert export_fields(bar.cell_fields(), bar.mesh, tmp_path / "none", "s", ()) == []


def test_mesh_dump(bar, tmp_path):
    rows = read_rows(write_mesh_csv(tmp_path / "mesh.csv", bar.mesh))
    cells = [r for r in rows if r["kind"] == "cell"]
    segments = [r for r in rows if r["kind"] == "segment"]
    assert len(cells) == bar.mesh.n_cells
    assert len(segments) == bar.mesh.n_segments
    assert {r["region"] for r in segments} == {"", "bottom", "right", "top", "left"}


def test_transect_of_patch_field(patch_case, tmp_path):
    cfg, eps, eps22, _ = patch_case
    sim = Simulation(cfg)
    sim.stage_a(sim.boundary(0))
    points, u, strain, damage = sim.transect((0.1, 0.5), (1.9, 0.5), 25)
    np.testing.assert_allclose(u[:, 0], eps * points[:, 0], atol=1e-11)
    np.testing.assert_allclose(u[:, 1], eps22 * 0.5, atol=1e-11)
    np.testing.assert_allclose(strain[:, 0, 0], eps, rtol=1e-8)
    np.testing.assert_array_equal(damage, 0.0)

    rows = read_rows(write_transect(tmp_path / "t.csv", points, u, strain, damage))
    assert len(rows) == 25
    assert float(rows[-1]["s"]) == pytest.approx(1.8)


def test_transect_outside_is_nan(bar):
    _, u, strain, damage = bar.transect((1.0, 0.5), (3.0, 0.5), 5)
    assert np.isnan(u[-1]).all() and np.isnan(damage[-1])
    assert not np.isnan(u[0]).any()
