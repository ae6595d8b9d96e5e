import numpy as np
import pytest

from nnrk_fracture.errors import ConfigError
from nnrk_fracture.loads import (
    DirichletCondition,
    FieldExpression,
    LoadProgram,
    NeumannCondition,
    parse_expression,
)

PTS = np.array([[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]])


def test_unknown_symbol_rejected():
    with pytest.raises(ConfigError, match="unknown symbols"):
        parse_expression("g*z", "load.dirichlet.0.u1")


def test_bad_syntax_rejected():
    with pytest.raises(ConfigError):
        parse_expression("g*(x", "load.dirichlet.0.u1")


def test_constant_expression_broadcasts():
    f = FieldExpression.parse(0.25)
    np.testing.assert_array_equal(f(PTS, 3.0), 0.25)
    np.testing.assert_array_equal(f.rate(PTS, 3.0), 0.0)
    assert not f.driven


def test_expression_value_and_rate():
    f = FieldExpression.parse("g*(1 - x**2)/8")
    np.testing.assert_allclose(f(PTS, 2.0), 2.0 * (1 - PTS[:, 0] ** 2) / 8)
    np.testing.assert_allclose(f.rate(PTS, 2.0), (1 - PTS[:, 0] ** 2) / 8)
    assert f.driven


def test_program_needs_a_step():
    with pytest.raises(ConfigError):
        LoadProgram(np.array([]))


def test_uniform_program():
    program = LoadProgram.uniform(1e-4, 3)
    np.testing.assert_allclose(program.values, [1e-4, 2e-4, 3e-4])
    assert program.n_steps == 3


def test_unknown_region():
    program = LoadProgram(np.array([1.0]), dirichlet=[DirichletCondition("nowhere", {0: FieldExpression.parse(0)})])
    with pytest.raises(ConfigError) as info:
        program.check_regions(("left", "right"))
    assert info.value.path == "load.dirichlet.0.region"


def test_boundary_data(grid_mesh):
    _, mesh = grid_mesh
    program = LoadProgram(
        np.array([0.5, 1.0]),
        dirichlet=[
            DirichletCondition("left", {0: FieldExpression.parse(0), 1: FieldExpression.parse(0)}),
            DirichletCondition("right", {0: FieldExpression.parse("g")}),
        ],
        neumann=[NeumannCondition("top", (FieldExpression.parse(0), FieldExpression.parse("-2*g")))],
    )
    data = program.boundary_data(mesh, 1)
    n_left = len(mesh.region_segments("left"))
    n_right = len(mesh.region_segments("right"))
    assert len(data.dir_point) == 2 * n_left + n_right
    right = data.dir_comp.numpy() == 0
    right &= np.arange(len(data.dir_point)) >= 2 * n_left
    np.testing.assert_allclose(data.dir_value.numpy()[right], 1.0)
    np.testing.assert_allclose(data.dir_rate.numpy()[right], 1.0)
    assert data.u_ref == 1.0
    assert float(data.dir_length.sum()) == pytest.approx(2 * 1.0 + 1.0)
    # N/mm^2 to kN/mm^2
    np.testing.assert_allclose(data.neu_traction.numpy()[:, 1], -2e-3)
    assert float(data.neu_length.sum()) == pytest.approx(2.0)
    np.testing.assert_array_equal(data.body.numpy(), 0.0)
    assert data.body.shape == (mesh.n_cells, 2)


def test_body_force_units(grid_mesh):
    _, mesh = grid_mesh
    program = LoadProgram(np.array([1.0]),
                          body_force=(FieldExpression.parse("1000*g"), FieldExpression.parse(0)))
    data = program.boundary_data(mesh, 0)
    np.testing.assert_allclose(data.body.numpy()[:, 0], 1.0)
    assert len(data.dir_point) == 0 and data.u_ref == 0.0
