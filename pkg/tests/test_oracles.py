import numpy as np
import pytest
import sympy

from nnrk_fracture.errors import ConfigError
from nnrk_fracture.loads import X, Y
from nnrk_fracture.oracles import (
    DegradedBarOracle,
    ExpressionOracle,
    ReferenceOracle,
    build_oracle,
    cell_quadrature,
    error_norms,
    manufactured_body_force,
    manufactured_loads,
)
from nnrk_fracture.settings import parse_config


def test_degraded_bar_is_continuous():
    bar = DegradedBarOracle(g=1e-2, length=2.0, zone_width=0.005, modulus_factor=1e-2)
    w = 0.005 / 2
    for edge in (-w, w):
        below, above = bar.u1(np.array([edge - 1e-12, edge + 1e-12]))
        assert below == pytest.approx(above, abs=1e-9)
    np.testing.assert_allclose(bar.u1(np.array([-1.0, 1.0])), [-1e-2, 1e-2])
    assert bar.zone_strain == pytest.approx(100 * bar.bulk_strain)


def test_degraded_bar_gradient():
    bar = DegradedBarOracle(g=1e-2, length=2.0, zone_width=0.1, modulus_factor=0.5)
    grad = bar.gradient(np.array([[0.0, 0.0], [0.5, 0.1]]))
    np.testing.assert_allclose(grad[:, 0, 0], [bar.zone_strain, bar.bulk_strain])
    np.testing.assert_array_equal(grad[:, 1], 0.0)
    np.testing.assert_array_equal(bar.displacement(np.array([[0.3, 0.2]]))[:, 1], 0.0)


def test_expression_gradient_matches_finite_differences():
    oracle = ExpressionOracle("1e-3*sin(x)*exp(y)", "g*cos(x)*(1 + y**2)", g=2.0)
    pts = np.array([[0.2, 0.3], [0.7, -0.4]])
    grad = oracle.gradient(pts)
    h = 1e-6
    for a, e in enumerate(np.eye(2)):
        fd = (oracle.displacement(pts + h * e) - oracle.displacement(pts - h * e)) / (2 * h)
        np.testing.assert_allclose(grad[:, :, a], fd, rtol=1e-7, atol=1e-12)


def test_constant_expression_broadcasts():
    oracle = ExpressionOracle("0", "1")
    np.testing.assert_array_equal(oracle.displacement(np.zeros((3, 2))), [[0.0, 1.0]] * 3)
    np.testing.assert_array_equal(oracle.gradient(np.zeros((3, 2))), 0.0)


def test_body_force_of_quadratic_field():
    lam, mu = 3.0, 2.0
    b1, b2 = manufactured_body_force("x**2", "0", lam, mu)
    assert sympy.simplify(b1 + 2 * (lam + 2 * mu)) == 0
    assert b2 == 0


def test_body_force_of_linear_field_vanishes():
    b1, b2 = manufactured_body_force("x + 2*y", "3*x - y", 1.0, 1.0)
    assert (b1, b2) == (0, 0)
    assert not ({X, Y} & (b1.free_symbols | b2.free_symbols))


def test_manufactured_loads(make_config):
    cfg = make_config(oracle={"kind": "expression", "u1": "x**2", "u2": "0"})
    out = manufactured_loads(cfg)
    assert out.load.body_force is not None
    assert [d.u1 for d in out.load.dirichlet] == ["x**2", "x**2"]
    assert out.load.dirichlet[1].u2 is None
    plain = make_config()
    assert manufactured_loads(plain) is plain


def test_exact_field_has_zero_error(grid_mesh):
    _, mesh = grid_mesh
    oracle = ExpressionOracle("1e-3*sin(x)*exp(y)", "1e-3*cos(x)")
    quad = cell_quadrature(mesh)
    norms = error_norms(oracle.displacement(quad.points), quad, oracle.gradient(mesh.centroids), mesh, oracle)
    assert norms.l2 == 0.0 and norms.h1 == 0.0
    assert norms.l2_relative == 0.0


def test_error_of_a_shifted_field(grid_mesh):
    _, mesh = grid_mesh
    oracle = ExpressionOracle("1", "0")
    quad = cell_quadrature(mesh)
    u = oracle.displacement(quad.points) + np.array([0.5, 0.0])
    norms = error_norms(u, quad, np.zeros((mesh.n_cells, 2, 2)), mesh, oracle)
    # 0.5 over an area of 2
    assert norms.l2 == pytest.approx(0.5 * np.sqrt(2.0))
    assert norms.l2_relative == pytest.approx(0.5)
    assert norms.h1 == 0.0 and np.isnan(norms.h1_relative)


def test_quadrature_weights_sum_to_area(grid_mesh):
    _, mesh = grid_mesh
    quad = cell_quadrature(mesh)
    assert quad.weights.sum() == pytest.approx(2.0, rel=1e-12)
    np.testing.assert_array_equal(mesh.locate(quad.points), quad.cell)


def test_reference_oracle(tmp_path):
    g = np.linspace(0.0, 1.0, 5)
    pts = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    u1, u2 = 2 * pts[:, 0] + pts[:, 1], -pts[:, 1]
    path = tmp_path / "ref.csv"
    np.savetxt(path, np.column_stack([pts, u1, u2]), delimiter=",", header="x,y,u1,u2", comments="")
    oracle = ReferenceOracle(path)
    samples = np.array([[0.3, 0.6], [0.81, 0.12]])
    np.testing.assert_allclose(oracle.displacement(samples),
                               np.column_stack([2 * samples[:, 0] + samples[:, 1], -samples[:, 1]]), atol=1e-12)
    assert oracle.gradient(samples) is None


def test_reference_oracle_errors(tmp_path):
    with pytest.raises(ConfigError):
        ReferenceOracle(tmp_path / "missing.csv")
    path = tmp_path / "bad.csv"
    path.write_text("x,y,u1\n0,0,0\n1,0,0\n0,1,0\n")
    with pytest.raises(ConfigError, match="u2"):
        ReferenceOracle(path)


def test_build_oracle(make_config):
    cfg = make_config(oracle={"kind": "degraded_bar", "bar_length": 2.0, "zone_width": 0.1, "modulus_factor": 0.5})
    oracle = build_oracle(cfg.oracle, 0.01)
    assert isinstance(oracle, DegradedBarOracle) and oracle.g == 0.01
