import numpy as np
import pytest
import scipy.sparse as sp
import torch

from nnrk_fracture.assembly import cell_moduli_matrix, linear_maps, solve, stage_a_solve
from nnrk_fracture.driver import Simulation
from nnrk_fracture.errors import SingularSystemError
from nnrk_fracture.loss import GROUPS, Objective, ParameterVector, evaluate_loss, gradient
from nnrk_fracture.optimizers import lbfgs
from nnrk_fracture.scni import smooth
from nnrk_fracture.settings import parse_config


def surface_displacement(sim):
    with torch.no_grad():
        return sim.model.fields(sim.table, with_cells=False).u_surf.numpy()


def loss_closure(sim):
    material, boundary = sim.step_material(), sim.boundary(0)
    return lambda: evaluate_loss(sim.model, sim.table, sim.volumes, material, boundary, sim.settings)


def test_patch_test(patch_case):
    cfg, eps, eps22, _ = patch_case
    sim = Simulation(cfg)
    sim.stage_a(sim.boundary(0))
    pts = sim.mesh.eval_points
    exact = np.column_stack([eps * pts[:, 0], eps22 * pts[:, 1]])
    u = surface_displacement(sim)
    assert np.abs(u - exact).max() <= 1e-8 * np.abs(exact).max()
    grad = smooth(sim.table.operator, u)
    expected = np.array([[eps, 0.0], [0.0, eps22]])
    assert np.abs(grad - expected).max() <= 1e-8 * eps


def test_pulled_bar_is_reproduced_exactly(make_config):
    # left end clamped, right end pulled: the constrained ends carry a traction
    g = 1e-3
    sim = Simulation(make_config(material={"nu": 0.0}, load={"values": [g]}))
    sim.stage_a(sim.boundary(0))
    pts = sim.mesh.eval_points
    exact = np.column_stack([g * pts[:, 0] / 2.0, np.zeros(len(pts))])
    u = surface_displacement(sim)
    assert np.abs(u - exact).max() <= 1e-8 * g


@pytest.mark.parametrize("kappa_bc", [1e2, 1e4, 1e6])
def test_pulled_bar_does_not_depend_on_the_penalty(make_config, kappa_bc):
    sim = Simulation(make_config(material={"nu": 0.0}, optimizer={"kappa_bc": kappa_bc}))
    sim.stage_a(sim.boundary(0))
    grad = smooth(sim.table.operator, surface_displacement(sim))
    np.testing.assert_allclose(grad[:, 0, 0], 0.5e-3, rtol=1e-8)
    assert np.abs(grad[:, 1]).max() <= 1e-8 * 0.5e-3


def test_stage_a_is_a_stationary_point(make_config):
    sim = Simulation(make_config())
    pv = ParameterVector(sim.model)
    loss_fn = loss_closure(sim)
    _, g0 = gradient(pv, loss_fn)
    sim.stage_a(sim.boundary(0))
    _, g = gradient(pv, loss_fn)
    assert np.abs(g).max() <= 1e-8 * np.abs(g0).max()


def test_lbfgs_reaches_the_stage_a_solution(make_config):
    cfg = make_config(optimizer={"kappa_bc": 100.0})
    direct = Simulation(cfg)
    direct.stage_a(direct.boundary(0))
    expected = surface_displacement(direct)

    sim = Simulation(cfg)
    pv = ParameterVector(sim.model)
    obj = Objective(pv, loss_closure(sim), GROUPS, u_ref=1e-3)
    f0, _ = obj(obj.x0())
    res = lbfgs(obj, obj.x0(), max_iter=2000, memory=30, tol_grad=1e-13 * abs(f0))
    obj.apply(res.x)
    got = surface_displacement(sim)
    assert np.abs(got - expected).max() <= 1e-5 * np.abs(expected).max()


def test_zero_loads_give_zero_solution(make_config):
    sim = Simulation(make_config(load={"values": [0.0]}))
    sim.stage_a(sim.boundary(0))
    np.testing.assert_array_equal(sim.model.d.detach().numpy(), 0.0)


def test_enriched_unknowns_are_solved_for(gradient_data):
    sim = Simulation(parse_config(gradient_data))
    sim.model.activate(sim.mesh.centroids, sim.generator)
    mask = np.zeros(sim.nodes.count)
    mask[[2, 5, 8]] = 1.0
    sim.model.set_node_mask(mask)
    maps = linear_maps(sim.model, sim.table)
    assert maps.n == sim.nodes.count + 3 * sim.model.total_kernels
    boundary = sim.boundary(0)
    D = cell_moduli_matrix(sim.state.strain, sim.lam, sim.mu, sim.state.damage, damage_enabled=False)
    stage_a_solve(sim.model, sim.table, sim.mesh.volumes, D, boundary, sim.params.E)
    wc = sim.model.wc.detach().numpy()
    assert np.all(wc[mask == 0] == 0.0)

    # frozen damage and kernels: the loss is quadratic in (d, W^C) and stage A minimizes it
    pv = ParameterVector(sim.model)
    free = pv.mask(("d", "WC"))
    undamaged = type(sim.step_material())(**{**sim.step_material().__dict__, "damage_enabled": False})
    _, g = gradient(pv, lambda: evaluate_loss(sim.model, sim.table, sim.volumes, undamaged, boundary, sim.settings))
    sim.model.d.data.zero_()
    sim.model.wc.data.zero_()
    _, g0 = gradient(pv, lambda: evaluate_loss(sim.model, sim.table, sim.volumes, undamaged, boundary, sim.settings))
    assert np.abs(g[free]).max() <= 1e-7 * np.abs(g0[free]).max()


def test_undamaged_moduli_matrix_is_elastic():
    strain = np.zeros((2, 2, 2))
    strain[:, 0, 0] = 1e-3
    lam, mu = np.array([1.0, 2.0]), np.array([0.5, 1.0])
    D = cell_moduli_matrix(strain, lam, mu, np.array([0.5, 0.5]), damage_enabled=False)
    np.testing.assert_allclose(D[1], [[4.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]], atol=1e-12)


def test_fully_damaged_tension_keeps_only_compressive_part():
    strain = np.zeros((1, 2, 2))
    strain[0, 0, 0], strain[0, 1, 1] = 1e-3, 2e-3
    D = cell_moduli_matrix(strain, np.array([1.0]), np.array([0.5]), np.array([1.0]))
    np.testing.assert_allclose(D, 0.0, atol=1e-10)


@pytest.mark.parametrize("matrix", [[[1.0, 1.0], [1.0, 1.0]], [[1.0, 0.0], [0.0, 0.0]]])
def test_singular_system(matrix):
    with pytest.raises(SingularSystemError):
        solve(sp.csc_matrix(np.array(matrix)), np.ones(2))


def test_regular_system():
    np.testing.assert_allclose(solve(sp.csc_matrix(np.array([[2.0, 1.0], [1.0, 3.0]])), np.array([3.0, 4.0])),
                               [1.0, 1.0])
