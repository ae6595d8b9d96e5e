import numpy as np
import pytest
import torch

from nnrk_fracture.driver import Simulation
from nnrk_fracture.errors import NonFiniteLossError
from nnrk_fracture.loss import GROUPS, Objective, ParameterVector, evaluate_loss, gradient
from nnrk_fracture.settings import parse_config
from nnrk_fracture.studies import gradient_check, gradient_instance


def loss_of(sim, n=0, live_damage=True):
    return evaluate_loss(sim.model, sim.table, sim.volumes, sim.step_material(), sim.boundary(n), sim.settings,
                         live_damage=live_damage)


@pytest.fixture
def enriched_sim(gradient_data):
    sim = Simulation(parse_config(gradient_data))
    sim.model.activate(sim.mesh.centroids, sim.generator)
    sim.model.set_node_mask(np.ones(sim.nodes.count))
    return sim


def test_zero_state_has_zero_loss(make_config):
    sim = Simulation(make_config(load={"values": [0.0]}))
    terms = loss_of(sim)
    assert float(terms.total) == 0.0
    assert terms.breakdown().total == 0.0


def test_linear_field_energy(patch_case):
    cfg, eps, eps22, sigma11 = patch_case
    sim = Simulation(cfg)
    x, y = sim.nodes.coords.T
    with torch.no_grad():
        sim.model.d.copy_(torch.as_tensor(np.column_stack([eps * x, eps22 * y])))
    terms = loss_of(sim).breakdown()
    lam, mu = sim.params.lam, sim.params.mu
    density = mu * (eps**2 + eps22**2) + 0.5 * lam * (eps + eps22) ** 2
    assert terms.strain == pytest.approx(2.0 * density, rel=1e-10)
    assert terms.external == pytest.approx(-2.0 * eps * sigma11, rel=1e-10)
    assert terms.bc == pytest.approx(0.0, abs=1e-14)
    assert terms.reg == 0.0 and terms.ridge == 0.0


def test_regularization_vanishes_for_gentle_maps(enriched_sim):
    with torch.no_grad():
        for block in enriched_sim.model.blocks:
            block.net.final.weight.mul_(0.5)
    assert float(loss_of(enriched_sim).reg) == 0.0


def test_ridge_penalizes_enriched_weights_only(enriched_sim):
    sim = enriched_sim
    mask = np.zeros(sim.nodes.count)
    mask[0] = 1.0
    sim.model.set_node_mask(mask)
    with torch.no_grad():
        sim.model.wc.fill_(1.0)
    ridge = float(loss_of(sim).ridge)
    expected = 0.5 * sim.settings.wc_ridge * sim.params.E * sim.model.total_kernels * 2
    assert ridge == pytest.approx(expected)


def test_non_finite_loss_raises(make_config):
    sim = Simulation(make_config())
    with torch.no_grad():
        sim.model.d[0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError):
        loss_of(sim)


def test_parameter_vector_round_trip(enriched_sim):
    pv = ParameterVector(enriched_sim.model)
    p = pv.flatten()
    assert p.shape == (pv.size,)
    pv.unflatten(p + 1.0)
    np.testing.assert_array_equal(pv.flatten(), p + 1.0)
    assert set(np.unique(pv.group)) == {0, 1, 2, 3}
    np.testing.assert_array_equal(pv.scale(0.5)[pv.slice("d")], 0.5)
    np.testing.assert_array_equal(pv.scale(0.5)[pv.slice("WL")], 1.0)


def test_parameter_masks(enriched_sim):
    sim = enriched_sim
    pv = ParameterVector(sim.model)
    only_d = pv.mask(("d",))
    np.testing.assert_array_equal(np.flatnonzero(only_d), pv.slice("d"))
    mask = np.zeros(sim.nodes.count)
    mask[0] = 1.0
    sim.model.set_node_mask(mask)
    assert pv.mask(GROUPS)[pv.slice("WC")].sum() == sim.model.total_kernels * 2


def test_unenriched_weights_get_no_gradient(enriched_sim):
    sim = enriched_sim
    mask = np.zeros(sim.nodes.count)
    mask[:2] = 1.0
    sim.model.set_node_mask(mask)
    with torch.no_grad():
        sim.model.wc.copy_(1e-3 * torch.randn(sim.model.wc.shape, dtype=torch.float64, generator=sim.generator))
    pv = ParameterVector(sim.model)
    material, boundary = sim.step_material(), sim.boundary(0)
    _, g = gradient(pv, lambda: evaluate_loss(sim.model, sim.table, sim.volumes, material, boundary, sim.settings))
    g_wc = g[pv.slice("WC")].reshape(sim.model.wc.shape)
    assert np.all(g_wc[2:] == 0.0)
    assert np.any(g_wc[:2] != 0.0)


def test_objective_uses_scaled_variables(enriched_sim):
    sim = enriched_sim
    pv = ParameterVector(sim.model)
    material, boundary = sim.step_material(), sim.boundary(0)
    loss_fn = lambda: evaluate_loss(sim.model, sim.table, sim.volumes, material, boundary, sim.settings)
    obj = Objective(pv, loss_fn, GROUPS, u_ref=1e-2)
    z = obj.x0()
    f, g = obj(z)
    terms, full = gradient(pv, loss_fn)
    assert f == pytest.approx(float(terms.total))
    np.testing.assert_allclose(g, full[obj.free] * obj.scale)
    obj.apply(z + 1.0)
    np.testing.assert_allclose(pv.flatten()[obj.free], (z + 1.0) * obj.scale)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(gradient_data, seed):
    sim = Simulation(parse_config(gradient_data))
    pv, loss_fn, signature = gradient_instance(sim, seed)
    result = gradient_check(pv, loss_fn, signature)
    assert result.checked > 0.8 * pv.mask(GROUPS).sum()
    assert result.passed, result
