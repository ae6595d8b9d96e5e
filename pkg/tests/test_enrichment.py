import numpy as np
import pytest
import torch

from nnrk_fracture.enrichment import (
    EnrichedNodeSet,
    KernelShapes,
    NNBlock,
    ParametrizationNet,
    enrichment_displacement,
    enrichment_region,
    nn_kernel,
    normalize,
    regularized_step,
    select_enriched_nodes,
    softplus,
)
from nnrk_fracture.errors import ConfigError
from nnrk_fracture.geometry import build_uniform_grid


def test_softplus_is_overflow_safe():
    z = torch.tensor([-1e3, 0.0, 1e3], dtype=torch.float64)
    out = softplus(z, 200.0)
    assert torch.isfinite(out).all()
    assert float(out[2]) == pytest.approx(1e3)
    assert float(out[0]) == 0.0


@pytest.mark.parametrize("beta", [10.0, 200.0, 1000.0])
def test_step_is_half_at_centre(beta):
    assert float(regularized_step(torch.tensor(0.0, dtype=torch.float64), beta)) == pytest.approx(0.5, abs=1e-15)


def test_step_limits():
    z = torch.tensor([-5.0, 5.0], dtype=torch.float64)
    np.testing.assert_allclose(regularized_step(z, 200.0).numpy(), [0.0, 1.0], atol=1e-12)


def test_kernel_plateau():
    y_bar = torch.tensor([[[0.0, 1.0], [0.0, 1.0]]], dtype=torch.float64)
    c = torch.full((1, 2, 2), 0.01, dtype=torch.float64)
    beta = torch.full((1, 2, 2), 200.0, dtype=torch.float64)
    y = torch.tensor([[0.5, 0.5], [2.0, 0.5], [0.5, -1.0]], dtype=torch.float64)
    phi = nn_kernel(y, y_bar, c, beta).numpy()
    assert phi.shape == (3, 1)
    np.testing.assert_allclose(phi[:, 0], [1.0, 0.0, 0.0], atol=1e-12)


def test_normalize():
    phi = torch.tensor([[0.2, 0.6], [0.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    out = normalize(phi).numpy()
    np.testing.assert_allclose(out, [[0.25, 0.75], [0.0, 0.0], [0.5, 0.5]])


def test_transition_width_never_below_length_scale():
    shapes = KernelShapes(4, length_scale=0.1)
    assert torch.all(shapes.c >= 0.1)
    with torch.no_grad():
        shapes.c_raw.fill_(-50.0)
    assert torch.all(shapes.c >= 0.1)
    with torch.no_grad():
        shapes.c_raw.fill_(3.0)
    assert torch.all(shapes.c > 0.1)


def test_steepness_stays_within_bounds():
    shapes = KernelShapes(2, length_scale=0.1, beta_init=200.0, beta_bounds=(10.0, 1000.0))
    assert torch.allclose(shapes.beta, torch.full_like(shapes.beta, 200.0), rtol=1e-10)
    with torch.no_grad():
        shapes.beta_raw[0].fill_(1e5)
        shapes.beta_raw[1].fill_(-1e5)
    assert torch.all(shapes.beta[0] == 1000.0)
    assert torch.all(shapes.beta[1] == 10.0)


@pytest.mark.parametrize("beta_init", [10.0, 200.0, 1000.0])
def test_steepness_gradient_is_never_zero(beta_init):
    shapes = KernelShapes(1, length_scale=0.1, beta_init=beta_init, beta_bounds=(10.0, 1000.0))
    assert torch.allclose(shapes.beta, torch.full_like(shapes.beta, beta_init), rtol=1e-3)
    shapes.beta.sum().backward()
    assert torch.all(shapes.beta_raw.grad > 0.0)


def test_tiling_covers_box():
    shapes = KernelShapes(4, length_scale=0.1)
    shapes.tile(np.array([[0.0, 0.0], [1.0, 1.0]]))
    y_bar = shapes.y_bar.detach().numpy()
    np.testing.assert_allclose(y_bar[0], [[-0.5, 0.5], [-0.5, 0.5]])
    np.testing.assert_allclose(y_bar[3], [[0.5, 1.5], [0.5, 1.5]])


def test_identity_initialization():
    g = torch.Generator().manual_seed(0)
    pts = np.stack(np.meshgrid(np.linspace(0.0, 2.0, 21), np.linspace(0.0, 1.0, 11)), axis=-1).reshape(-1, 2)
    residual = ParametrizationNet(1, 10).initialize(pts, g)
    assert residual < 0.05 * 2.0
    assert ParametrizationNet(0, 10).initialize(pts, g) < 1e-12


def test_block_initialize_tiles_over_parametric_box():
    g = torch.Generator().manual_seed(1)
    pts = np.random.default_rng(0).uniform(0.0, 1.0, (40, 2))
    block = NNBlock(4, 1, 8, length_scale=0.05)
    block.initialize(pts, g)
    y, phi = block(torch.as_tensor(pts))
    assert y.shape == (40, 2)
    assert phi.shape == (40, 4)
    # every point lies under some kernel's plateau or transition
    assert torch.all(phi.sum(dim=1) > 0.1)


@pytest.fixture
def nodes(rect_domain):
    return build_uniform_grid(9, 5, rect_domain)


def test_select_enriched_nodes(nodes):
    centroids = np.array([[1.0, 0.5], [0.1, 0.1]])
    psi_plus = np.array([1.0, 0.0])
    picked = select_enriched_nodes(psi_plus, centroids, nodes, psi_c=1.0, previous=EnrichedNodeSet.empty(nodes.count))
    dist = np.abs(nodes.coords - centroids[0]).max(axis=1)
    np.testing.assert_array_equal(picked.mask, dist < nodes.support)

    below = select_enriched_nodes(psi_plus, centroids, nodes, psi_c=4.0, previous=EnrichedNodeSet.empty(nodes.count))
    assert below.size == 0


def test_selection_is_a_union(nodes):
    previous = EnrichedNodeSet.empty(nodes.count)
    previous.mask[0] = True
    picked = select_enriched_nodes(np.array([1.0]), np.array([[1.9, 0.9]]), nodes, 1.0, previous)
    assert picked.mask[0]
    assert picked.size > 1


def test_absolute_threshold_needed_without_psi_c(nodes):
    empty = EnrichedNodeSet.empty(nodes.count)
    with pytest.raises(ConfigError) as info:
        select_enriched_nodes(np.array([1.0]), np.array([[1.0, 0.5]]), nodes, 0.0, empty)
    assert info.value.path == "material.enrichment_threshold"
    picked = select_enriched_nodes(np.array([1.0]), np.array([[1.0, 0.5]]), nodes, 0.0, empty,
                                   absolute_threshold=0.5)
    assert picked.size > 0


def test_enrichment_region(grid_mesh):
    nodes, mesh = grid_mesh
    empty = EnrichedNodeSet.empty(nodes.count)
    assert not enrichment_region(mesh.centroids, nodes, empty).any()
    one = EnrichedNodeSet.empty(nodes.count)
    one.mask[20] = True
    region = enrichment_region(mesh.centroids, nodes, one)
    dist = np.abs(mesh.centroids - nodes.coords[20]).max(axis=1)
    np.testing.assert_array_equal(region, dist <= nodes.support[20])


def test_enrichment_displacement_respects_mask():
    psi = torch.eye(3, dtype=torch.float64)
    phi = torch.full((3, 2), 0.5, dtype=torch.float64)
    wc = torch.ones((3, 2, 2), dtype=torch.float64)
    u = enrichment_displacement(psi, phi, wc, torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64))
    np.testing.assert_allclose(u.numpy(), [[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
    none = enrichment_displacement(psi, phi[:, :0], wc[:, :0], torch.ones(3, dtype=torch.float64))
    np.testing.assert_array_equal(none.numpy(), 0.0)


def test_patching_order_does_not_matter():
    gen = torch.Generator().manual_seed(0)
    psi = torch.rand((7, 5), generator=gen, dtype=torch.float64)
    phi = torch.rand((7, 3), generator=gen, dtype=torch.float64)
    wc = torch.randn((5, 3, 2), generator=gen, dtype=torch.float64)
    mask = torch.tensor([1.0, 0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
    # sum_I Psi_I (sum_K phi_K w_IK) against sum_K phi_K (sum_I Psi_I w_IK)
    node_first = torch.einsum("pi,pk,ikc->pc", psi, phi, wc * mask[:, None, None])
    for shape_matrix in (psi, psi.to_sparse()):
        u = enrichment_displacement(shape_matrix, phi, wc, mask)
        np.testing.assert_allclose(u.numpy(), node_first.numpy(), rtol=1e-13, atol=1e-15)
