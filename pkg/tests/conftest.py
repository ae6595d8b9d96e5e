import copy

import numpy as np
import pytest

from nnrk_fracture.geometry import Domain2D, build_smoothing_cells, build_uniform_grid
from nnrk_fracture.settings import parse_config

RECT = [[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [0.0, 1.0]]
REGIONS = {"bottom": [0], "right": [1], "top": [2], "left": [3]}


def _merge(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def base_data() -> dict:
    """Elastic 2 x 1 bar, left end clamped, right end pulled by g."""
    return {
        "name": "bar",
        "seed": 0,
        "domain": {"outer": RECT, "regions": REGIONS},
        "discretization": {"nx": 5, "ny": 3},
        "material": {"E": 210.0, "nu": 0.3, "G_cI": 2.7, "length_scale": 0.1, "damage": False},
        "nn": {"enabled": False},
        "load": {
            "values": [1.0e-3],
            "dirichlet": [
                {"region": "left", "u1": 0.0, "u2": 0.0},
                {"region": "right", "u1": "g"},
            ],
        },
        "output": {"directory": "out", "formats": ["csv"]},
    }


def uniaxial_patch(eps: float = 1.0e-3, lam: float = 121.15384615384615, mu: float = 80.76923076923077):
    """Exact uniaxial-stress field for the 2 x 1 bar: Dirichlet on top/bottom, tractions on left/right."""
    eps22 = -lam / (lam + 2 * mu) * eps
    sigma11 = (lam + 2 * mu) * eps + lam * eps22
    u1, u2 = f"{eps!r}*x", f"{eps22!r}*y"
    load = {
        "values": [1.0],
        "dirichlet": [
            {"region": "bottom", "u1": u1, "u2": u2},
            {"region": "top", "u1": u1, "u2": u2},
        ],
        "neumann": [
            {"region": "left", "t1": -sigma11 * 1e3, "t2": 0.0},
            {"region": "right", "t1": sigma11 * 1e3, "t2": 0.0},
        ],
    }
    return load, eps22, sigma11


@pytest.fixture
def make_config(tmp_path):
    """Build a RunConfig from the bar template with nested overrides, writing into ``tmp_path``."""

    def _make(**overrides):
        data = _merge(copy.deepcopy(base_data()), overrides)
        data["output"]["directory"] = str(tmp_path / data["name"])
        return parse_config(data)

    return _make


@pytest.fixture
def patch_case(make_config):
    """(config, eps11, eps22, sigma11) of the uniaxial patch problem."""
    load, eps22, sigma11 = uniaxial_patch()
    cfg = make_config(name="patch", load=load, optimizer={"kappa_bc": 100.0})
    return cfg, 1.0e-3, eps22, sigma11


@pytest.fixture
def rect_domain():
    return Domain2D(np.array(RECT), regions={k: tuple(v) for k, v in REGIONS.items()})


@pytest.fixture
def grid_mesh(rect_domain):
    nodes = build_uniform_grid(9, 5, rect_domain)
    return nodes, build_smoothing_cells(nodes, rect_domain)


@pytest.fixture
def gradient_data():
    """3 x 3 nodes, one block of four kernels and four neurons, damage on."""
    return {
        "name": "gradcheck",
        "domain": {"outer": [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], "regions": REGIONS},
        "discretization": {"nx": 3, "ny": 3},
        "material": {"E": 210.0, "nu": 0.3, "G_cI": 2.7, "length_scale": 0.25, "f_t": 0.5},
        "nn": {"n_blocks": 1, "n_kernels": 4, "hidden_layers": 1, "width": 4,
               "beta_init": 10.0, "beta_min": 1.0, "beta_max": 1000.0},
        "load": {
            "values": [1.0e-2],
            "dirichlet": [
                {"region": "left", "u1": 0.0, "u2": 0.0},
                {"region": "right", "u1": "g"},
            ],
        },
    }
