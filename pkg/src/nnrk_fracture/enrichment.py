"""Neural-network enrichment blocks patched onto the RK field through partition of unity."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .errors import ConfigError

logger = logging.getLogger(__name__)

NORMALIZE_GUARD = 1e-12
KAPPA_ENRICH = 0.5
C_INIT_SOFTPLUS = 1e-6
BETA_EDGE = 1e-6


class ParametrizationNet(nn.Module):
    """tanh network mapping physical x to parametric y, final layer affine."""

    def __init__(self, hidden_layers: int = 1, width: int = 10):
        super().__init__()
        dims = [2] + [width] * hidden_layers
        self.hidden = nn.ModuleList(nn.Linear(i, o, dtype=torch.float64) for i, o in zip(dims[:-1], dims[1:]))
        self.final = nn.Linear(dims[-1], 2, dtype=torch.float64)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.hidden:
            x = torch.tanh(layer(x))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.final(self.features(x))

    @torch.no_grad()
    def initialize(self, points: np.ndarray, generator: torch.Generator | None = None) -> float:
        """Fan-in uniform hidden layers, least-squares identity fit of the final layer.

        Returns the max residual |y - x| over ``points``.
        """
        points = np.asarray(points, dtype=float)
        lo, hi = points.min(axis=0), points.max(axis=0)
        centre = 0.5 * (lo + hi)
        half = np.maximum(0.5 * (hi - lo), 1e-12 * max(float(np.abs(points).max()), 1.0))
        for k, layer in enumerate(self.hidden):
            bound = 1.0 / math.sqrt(layer.in_features)
            w = (torch.rand(layer.weight.shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound
            b = (torch.rand(layer.bias.shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound
            if k == 0:
                scale = torch.as_tensor(1.0 / half)
                b = b - w @ (torch.as_tensor(centre) * scale)
                w = w * scale
            layer.weight.copy_(w)
            layer.bias.copy_(b)
        x = torch.as_tensor(points)
        feats = self.features(x).numpy()
        A = np.hstack([feats, np.ones((len(feats), 1))])
        coef, *_ = np.linalg.lstsq(A, points, rcond=None)
        self.final.weight.copy_(torch.as_tensor(coef[:-1].T))
        self.final.bias.copy_(torch.as_tensor(coef[-1]))
        return float(np.abs(self(x).numpy() - points).max())


def parametrize(x, net: ParametrizationNet) -> torch.Tensor:
    return net(torch.as_tensor(x, dtype=torch.float64))


def softplus(z: torch.Tensor, beta) -> torch.Tensor:
    """S(z; beta) = log(1 + exp(beta z)) / beta, overflow safe."""
    return torch.logaddexp(torch.zeros_like(z), beta * z) / beta


def regularized_step(z: torch.Tensor, beta) -> torch.Tensor:
    """Smooth ramp from 0 (z < -1/2) to 1 (z > 1/2)."""
    return softplus(z + 0.5, beta) - softplus(z - 0.5, beta)


def side_steps(y, y_bar, c, beta) -> tuple[torch.Tensor, torch.Tensor]:
    """Lower-edge and upper-edge steps of a scalar parametric coordinate.

    ``y_bar``, ``c`` and ``beta`` are pairs (lower, upper).
    """
    y = torch.as_tensor(y, dtype=torch.float64)
    y_bar, c, beta = (torch.as_tensor(v, dtype=torch.float64) for v in (y_bar, c, beta))
    z1 = (y - y_bar[..., 0]) / c[..., 0]
    z2 = -(y - y_bar[..., 1]) / c[..., 1]
    return regularized_step(z1, beta[..., 0]), regularized_step(z2, beta[..., 1])


def nn_kernel(y: torch.Tensor, y_bar: torch.Tensor, c: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Plateau kernels phi (n, K) for parametric points y (n, 2).

    Shape parameters are (K, 2, 2): kernel, dimension, side.
    """
    y = torch.as_tensor(y, dtype=torch.float64)
    lower, upper = side_steps(y[:, None, :], y_bar, c, beta)
    return (lower * upper).prod(dim=-1)


def normalize(phi: torch.Tensor) -> torch.Tensor:
    total = phi.sum(dim=-1, keepdim=True)
    defined = phi.max(dim=-1, keepdim=True).values > NORMALIZE_GUARD
    safe = torch.where(defined, total, torch.ones_like(total))
    return torch.where(defined, phi / safe, torch.zeros_like(phi))


class KernelShapes(nn.Module):
    """Shape-control parameters of one block: centres, widths, steepness."""

    def __init__(self, n_kernels: int, length_scale: float, beta_init: float = 200.0,
                 beta_bounds: tuple[float, float] = (10.0, 1000.0)):
        super().__init__()
        self.length_scale = float(length_scale)
        self.beta_bounds = beta_bounds
        shape = (n_kernels, 2, 2)
        c_raw = math.log(math.expm1(C_INIT_SOFTPLUS))
        self.y_bar = nn.Parameter(torch.zeros(shape, dtype=torch.float64))
        self.c_raw = nn.Parameter(torch.full(shape, c_raw, dtype=torch.float64))
        lo, hi = beta_bounds
        frac = 0.5 if hi <= lo else min(max((beta_init - lo) / (hi - lo), BETA_EDGE), 1.0 - BETA_EDGE)
        self.beta_raw = nn.Parameter(torch.full(shape, math.log(frac / (1.0 - frac)), dtype=torch.float64))

    @property
    def c(self) -> torch.Tensor:
        return self.length_scale * (1.0 + nn.functional.softplus(self.c_raw))

    @property
    def beta(self) -> torch.Tensor:
        """Steepness in (beta_min, beta_max) through a sigmoid of the free parameter."""
        lo, hi = self.beta_bounds
        return lo + (hi - lo) * torch.sigmoid(self.beta_raw)

    @torch.no_grad()
    def tile(self, y: np.ndarray) -> None:
        """Spread kernels over the bounding box of ``y`` in rows; outer edges pushed one box out."""
        K = self.y_bar.shape[0]
        lo, hi = y.min(axis=0), y.max(axis=0)
        k1 = math.ceil(math.sqrt(K))
        rows = np.array_split(np.arange(K), math.ceil(K / k1))
        dy = (hi[1] - lo[1]) / len(rows)
        for j, row in enumerate(rows):
            dx = (hi[0] - lo[0]) / len(row)
            y_lo = lo[1] + j * dy - (dy if j == 0 else 0.0)
            y_hi = lo[1] + (j + 1) * dy + (dy if j == len(rows) - 1 else 0.0)
            for i, k in enumerate(row):
                x_lo = lo[0] + i * dx - (dx if i == 0 else 0.0)
                x_hi = lo[0] + (i + 1) * dx + (dx if i == len(row) - 1 else 0.0)
                self.y_bar[k] = torch.tensor([[x_lo, x_hi], [y_lo, y_hi]], dtype=torch.float64)


class NNBlock(nn.Module):
    """Parametrization sub-block followed by the kernel layers."""

    def __init__(self, n_kernels: int, hidden_layers: int, width: int, length_scale: float,
                 beta_init: float = 200.0, beta_bounds: tuple[float, float] = (10.0, 1000.0)):
        super().__init__()
        self.net = ParametrizationNet(hidden_layers, width)
        self.shapes = KernelShapes(n_kernels, length_scale, beta_init, beta_bounds)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        y = self.net(x)
        return y, nn_kernel(y, self.shapes.y_bar, self.shapes.c, self.shapes.beta)

    def initialize(self, points: np.ndarray, generator: torch.Generator | None = None) -> None:
        residual = self.net.initialize(points, generator)
        logger.debug("parametrization identity fit residual %.3e", residual)
        with torch.no_grad():
            y = self.net(torch.as_tensor(points)).numpy()
        self.shapes.tile(y)


def enrichment_displacement(shape_matrix: torch.Tensor, phi_hat: torch.Tensor, wc: torch.Tensor,
                            node_mask: torch.Tensor) -> torch.Tensor:
    """u_NN = sum_K phi_hat_K (Psi @ w^C_K), w^C zeroed outside the enriched nodes.

    ``shape_matrix`` is (n, NP) sparse or dense, ``wc`` is (NP, K, 2).
    """
    n_nodes, n_kernels, _ = wc.shape
    if n_kernels == 0:
        return torch.zeros((phi_hat.shape[0], 2), dtype=torch.float64)
    masked = (wc * node_mask[:, None, None]).reshape(n_nodes, -1)
    if shape_matrix.is_sparse:
        v = torch.sparse.mm(shape_matrix, masked)
    else:
        v = shape_matrix @ masked
    return (v.reshape(-1, n_kernels, 2) * phi_hat[..., None]).sum(dim=1)


@dataclass
class EnrichedNodeSet:
    mask: np.ndarray
    active: bool = False

    @classmethod
    def empty(cls, n_nodes: int) -> "EnrichedNodeSet":
        return cls(np.zeros(n_nodes, dtype=bool))

    @property
    def size(self) -> int:
        return int(self.mask.sum())


def select_enriched_nodes(psi_plus: np.ndarray, centroids: np.ndarray, nodes, psi_c: float,
                          previous: EnrichedNodeSet, absolute_threshold: float | None = None,
                          kappa: float = KAPPA_ENRICH) -> EnrichedNodeSet:
    """Nodes whose support covers a cell centroid with psi0_plus >= kappa psi_c, unioned with ``previous``."""
    if psi_c > 0.0:
        threshold = kappa * psi_c
    elif absolute_threshold is not None and absolute_threshold > 0.0:
        threshold = absolute_threshold
    else:
        raise ConfigError("psi_c is zero and no positive absolute enrichment threshold is configured",
                          "material.enrichment_threshold")
    hot = np.flatnonzero(np.asarray(psi_plus) >= threshold)
    mask = previous.mask.copy()
    if len(hot):
        tree = cKDTree(np.asarray(centroids)[hot])
        coords = np.asarray(nodes.coords)
        radius = np.broadcast_to(np.asarray(nodes.support, dtype=float), (len(coords),)) * (1 - 1e-12)
        hits = tree.query_ball_point(coords, r=radius, p=np.inf)
        mask |= np.array([len(h) > 0 for h in hits], dtype=bool)
    return EnrichedNodeSet(mask=mask, active=previous.active)


def enrichment_region(centroids: np.ndarray, nodes, enriched: EnrichedNodeSet) -> np.ndarray:
    """Cells whose centroid lies in the support of an enriched node."""
    region = np.zeros(len(centroids), dtype=bool)
    if enriched.size == 0:
        return region
    idx = np.flatnonzero(enriched.mask)
    coords = np.asarray(nodes.coords)[idx]
    support = np.broadcast_to(np.asarray(nodes.support, dtype=float), (len(nodes.coords),))[idx]
    tree = cKDTree(np.asarray(centroids))
    for hits in tree.query_ball_point(coords, r=support, p=np.inf):
        region[hits] = True
    return region
