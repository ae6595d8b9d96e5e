"""Precomputed shape tables and the torch module holding all unknowns."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
from torch import nn

from .enrichment import NNBlock, enrichment_displacement, normalize
from .geometry import NodeSet, SmoothingCellMesh
from .rk import RKConfig, ShapeFunctions
from .scni import SmoothingOperator, _to_torch, build_operators, smooth_torch

logger = logging.getLogger(__name__)


@dataclass
class ShapeTable:
    """RK shape values at surface points and cell centroids plus the smoothing operators."""

    surf: sp.csr_matrix
    cells: sp.csr_matrix
    operator: SmoothingOperator
    eval_points: np.ndarray
    centroids: np.ndarray

    def __post_init__(self):
        self.surf_t = _to_torch(self.surf)
        self.cells_t = _to_torch(self.cells)
        self.eval_points_t = torch.as_tensor(self.eval_points, dtype=torch.float64)
        self.centroids_t = torch.as_tensor(self.centroids, dtype=torch.float64)

    @property
    def n_nodes(self) -> int:
        return self.surf.shape[1]

    @classmethod
    def build(cls, nodes: NodeSet, mesh: SmoothingCellMesh, cfg: RKConfig,
              blocking_segments: np.ndarray | None = None) -> "ShapeTable":
        shapes = ShapeFunctions(nodes, cfg, blocking_segments if cfg.visibility else None)
        table = cls(
            surf=shapes.evaluate(mesh.eval_points),
            cells=shapes.evaluate(mesh.centroids),
            operator=build_operators(mesh),
            eval_points=mesh.eval_points,
            centroids=mesh.centroids,
        )
        logger.info("shape table: %d surface points, %d cells, %d nonzeros",
                    table.surf.shape[0], table.cells.shape[0], table.surf.nnz + table.cells.nnz)
        return table

    def arrays(self) -> dict:
        return {
            "surf": self.surf, "cells": self.cells, "P1": self.operator.P[0], "P2": self.operator.P[1],
            "eval_points": self.eval_points, "centroids": self.centroids,
        }

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ShapeTable":
        op = SmoothingOperator(P=(arrays["P1"].tocsr(), arrays["P2"].tocsr()), eval_points=arrays["eval_points"])
        return cls(arrays["surf"].tocsr(), arrays["cells"].tocsr(), op, arrays["eval_points"], arrays["centroids"])


@dataclass
class FieldEval:
    """Displacements and parametric coordinates at surface points and cell centroids."""

    u_rk_surf: torch.Tensor
    u_nn_surf: torch.Tensor
    u_rk_cell: torch.Tensor
    u_nn_cell: torch.Tensor
    y_surf: list[torch.Tensor]
    y_cell: list[torch.Tensor]

    @property
    def u_surf(self) -> torch.Tensor:
        return self.u_rk_surf + self.u_nn_surf

    @property
    def u_cell(self) -> torch.Tensor:
        return self.u_rk_cell + self.u_nn_cell


class NNRKModel(nn.Module):
    """RK coefficients d, correction weights W^C and the NN blocks.

    Blocks are created lazily by :meth:`activate`; until then ``wc`` has zero kernels.
    """

    def __init__(self, n_nodes: int, n_blocks: int = 1, n_kernels: int = 4, hidden_layers: int = 1,
                 width: int = 10, length_scale: float = 1.0, beta_init: float = 200.0,
                 beta_bounds: tuple[float, float] = (10.0, 1000.0)):
        super().__init__()
        self.arch = dict(n_nodes=n_nodes, n_blocks=n_blocks, n_kernels=n_kernels, hidden_layers=hidden_layers,
                         width=width, length_scale=length_scale, beta_init=beta_init,
                         beta_bounds=tuple(beta_bounds))
        self.d = nn.Parameter(torch.zeros((n_nodes, 2), dtype=torch.float64))
        self.wc = nn.Parameter(torch.zeros((n_nodes, 0, 2), dtype=torch.float64))
        self.blocks = nn.ModuleList()
        self.register_buffer("node_mask", torch.zeros(n_nodes, dtype=torch.float64))

    @property
    def active(self) -> bool:
        return len(self.blocks) > 0

    @property
    def total_kernels(self) -> int:
        return self.wc.shape[1]

    def _make_blocks(self) -> None:
        a = self.arch
        self.blocks = nn.ModuleList(
            NNBlock(a["n_kernels"], a["hidden_layers"], a["width"], a["length_scale"], a["beta_init"], a["beta_bounds"])
            for _ in range(a["n_blocks"])
        )
        self.wc = nn.Parameter(torch.zeros((a["n_nodes"], a["n_blocks"] * a["n_kernels"], 2), dtype=torch.float64))

    def activate(self, region_points: np.ndarray, generator: torch.Generator | None = None) -> None:
        if self.arch["n_blocks"] == 0:
            return
        self._make_blocks()
        for block in self.blocks:
            block.initialize(region_points, generator)
        logger.info("NN enrichment activated: %d block(s), %d kernels over %d cells",
                    len(self.blocks), self.total_kernels, len(region_points))

    def set_node_mask(self, mask: np.ndarray) -> None:
        self.node_mask.copy_(torch.as_tensor(mask, dtype=torch.float64))

    def kernels(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Normalized kernels (n, total K) and the parametric coordinates per block."""
        ys, phis = [], []
        for block in self.blocks:
            y, phi = block(x)
            ys.append(y)
            phis.append(phi)
        return normalize(torch.cat(phis, dim=1)), ys

    def fields(self, table: ShapeTable, with_cells: bool = True) -> FieldEval:
        u_rk_surf = torch.sparse.mm(table.surf_t, self.d)
        zeros_surf = torch.zeros_like(u_rk_surf)
        u_rk_cell = torch.sparse.mm(table.cells_t, self.d) if with_cells else None
        if not self.active:
            return FieldEval(u_rk_surf, zeros_surf, u_rk_cell,
                             None if u_rk_cell is None else torch.zeros_like(u_rk_cell), [], [])
        phi_s, y_s = self.kernels(table.eval_points_t)
        u_nn_surf = enrichment_displacement(table.surf_t, phi_s, self.wc, self.node_mask)
        if not with_cells:
            return FieldEval(u_rk_surf, u_nn_surf, None, None, y_s, [])
        phi_c, y_c = self.kernels(table.centroids_t)
        u_nn_cell = enrichment_displacement(table.cells_t, phi_c, self.wc, self.node_mask)
        return FieldEval(u_rk_surf, u_nn_surf, u_rk_cell, u_nn_cell, y_s, y_c)

    def smoothed_gradients(self, table: ShapeTable, ev: FieldEval) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """du_i/dx_a per cell (N_IC, 2, 2) and dy_i/dx_a per block."""
        grad_u = smooth_torch(table.operator, ev.u_surf)
        grad_y = [smooth_torch(table.operator, y) for y in ev.y_surf]
        return grad_u, grad_y

    @torch.no_grad()
    def displacement(self, shape_matrix: sp.spmatrix, points: np.ndarray) -> np.ndarray:
        """u = u_RK + u_NN at arbitrary ``points`` given their RK shape values (n, NP)."""
        psi = _to_torch(shape_matrix)
        u = torch.sparse.mm(psi, self.d)
        if self.active:
            phi, _ = self.kernels(torch.as_tensor(np.asarray(points, dtype=float)))
            u = u + enrichment_displacement(psi, phi, self.wc, self.node_mask)
        return u.numpy()

    def materialized_c(self) -> list[torch.Tensor]:
        return [block.shapes.c.detach() for block in self.blocks]

    @classmethod
    def from_checkpoint(cls, arch: dict, state_dict: dict) -> "NNRKModel":
        model = cls(**arch)
        if any(k.startswith("blocks.") for k in state_dict):
            model._make_blocks()
        model.load_state_dict(state_dict)
        return model
