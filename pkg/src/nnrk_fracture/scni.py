"""Stabilized conforming nodal integration: smoothing operators and cell quadrature."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import torch

from .errors import DimensionError
from .geometry import SmoothingCellMesh


def _to_torch(mat: sp.spmatrix) -> torch.Tensor:
    coo = mat.tocoo()
    index = torch.as_tensor(np.vstack([coo.row, coo.col]), dtype=torch.long)
    values = torch.as_tensor(coo.data, dtype=torch.float64)
    return torch.sparse_coo_tensor(index, values, coo.shape).coalesce()


@dataclass
class SmoothingOperator:
    """P[alpha][L, e] = A_e n_alpha / V_L for segment e on the boundary of cell L."""

    P: tuple[sp.csr_matrix, sp.csr_matrix]
    eval_points: np.ndarray
    _torch: tuple[torch.Tensor, torch.Tensor] | None = field(default=None, repr=False)

    @property
    def n_cells(self) -> int:
        return self.P[0].shape[0]

    @property
    def n_surf(self) -> int:
        return self.P[0].shape[1]

    def as_torch(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self._torch is None:
            self._torch = (_to_torch(self.P[0]), _to_torch(self.P[1]))
        return self._torch


@dataclass
class SmoothedField:
    values: np.ndarray
    gradients: np.ndarray

    @property
    def strain(self) -> np.ndarray:
        return 0.5 * (self.gradients + np.swapaxes(self.gradients, -1, -2))


def build_operators(mesh: SmoothingCellMesh) -> SmoothingOperator:
    mats = []
    for alpha in range(2):
        data = mesh.seg_length * mesh.seg_normal[:, alpha] / mesh.volumes[mesh.seg_cell]
        mat = sp.coo_matrix((data, (mesh.seg_cell, mesh.seg_point)), shape=(mesh.n_cells, mesh.n_surf))
        mats.append(mat.tocsr())
    return SmoothingOperator(P=(mats[0], mats[1]), eval_points=mesh.eval_points)


def smooth(op: SmoothingOperator, surface_values: np.ndarray) -> np.ndarray:
    """Smoothed gradients per cell.

    A vector over the surface points gives (N_IC, 2); an (N_surf, m) array
    gives (N_IC, m, 2) with the last axis the derivative direction.
    """
    values = np.asarray(surface_values, dtype=float)
    if values.shape[0] != op.n_surf:
        raise DimensionError(f"expected {op.n_surf} surface values, got {values.shape[0]}")
    return np.stack([op.P[0] @ values, op.P[1] @ values], axis=-1)


def smooth_torch(op: SmoothingOperator, surface_values: torch.Tensor) -> torch.Tensor:
    """Differentiable counterpart of :func:`smooth` for (N_surf, m) tensors."""
    if surface_values.shape[0] != op.n_surf:
        raise DimensionError(f"expected {op.n_surf} surface values, got {surface_values.shape[0]}")
    P1, P2 = op.as_torch()
    return torch.stack([torch.sparse.mm(P1, surface_values), torch.sparse.mm(P2, surface_values)], dim=-1)


def smoothed_field(op: SmoothingOperator, surface_displacement: np.ndarray, cell_values: np.ndarray) -> SmoothedField:
    return SmoothedField(values=np.asarray(cell_values, dtype=float), gradients=smooth(op, surface_displacement))


def integrate(mesh: SmoothingCellMesh, density) -> float:
    density = np.asarray(density, dtype=float)
    if density.shape != (mesh.n_cells,):
        raise DimensionError(f"expected {mesh.n_cells} cell values, got shape {density.shape}")
    return float(density @ mesh.volumes)
