"""Stage A: direct sparse solve for the RK coefficients and correction weights.

With the NN location and shape parameters frozen the displacement is linear
in (d, W^C), and with the damage frozen the loss is quadratic in them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
from scipy.sparse.linalg import splu

from .errors import SingularSystemError
from .loads import BoundaryData
from .material import tangent_moduli
from .model import NNRKModel, ShapeTable

logger = logging.getLogger(__name__)

PIVOT_RATIO = 1e-14


@dataclass
class LinearMaps:
    """Displacement component = A @ q at surface points and at cell centroids."""

    surf: sp.csr_matrix
    cells: sp.csr_matrix
    enriched: np.ndarray
    n_kernels: int

    @property
    def n(self) -> int:
        return self.surf.shape[1]


@torch.no_grad()
def linear_maps(model: NNRKModel, table: ShapeTable) -> LinearMaps:
    enriched = np.flatnonzero(model.node_mask.numpy() > 0)
    if not model.active or len(enriched) == 0:
        return LinearMaps(table.surf, table.cells, enriched, 0)
    phi_s = model.kernels(table.eval_points_t)[0].numpy()
    phi_c = model.kernels(table.centroids_t)[0].numpy()
    K = phi_s.shape[1]
    surf_e = table.surf[:, enriched]
    cells_e = table.cells[:, enriched]
    surf = sp.hstack([table.surf] + [sp.diags(phi_s[:, k]) @ surf_e for k in range(K)]).tocsr()
    cells = sp.hstack([table.cells] + [sp.diags(phi_c[:, k]) @ cells_e for k in range(K)]).tocsr()
    return LinearMaps(surf, cells, enriched, K)


def cell_moduli_matrix(strain: np.ndarray, lam: np.ndarray, mu: np.ndarray, damage: np.ndarray,
                       damage_enabled: bool = True) -> np.ndarray:
    """D_L = C_L - (1 - g_L) C+_L in Voigt form, C+ taken at the committed strain."""
    C, C_plus = tangent_moduli(strain, lam, mu)
    if not damage_enabled:
        return C
    g = (1.0 - np.asarray(damage)) ** 2
    return C - (1.0 - g)[:, None, None] * C_plus


def _strain_operator(table: ShapeTable, maps: LinearMaps) -> sp.csr_matrix:
    B1 = (table.operator.P[0] @ maps.surf).tocsr()
    B2 = (table.operator.P[1] @ maps.surf).tocsr()
    return sp.bmat([[B1, None], [None, B2], [B2, B1]], format="csr")


def _traction_operator(B: sp.csr_matrix, D: np.ndarray, boundary: BoundaryData, n_cells: int) -> sp.csr_matrix:
    """Rows t_k = n-projection of D_L B_L q for the Dirichlet entries, as in loss.dirichlet_traction."""
    cell = boundary.dir_cell.numpy()
    comp = boundary.dir_comp.numpy()
    n = boundary.dir_normal.numpy()
    coef = np.where((comp == 0)[:, None], np.column_stack([n[:, 0], np.zeros(len(n)), n[:, 1]]),
                    np.column_stack([np.zeros(len(n)), n[:, 1], n[:, 0]]))
    w = np.einsum("ka,kab->kb", coef, D[cell])
    return sum(sp.diags(w[:, b]) @ B[b * n_cells + cell] for b in range(3)).tocsr()


def assemble(table: ShapeTable, maps: LinearMaps, volumes: np.ndarray, D: np.ndarray,
             boundary: BoundaryData, E: float, kappa_bc: float, wc_ridge: float) -> tuple[sp.csc_matrix, np.ndarray]:
    """Stiffness and load vector over q = [q_1; q_2].

    Dirichlet data enter through a penalty plus the symmetric Nitsche term
    built from the same moduli ``D``.
    """
    n = maps.n
    B = _strain_operator(table, maps)
    W = sp.bmat([[sp.diags(volumes * D[:, a, b]) for b in range(3)] for a in range(3)], format="csr")
    K = (B.T @ W @ B).tocsr()
    f = np.zeros(2 * n)

    if len(boundary.dir_point):
        rows = maps.surf[boundary.dir_point.numpy()]
        comp = boundary.dir_comp.numpy()
        S = sp.hstack([sp.diags((comp == 0).astype(float)) @ rows, sp.diags((comp == 1).astype(float)) @ rows]).tocsr()
        length = boundary.dir_length.numpy()
        value = boundary.dir_value.numpy()
        weight = kappa_bc * E * length
        K = K + S.T @ sp.diags(weight) @ S
        f += S.T @ (weight * value)
        T = _traction_operator(B, D, boundary, len(volumes))
        TAS = T.T @ sp.diags(length) @ S
        K = K - TAS - TAS.T
        f -= T.T @ (length * value)

    if len(boundary.neu_point):
        rows = maps.surf[boundary.neu_point.numpy()]
        lt = boundary.neu_length.numpy()[:, None] * boundary.neu_traction.numpy()
        f += np.concatenate([rows.T @ lt[:, 0], rows.T @ lt[:, 1]])

    body = boundary.body.numpy()
    if np.any(body):
        vb = volumes[:, None] * body
        f += np.concatenate([maps.cells.T @ vb[:, 0], maps.cells.T @ vb[:, 1]])

    if maps.n_kernels:
        ridge = np.zeros(n)
        ridge[table.n_nodes:] = wc_ridge * E
        K = K + sp.diags(np.concatenate([ridge, ridge]))
    return K.tocsc(), f


def solve(K: sp.csc_matrix, f: np.ndarray) -> np.ndarray:
    try:
        lu = splu(K)
    except RuntimeError as e:
        raise SingularSystemError(f"stage A system is singular: {e}; check Dirichlet coverage") from e
    pivots = np.abs(lu.U.diagonal())
    if pivots.min() < PIVOT_RATIO * pivots.max():
        raise SingularSystemError(
            f"stage A system is singular (pivot ratio {pivots.min() / pivots.max():.2e}); check Dirichlet coverage"
        )
    return lu.solve(f)


@torch.no_grad()
def stage_a_solve(model: NNRKModel, table: ShapeTable, volumes: np.ndarray, D: np.ndarray,
                  boundary: BoundaryData, E: float, kappa_bc: float = 1e4, wc_ridge: float = 1e-8) -> np.ndarray:
    """Minimize the quadratic loss over (d, W^C) and write the result into ``model``."""
    maps = linear_maps(model, table)
    K, f = assemble(table, maps, np.asarray(volumes, dtype=float), D, boundary, E, kappa_bc, wc_ridge)
    q = solve(K, f)
    n, NP = maps.n, table.n_nodes
    q1, q2 = q[:n], q[n:]
    model.d.copy_(torch.as_tensor(np.column_stack([q1[:NP], q2[:NP]])))
    if maps.n_kernels:
        ne = len(maps.enriched)
        wc = np.zeros(tuple(model.wc.shape))
        for k in range(maps.n_kernels):
            sl = slice(NP + k * ne, NP + (k + 1) * ne)
            wc[maps.enriched, k, 0] = q1[sl]
            wc[maps.enriched, k, 1] = q2[sl]
        model.wc.copy_(torch.as_tensor(wc))
    logger.debug("stage A: %d unknowns, %d nonzeros", K.shape[0], K.nnz)
    return q
