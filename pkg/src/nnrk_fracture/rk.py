"""Reproducing kernel shape functions with a tensor-product cubic B-spline kernel."""
from __future__ import annotations

import itertools
import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import SingularMomentError
from .geometry import segments_cross

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
EVALUATOR_CACHE = 8

_evaluators: OrderedDict[tuple, ShapeFunctions] = OrderedDict()


@dataclass(frozen=True)
class RKConfig:
    order: int = 1
    kernel: str = "cubic_bspline"
    support_factor: float = 2.0
    visibility: bool = False

    def __post_init__(self):
        if self.order < 0 or self.order > 2:
            raise ValueError(f"basis order must be 0, 1 or 2, got {self.order}")
        if self.kernel != "cubic_bspline":
            raise ValueError(f"unsupported kernel {self.kernel!r}")
        if self.support_factor <= 0.0:
            raise ValueError("support factor must be positive")


@dataclass
class ShapeEval:
    point: np.ndarray
    indices: np.ndarray
    values: np.ndarray


def cubic_bspline(s: np.ndarray) -> np.ndarray:
    s = np.abs(np.asarray(s, dtype=float))
    return np.where(
        s <= 0.5,
        2.0 / 3.0 - 4.0 * s**2 + 4.0 * s**3,
        np.where(s <= 1.0, 4.0 / 3.0 * (1.0 - s) ** 3, 0.0),
    )


def kernel_value(x, x_I, a: float) -> float:
    """Tensor product of 1D cubic B-splines of half-width ``a``."""
    if a <= 0.0:
        raise ValueError("support size must be positive")
    s = np.abs(np.asarray(x, dtype=float) - np.asarray(x_I, dtype=float)) / a
    return float(np.prod(cubic_bspline(s)))


def basis_exponents(order: int, dim: int) -> list[tuple[int, ...]]:
    """Monomial exponents of total degree <= order, constant first."""
    exps = [e for e in itertools.product(range(order + 1), repeat=dim) if sum(e) <= order]
    return sorted(exps, key=lambda e: (sum(e), tuple(-v for v in e)))


def _basis(dx: np.ndarray, exps) -> np.ndarray:
    return np.stack([np.prod(dx ** np.asarray(e), axis=-1) for e in exps], axis=-1)


def _coords(nodes) -> np.ndarray:
    coords = np.asarray(nodes.coords, dtype=float)
    return coords[:, None] if coords.ndim == 1 else coords


def evaluator(nodes, cfg: RKConfig) -> ShapeFunctions:
    """Shared evaluator for a node set, rebuilt only when the nodes, supports or ``cfg`` change."""
    coords = _coords(nodes)
    support = np.broadcast_to(np.asarray(nodes.support, dtype=float), (len(coords),))
    key = (coords.shape, coords.tobytes(), support.tobytes(), cfg)
    sf = _evaluators.get(key)
    if sf is None:
        sf = _evaluators[key] = ShapeFunctions(nodes, cfg)
        if len(_evaluators) > EVALUATOR_CACHE:
            _evaluators.popitem(last=False)
    else:
        _evaluators.move_to_end(key)
    return sf


def moment_matrix(x, nodes, cfg: RKConfig) -> np.ndarray:
    """M(x) = sum_I H(x - x_I) H(x - x_I)^T Phi_a(x - x_I)."""
    return evaluator(nodes, cfg).moment(np.atleast_2d(np.asarray(x, dtype=float)))[0]


def shape_values(x, nodes, cfg: RKConfig) -> ShapeEval:
    x = np.asarray(x, dtype=float).ravel()
    row = evaluator(nodes, cfg).evaluate(x[None, :]).tocsr()
    return ShapeEval(point=x, indices=row.indices.copy(), values=row.data.copy())


class ShapeFunctions:
    """Vectorized RK shape function evaluator over a fixed node set.

    ``blocking_segments`` (M, 2, 2) switches on the visibility criterion:
    a node does not see points behind a blocking segment.
    """

    def __init__(self, nodes, cfg: RKConfig, blocking_segments: np.ndarray | None = None):
        self.coords = _coords(nodes)
        self.support = np.broadcast_to(np.asarray(nodes.support, dtype=float), (len(self.coords),))
        self.cfg = cfg
        self.dim = self.coords.shape[1]
        self.exps = basis_exponents(cfg.order, self.dim)
        self.blocking = None
        if blocking_segments is not None and len(blocking_segments) and self.dim == 2:
            self.blocking = np.asarray(blocking_segments, dtype=float).reshape(-1, 2, 2)
        self._tree = cKDTree(self.coords)
        self._a_max = float(self.support.max())
        self._scale = float(np.median(self.support))

    @property
    def n_basis(self) -> int:
        return len(self.exps)

    def _neighbours(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lists = self._tree.query_ball_point(points, r=self._a_max, p=np.inf)
        width = max((len(l) for l in lists), default=0)
        idx = np.zeros((len(points), max(width, 1)), dtype=int)
        valid = np.zeros(idx.shape, dtype=bool)
        for p, l in enumerate(lists):
            idx[p, : len(l)] = sorted(l)
            valid[p, : len(l)] = True
        return idx, valid

    def _kernel(self, points: np.ndarray):
        idx, valid = self._neighbours(points)
        dx = points[:, None, :] - self.coords[idx]
        s = np.abs(dx) / self.support[idx][..., None]
        phi = np.prod(cubic_bspline(s), axis=-1) * valid
        if self.blocking is not None:
            hidden = segments_cross(points[:, None, :], self.coords[idx], self.blocking)
            phi = np.where(hidden, 0.0, phi)
        return idx, dx, phi

    def moment(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        _, dx, phi = self._kernel(points)
        Hs = _basis(dx / self._scale, self.exps)
        self._check_condition(points, np.einsum("pk,pki,pkj->pij", phi, Hs, Hs))
        H = _basis(dx, self.exps)
        return np.einsum("pk,pki,pkj->pij", phi, H, H)

    def _check_condition(self, points: np.ndarray, Ms: np.ndarray) -> None:
        ev = np.linalg.eigvalsh(Ms)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = np.where(ev[:, 0] > 0.0, ev[:, -1] / ev[:, 0], np.inf)
        bad = np.flatnonzero(~(cond <= CONDITION_LIMIT))
        if len(bad):
            raise SingularMomentError(points[bad[0]], float(cond[bad[0]]))

    def evaluate(self, points: np.ndarray) -> sp.csr_matrix:
        """Shape values at ``points`` as a CSR matrix (points x nodes)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.dim:
            points = points.reshape(-1, self.dim)
        idx, dx, phi = self._kernel(points)
        # scaling the basis by 1/a leaves the shape functions unchanged
        H = _basis(dx / self._scale, self.exps)
        M = np.einsum("pk,pki,pkj->pij", phi, H, H)
        self._check_condition(points, M)
        L = np.linalg.cholesky(M)
        e1 = np.zeros((len(points), self.n_basis, 1))
        e1[:, 0, 0] = 1.0
        b = np.linalg.solve(np.swapaxes(L, 1, 2), np.linalg.solve(L, e1))[..., 0]
        psi = phi * np.einsum("pki,pi->pk", H, b)
        nz = phi > 0.0
        rows = np.broadcast_to(np.arange(len(points))[:, None], idx.shape)
        return sp.csr_matrix(
            (psi[nz], (rows[nz], idx[nz])), shape=(len(points), len(self.coords))
        )
