"""Reference solutions and discrete error norms."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import sympy
from scipy.interpolate import LinearNDInterpolator

from .errors import ConfigError
from .geometry import SmoothingCellMesh, fan_triangles
from .loads import G, X, Y, parse_expression

logger = logging.getLogger(__name__)


class Oracle(Protocol):
    def displacement(self, points: np.ndarray) -> np.ndarray: ...

    def gradient(self, points: np.ndarray) -> np.ndarray | None: ...


@dataclass
class DegradedBarOracle:
    """Bar on [-L/2, L/2] pulled to -g / +g at its ends, moduli scaled by k in a central zone of width w.

    Stress continuity gives bulk strain b = 2g / (L - w + w/k) and zone strain b/k.
    """

    g: float
    length: float
    zone_width: float
    modulus_factor: float

    @property
    def bulk_strain(self) -> float:
        return 2 * self.g / (self.length - self.zone_width + self.zone_width / self.modulus_factor)

    @property
    def zone_strain(self) -> float:
        return self.bulk_strain / self.modulus_factor

    def u1(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        b, half_w, half_l = self.bulk_strain, self.zone_width / 2, self.length / 2
        return np.where(
            x < -half_w, b * (x + half_l) - self.g,
            np.where(x > half_w, b * (x - half_l) + self.g, self.zone_strain * x),
        )

    def displacement(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.column_stack([self.u1(points[:, 0]), np.zeros(len(points))])

    def gradient(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        out = np.zeros((len(points), 2, 2))
        inside = np.abs(points[:, 0]) <= self.zone_width / 2
        out[:, 0, 0] = np.where(inside, self.zone_strain, self.bulk_strain)
        return out


class ExpressionOracle:
    """Smooth displacement field given as sympy expressions in x, y (and g)."""

    def __init__(self, u1: str, u2: str, g: float = 0.0):
        self.exprs = (parse_expression(u1, "oracle.u1"), parse_expression(u2, "oracle.u2"))
        self.g = g
        self._u = [sympy.lambdify((X, Y, G), e, "numpy") for e in self.exprs]
        self._du = [[sympy.lambdify((X, Y, G), sympy.diff(e, s), "numpy") for s in (X, Y)] for e in self.exprs]

    @staticmethod
    def _eval(f: Callable, points: np.ndarray, g: float) -> np.ndarray:
        return np.broadcast_to(np.asarray(f(points[:, 0], points[:, 1], g), dtype=float), (len(points),))

    def displacement(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.column_stack([self._eval(f, points, self.g) for f in self._u])

    def gradient(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.stack(
            [np.column_stack([self._eval(f, points, self.g) for f in row]) for row in self._du], axis=1
        )


class ReferenceOracle:
    """Displacements from a CSV with columns x, y, u1, u2, linearly interpolated."""

    def __init__(self, path: str | Path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"reference solution file not found: {path}", "oracle.file")
        data = np.genfromtxt(path, delimiter=",", names=True)
        missing = {"x", "y", "u1", "u2"} - set(data.dtype.names or ())
        if missing:
            raise ConfigError(f"reference file lacks columns {sorted(missing)}", "oracle.file")
        self._interp = LinearNDInterpolator(
            np.column_stack([data["x"], data["y"]]), np.column_stack([data["u1"], data["u2"]])
        )

    def displacement(self, points: np.ndarray) -> np.ndarray:
        return self._interp(np.atleast_2d(points))

    def gradient(self, points: np.ndarray) -> None:
        return None


def build_oracle(cfg, g: float) -> Oracle:
    """Oracle for an ``OracleConfig`` at load magnitude ``g``."""
    if cfg.kind == "degraded_bar":
        return DegradedBarOracle(g, cfg.bar_length, cfg.zone_width, cfg.modulus_factor)
    if cfg.kind == "expression":
        return ExpressionOracle(cfg.u1, cfg.u2, g)
    return ReferenceOracle(cfg.file)


def manufactured_body_force(u1: str, u2: str, lam: float, mu: float) -> tuple[sympy.Expr, sympy.Expr]:
    """b = -div(sigma) for linear elasticity, in stress units per length (GPa/mm)."""
    e1, e2 = parse_expression(u1), parse_expression(u2)
    eps11, eps22 = sympy.diff(e1, X), sympy.diff(e2, Y)
    eps12 = (sympy.diff(e1, Y) + sympy.diff(e2, X)) / 2
    tr = eps11 + eps22
    s11 = lam * tr + 2 * mu * eps11
    s22 = lam * tr + 2 * mu * eps22
    s12 = 2 * mu * eps12
    b1 = -(sympy.diff(s11, X) + sympy.diff(s12, Y))
    b2 = -(sympy.diff(s12, X) + sympy.diff(s22, Y))
    return sympy.simplify(b1), sympy.simplify(b2)


def manufactured_loads(cfg):
    """Copy of a RunConfig whose body force and Dirichlet data come from its expression oracle."""
    if cfg.oracle is None or cfg.oracle.kind != "expression":
        return cfg
    params = cfg.material.build()
    b1, b2 = manufactured_body_force(cfg.oracle.u1, cfg.oracle.u2, params.lam, params.mu)
    data = cfg.model_dump(mode="json")
    # config body force is N/mm^3
    data["load"]["body_force"] = [str(b1 * 1000), str(b2 * 1000)]
    for d in data["load"]["dirichlet"]:
        if d.get("u1") is not None:
            d["u1"] = cfg.oracle.u1
        if d.get("u2") is not None:
            d["u2"] = cfg.oracle.u2
    return type(cfg).model_validate(data)


@dataclass
class CellQuadrature:
    points: np.ndarray
    weights: np.ndarray
    cell: np.ndarray


def cell_quadrature(mesh: SmoothingCellMesh) -> CellQuadrature:
    """One-point rule on the triangles of every cell."""
    pts, wts, cells = [], [], []
    for L, poly in enumerate(mesh.polygons):
        for tri in fan_triangles(poly):
            a, b, c = tri
            area = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
            pts.append(tri.mean(axis=0))
            wts.append(area)
            cells.append(L)
    return CellQuadrature(np.array(pts), np.array(wts), np.array(cells, dtype=int))


@dataclass
class ErrorNorms:
    l2: float
    l2_relative: float
    h1: float
    h1_relative: float


def error_norms(u_quad: np.ndarray, quad: CellQuadrature, cell_gradients: np.ndarray,
                mesh: SmoothingCellMesh, oracle: Oracle) -> ErrorNorms:
    """L2 error over the cell quadrature and H1 seminorm error from the smoothed gradients.

    ``u_quad`` holds the approximation at ``quad.points``.
    """
    exact = oracle.displacement(quad.points)
    l2 = float(np.sqrt(np.sum(quad.weights * np.sum((u_quad - exact) ** 2, axis=1))))
    ref = float(np.sqrt(np.sum(quad.weights * np.sum(exact**2, axis=1))))
    grad = oracle.gradient(mesh.centroids)
    if grad is None:
        h1 = h1_ref = np.nan
    else:
        h1 = float(np.sqrt(np.sum(mesh.volumes * np.sum((cell_gradients - grad) ** 2, axis=(1, 2)))))
        h1_ref = float(np.sqrt(np.sum(mesh.volumes * np.sum(grad**2, axis=(1, 2)))))
    return ErrorNorms(l2, l2 / ref if ref > 0 else np.nan, h1, h1 / h1_ref if h1_ref > 0 else np.nan)
