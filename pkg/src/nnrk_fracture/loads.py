"""Load program and per-step boundary data.

Dirichlet values, tractions and body forces are sympy expressions in ``x``,
``y`` and the load magnitude ``g``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy
import torch

from .errors import ConfigError
from .geometry import SmoothingCellMesh

logger = logging.getLogger(__name__)

X, Y, G = sympy.symbols("x y g")
# config tractions and body forces are N/mm^2 and N/mm^3; internal units are kN
KN_PER_N = 1e-3


def parse_expression(text, path: str | None = None) -> sympy.Expr:
    try:
        expr = sympy.sympify(str(text), locals={"x": X, "y": Y, "g": G})
    except (sympy.SympifyError, SyntaxError, TypeError) as e:
        raise ConfigError(f"cannot parse expression {text!r}: {e}", path) from e
    unknown = expr.free_symbols - {X, Y, G}
    if unknown:
        raise ConfigError(f"expression {text!r} uses unknown symbols {sorted(map(str, unknown))}", path)
    return expr


@dataclass
class FieldExpression:
    """Compiled scalar field f(x, y, g) with its derivative in g."""

    expr: sympy.Expr
    _f: Callable = field(init=False, repr=False)
    _df: Callable = field(init=False, repr=False)

    def __post_init__(self):
        self._f = sympy.lambdify((X, Y, G), self.expr, "numpy")
        self._df = sympy.lambdify((X, Y, G), sympy.diff(self.expr, G), "numpy")

    @classmethod
    def parse(cls, text, path: str | None = None) -> "FieldExpression":
        return cls(parse_expression(text, path))

    @property
    def driven(self) -> bool:
        return G in self.expr.free_symbols

    def __call__(self, pts: np.ndarray, g: float) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.broadcast_to(np.asarray(self._f(pts[:, 0], pts[:, 1], g), dtype=float), (len(pts),)).copy()

    def rate(self, pts: np.ndarray, g: float) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.broadcast_to(np.asarray(self._df(pts[:, 0], pts[:, 1], g), dtype=float), (len(pts),)).copy()


@dataclass
class DirichletCondition:
    region: str
    components: dict[int, FieldExpression]


@dataclass
class NeumannCondition:
    region: str
    traction: tuple[FieldExpression, FieldExpression]


@dataclass
class BoundaryData:
    """Boundary and body loads of one step, in internal units, ready for the loss."""

    dir_point: torch.Tensor
    dir_comp: torch.Tensor
    dir_value: torch.Tensor
    dir_rate: torch.Tensor
    dir_length: torch.Tensor
    dir_cell: torch.Tensor
    dir_normal: torch.Tensor
    neu_point: torch.Tensor
    neu_traction: torch.Tensor
    neu_length: torch.Tensor
    body: torch.Tensor

    @property
    def u_ref(self) -> float:
        return float(self.dir_value.abs().max()) if len(self.dir_value) else 0.0


@dataclass
class LoadProgram:
    """Sequence of load magnitudes with the boundary conditions they drive."""

    values: np.ndarray
    dirichlet: list[DirichletCondition] = field(default_factory=list)
    neumann: list[NeumannCondition] = field(default_factory=list)
    body_force: tuple[FieldExpression, FieldExpression] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if len(self.values) < 1:
            raise ConfigError("load program needs at least one step", "load")

    @property
    def n_steps(self) -> int:
        return len(self.values)

    @classmethod
    def uniform(cls, increment: float, steps: int, **kwargs) -> "LoadProgram":
        return cls(increment * np.arange(1, steps + 1), **kwargs)

    def check_regions(self, region_names) -> None:
        for kind, conds in (("dirichlet", self.dirichlet), ("neumann", self.neumann)):
            for i, cond in enumerate(conds):
                if cond.region not in region_names:
                    raise ConfigError(f"unknown boundary region {cond.region!r}", f"load.{kind}.{i}.region")

    def boundary_data(self, mesh: SmoothingCellMesh, step: int) -> BoundaryData:
        g = float(self.values[step])
        points, comps, values, rates, lengths = [], [], [], [], []
        cells, normals = [], []
        for cond in self.dirichlet:
            segs = mesh.region_segments(cond.region)
            mid = mesh.seg_midpoint[segs]
            for comp, expr in cond.components.items():
                points.append(mesh.seg_point[segs])
                comps.append(np.full(len(segs), comp))
                values.append(expr(mid, g))
                rates.append(expr.rate(mid, g))
                lengths.append(mesh.seg_length[segs])
                cells.append(mesh.seg_cell[segs])
                normals.append(mesh.seg_normal[segs])
        n_pts, n_trac, n_len = [], [], []
        for cond in self.neumann:
            segs = mesh.region_segments(cond.region)
            mid = mesh.seg_midpoint[segs]
            n_pts.append(mesh.seg_point[segs])
            n_trac.append(np.column_stack([t(mid, g) for t in cond.traction]) * KN_PER_N)
            n_len.append(mesh.seg_length[segs])
        if self.body_force is not None:
            body = np.column_stack([b(mesh.centroids, g) for b in self.body_force]) * KN_PER_N
        else:
            body = np.zeros((mesh.n_cells, 2))

        def _cat(parts, dtype=torch.float64, width=None):
            if parts:
                return torch.as_tensor(np.concatenate(parts), dtype=dtype)
            shape = (0,) if width is None else (0, width)
            return torch.zeros(shape, dtype=dtype)

        return BoundaryData(
            dir_point=_cat(points, torch.long),
            dir_comp=_cat(comps, torch.long),
            dir_value=_cat(values),
            dir_rate=_cat(rates),
            dir_length=_cat(lengths),
            dir_cell=_cat(cells, torch.long),
            dir_normal=_cat(normals, width=2),
            neu_point=_cat(n_pts, torch.long),
            neu_traction=_cat(n_trac, width=2),
            neu_length=_cat(n_len),
            body=torch.as_tensor(body, dtype=torch.float64),
        )
