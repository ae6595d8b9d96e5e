"""Field, curve and mesh output. Every file is written to a temporary name and renamed."""
from __future__ import annotations

import csv
import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import meshio
import numpy as np

from .geometry import SmoothingCellMesh

logger = logging.getLogger(__name__)

CELL_COLUMNS = (
    "cell", "x", "y", "area", "u1", "u2", "u1_rk", "u2_rk", "u1_nn", "u2_nn",
    "eps11", "eps22", "eps12", "damage", "psi0_plus", "y1", "y2", "grad_y_norm",
)


def _atomic_target(path: Path) -> tuple[int, str]:
    path.parent.mkdir(parents=True, exist_ok=True)
    return tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)


def atomic_write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    fd, tmp = _atomic_target(path)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_cell_csv(path: str | Path, fields: dict[str, np.ndarray]) -> Path:
    columns = [fields[c] for c in CELL_COLUMNS]
    return write_csv(path, CELL_COLUMNS, zip(*columns))


def write_vtk(path: str | Path, mesh: SmoothingCellMesh, fields: dict[str, np.ndarray]) -> Path:
    """Legacy ASCII VTK of the cell polygons with the cell arrays attached.

    Cells are grouped by vertex count; ``cell`` keeps the original index.
    """
    path = Path(path)
    rings = [np.asarray(p.exterior.coords)[:-1] for p in mesh.polygons]
    if any(len(p.interiors) for p in mesh.polygons):
        logger.warning("cells with holes are written without their holes")
    vertices, inverse = np.unique(np.concatenate(rings), axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    offsets = np.concatenate([[0], np.cumsum([len(r) for r in rings])])
    conn = [inverse[offsets[i]:offsets[i + 1]] for i in range(len(rings))]
    by_size: dict[int, list[int]] = {}
    for i, c in enumerate(conn):
        by_size.setdefault(len(c), []).append(i)
    kinds = {3: "triangle", 4: "quad"}
    blocks, order = [], []
    for size in sorted(by_size):
        ids = by_size[size]
        blocks.append((kinds.get(size, "polygon"), np.array([conn[i] for i in ids])))
        order.append(np.array(ids))
    cell_data = {
        name: [np.asarray(fields[name])[ids] for ids in order]
        for name in CELL_COLUMNS if name not in ("x", "y")
    }
    out = meshio.Mesh(np.column_stack([vertices, np.zeros(len(vertices))]), blocks, cell_data=cell_data)
    fd, tmp = _atomic_target(path)
    os.close(fd)
    try:
        meshio.write(tmp, out, file_format="vtk", binary=False)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_mesh_csv(path: str | Path, mesh: SmoothingCellMesh) -> Path:
    """One row per cell (centroid, area) and one per segment (cell, midpoint, normal, length)."""
    header = ("kind", "cell", "x", "y", "area", "nx", "ny", "length", "region")
    rows = []
    for L in range(mesh.n_cells):
        cx, cy = mesh.centroids[L]
        rows.append(("cell", L, cx, cy, mesh.volumes[L], "", "", "", ""))
    for k in range(mesh.n_segments):
        (mx, my), (nx, ny) = mesh.seg_midpoint[k], mesh.seg_normal[k]
        region = mesh.region_names[mesh.seg_region[k]] if mesh.seg_region[k] >= 0 else ""
        rows.append(("segment", mesh.seg_cell[k], mx, my, "", nx, ny, mesh.seg_length[k], region))
    return write_csv(path, header, rows)


def write_transect(path: str | Path, points: np.ndarray, u: np.ndarray, strain: np.ndarray,
                   damage: np.ndarray) -> Path:
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    header = ("s", "x", "y", "u1", "u2", "eps11", "eps22", "eps12", "damage")
    rows = zip(s, points[:, 0], points[:, 1], u[:, 0], u[:, 1],
               strain[:, 0, 0], strain[:, 1, 1], strain[:, 0, 1], damage)
    return write_csv(path, header, rows)


def export_fields(fields: dict[str, np.ndarray], mesh: SmoothingCellMesh, directory: str | Path, stem: str,
                  formats: Sequence[str] = ("csv",)) -> list[Path]:
    directory = Path(directory)
    written = []
    if "csv" in formats:
        written.append(write_cell_csv(directory / f"{stem}.csv", fields))
    if "vtk" in formats:
        written.append(write_vtk(directory / f"{stem}.vtk", mesh, fields))
    return written
