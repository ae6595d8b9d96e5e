"""Domain description, background nodes and SCNI smoothing-cell meshes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import shapely
from scipy.spatial import cKDTree
from shapely.geometry import LineString, MultiPoint, Polygon, box
from shapely.geometry.polygon import orient
from shapely.ops import triangulate, unary_union, voronoi_diagram

from .errors import GeometryError, MeshGenerationError

logger = logging.getLogger(__name__)

AREA_RTOL = 1e-10
UNIFORMITY_LIMIT = 4.0


@dataclass
class Notch:
    """Pre-existing slit modelled as a thin hole around a polyline."""

    polyline: np.ndarray
    width: float

    def __post_init__(self):
        self.polyline = np.asarray(self.polyline, dtype=float).reshape(-1, 2)
        if len(self.polyline) < 2:
            raise GeometryError("notch polyline needs at least two points")
        if self.width <= 0.0:
            raise GeometryError("zero-width notches are not supported; give the slit a width")

    def polygon(self) -> Polygon:
        return LineString(self.polyline).buffer(self.width / 2.0, cap_style="flat", join_style="mitre")

    def segments(self) -> np.ndarray:
        return np.stack([self.polyline[:-1], self.polyline[1:]], axis=1)


@dataclass
class MaterialZone:
    """Region with scaled elastic moduli (pre-degraded material)."""

    name: str
    modulus_factor: float
    polygon_coords: np.ndarray | None = None
    polyline: np.ndarray | None = None
    width: float | None = None

    def __post_init__(self):
        if self.modulus_factor <= 0.0:
            raise GeometryError(f"zone {self.name!r}: modulus factor must be positive")
        if (self.polygon_coords is None) == (self.polyline is None):
            raise GeometryError(f"zone {self.name!r}: give either a polygon or a polyline with width")
        if self.polyline is not None and not self.width:
            raise GeometryError(f"zone {self.name!r}: polyline zones need a positive width")

    def polygon(self) -> Polygon:
        if self.polygon_coords is not None:
            return orient(Polygon(np.asarray(self.polygon_coords, dtype=float)))
        line = LineString(np.asarray(self.polyline, dtype=float))
        return line.buffer(self.width / 2.0, cap_style="flat", join_style="mitre")


@dataclass
class RefineRegion:
    polygon_coords: np.ndarray
    level: int

    def polygon(self) -> Polygon:
        return Polygon(np.asarray(self.polygon_coords, dtype=float))


@dataclass
class Domain2D:
    """Polygonal body with notches, named boundary regions and material zones.

    ``regions`` maps a region name to indices of outer edges; edge ``i`` runs
    from ``outer[i]`` to ``outer[i + 1]``.
    """

    outer: np.ndarray
    notches: list[Notch] = field(default_factory=list)
    regions: dict[str, tuple[int, ...]] = field(default_factory=dict)
    zones: list[MaterialZone] = field(default_factory=list)

    def __post_init__(self):
        self.outer = np.asarray(self.outer, dtype=float).reshape(-1, 2)
        if len(self.outer) < 3:
            raise GeometryError("outer boundary needs at least three vertices")
        ring = Polygon(self.outer)
        if not ring.is_valid or not ring.exterior.is_simple:
            raise GeometryError("outer boundary is self-intersecting")
        if not ring.exterior.is_ccw:
            raise GeometryError("outer boundary must be ordered counter-clockwise")
        n_edges = len(self.outer)
        owner: dict[int, str] = {}
        for name, edges in self.regions.items():
            for e in edges:
                if not 0 <= e < n_edges:
                    raise GeometryError(f"region {name!r} refers to edge {e}, domain has {n_edges}")
                if e in owner:
                    raise GeometryError(f"edge {e} assigned to both {owner[e]!r} and {name!r}")
                owner[e] = name
        self.regions = {name: tuple(int(e) for e in edges) for name, edges in self.regions.items()}

    @cached_property
    def polygon(self) -> Polygon:
        body = Polygon(self.outer)
        if self.notches:
            body = body.difference(unary_union([n.polygon() for n in self.notches]))
        if body.geom_type != "Polygon" or body.is_empty:
            raise GeometryError("notches split the domain into disconnected pieces")
        return orient(body)

    @property
    def area(self) -> float:
        return float(self.polygon.area)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return tuple(float(v) for v in Polygon(self.outer).bounds)

    @property
    def diameter(self) -> float:
        x0, y0, x1, y1 = self.bounds
        return float(np.hypot(x1 - x0, y1 - y0))

    @property
    def edges(self) -> np.ndarray:
        return np.stack([self.outer, np.roll(self.outer, -1, axis=0)], axis=1)

    @property
    def region_names(self) -> tuple[str, ...]:
        return tuple(self.regions)

    def is_rectangle(self) -> bool:
        if len(self.outer) != 4:
            return False
        d = self.edges[:, 1] - self.edges[:, 0]
        return bool(np.all(np.isclose(d[:, 0], 0.0) | np.isclose(d[:, 1], 0.0)))

    def edge_region(self) -> np.ndarray:
        """Region index of every outer edge, -1 where unassigned."""
        out = np.full(len(self.outer), -1, dtype=int)
        for k, edges in enumerate(self.regions.values()):
            out[list(edges)] = k
        return out

    def notch_segments(self) -> np.ndarray:
        if not self.notches:
            return np.zeros((0, 2, 2))
        return np.concatenate([n.segments() for n in self.notches])


@dataclass
class NodeSet:
    """Background RK nodes with per-node support size ``a``."""

    coords: np.ndarray
    support: np.ndarray
    spacing: float

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        self.support = np.broadcast_to(np.asarray(self.support, dtype=float), (len(self.coords),)).copy()
        if np.any(self.support <= 0.0):
            raise GeometryError("support size must be positive at every node")

    @property
    def count(self) -> int:
        return len(self.coords)

    def uniformity_ratio(self) -> float:
        """Max over min nearest-neighbour distance."""
        if self.count < 2:
            return 1.0
        dist, _ = cKDTree(self.coords).query(self.coords, k=2)
        nearest = dist[:, 1]
        return float(nearest.max() / nearest.min())

    def check_uniformity(self) -> None:
        ratio = self.uniformity_ratio()
        if ratio > UNIFORMITY_LIMIT:
            logger.warning("node set is not quasi-uniform: neighbour distance ratio %.2f > %.1f",
                           ratio, UNIFORMITY_LIMIT)

    @classmethod
    def from_points(cls, coords, support_factor: float = 2.0, spacing: float | None = None) -> "NodeSet":
        """Scattered nodes; local spacing is the mean distance to the four nearest neighbours."""
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        if spacing is not None:
            local = np.full(len(coords), float(spacing))
        else:
            if len(coords) < 5:
                raise GeometryError("give an explicit spacing for clouds with fewer than five nodes")
            dist, _ = cKDTree(coords).query(coords, k=5)
            local = dist[:, 1:].mean(axis=1)
        nodes = cls(coords, support_factor * local, float(np.median(local)))
        nodes.check_uniformity()
        return nodes


def build_uniform_grid(nx: int, ny: int, domain: Domain2D, support_factor: float = 2.0) -> NodeSet:
    """Uniform ``nx`` x ``ny`` lattice over a rectangular domain.

    Nodes falling inside notch holes are dropped.
    """
    if nx < 2 or ny < 2:
        raise GeometryError(f"grid needs at least 2x2 nodes, got {nx}x{ny}")
    if not domain.is_rectangle():
        raise GeometryError("uniform grids need a rectangular outer boundary")
    x0, y0, x1, y1 = domain.bounds
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    gx, gy = np.meshgrid(xs, ys)
    coords = np.column_stack([gx.ravel(), gy.ravel()])
    h = max((x1 - x0) / (nx - 1), (y1 - y0) / (ny - 1))
    if domain.notches:
        keep = shapely.covers(domain.polygon, shapely.points(coords))
        if not keep.all():
            logger.info("dropping %d nodes inside notches", int((~keep).sum()))
        coords = coords[keep]
    nodes = NodeSet(coords, support_factor * h, h)
    nodes.check_uniformity()
    return nodes


@dataclass
class SmoothingCellMesh:
    """Conforming smoothing cells with their boundary segments.

    Segment ``k`` belongs to cell ``seg_cell[k]`` and is evaluated at surface
    point ``seg_point[k]``; shared interfaces map to the same surface point.
    """

    polygons: list[Polygon]
    volumes: np.ndarray
    centroids: np.ndarray
    owner: np.ndarray
    zone: np.ndarray
    seg_cell: np.ndarray
    seg_midpoint: np.ndarray
    seg_normal: np.ndarray
    seg_length: np.ndarray
    seg_point: np.ndarray
    seg_region: np.ndarray
    seg_boundary: np.ndarray
    eval_points: np.ndarray
    region_names: tuple[str, ...] = ()

    @property
    def n_cells(self) -> int:
        return len(self.volumes)

    @property
    def n_surf(self) -> int:
        return len(self.eval_points)

    @property
    def n_segments(self) -> int:
        return len(self.seg_cell)

    def segments_of(self, cell: int) -> np.ndarray:
        return np.flatnonzero(self.seg_cell == cell)

    def region_segments(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.seg_region == self.region_names.index(name))

    @cached_property
    def _tree(self) -> shapely.STRtree:
        return shapely.STRtree(self.polygons)

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Index of a cell containing each point, -1 outside the mesh."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        hits = self._tree.query(shapely.points(points), predicate="intersects")
        out = np.full(len(points), -1, dtype=int)
        # first hit wins for points on shared edges
        for p, c in zip(hits[0][::-1], hits[1][::-1]):
            out[p] = c
        return out

    def check(self, domain_area: float) -> None:
        total = float(self.volumes.sum())
        if abs(total - domain_area) > AREA_RTOL * domain_area:
            raise MeshGenerationError(f"cells cover {total!r}, domain area is {domain_area!r}")
        norms = np.linalg.norm(self.seg_normal, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise MeshGenerationError("segment normals are not unit length")
        closure = np.zeros((self.n_cells, 2))
        np.add.at(closure, self.seg_cell, self.seg_length[:, None] * self.seg_normal)
        scale = np.sqrt(self.volumes)[:, None]
        bad = np.flatnonzero(np.any(np.abs(closure) > 1e-10 * np.maximum(scale, 1.0), axis=1))
        if len(bad):
            raise MeshGenerationError(f"cell {int(bad[0])} boundary is not closed", node=int(self.owner[bad[0]]))


def _polygon_parts(geom, min_area: float) -> list[Polygon]:
    if geom.is_empty:
        return []
    if geom.geom_type == "Polygon":
        parts = [geom]
    else:
        parts = [g for g in getattr(geom, "geoms", []) if g.geom_type == "Polygon"]
    return [p for p in parts if p.area > min_area]


def _is_convex(poly: Polygon) -> bool:
    return len(poly.interiors) == 0 and poly.convex_hull.area - poly.area <= 1e-12 * poly.area


def fan_triangles(poly: Polygon) -> list[np.ndarray]:
    """Triangles covering ``poly``: a centroid fan for convex cells, filtered Delaunay otherwise."""
    if _is_convex(poly):
        c = np.asarray(poly.centroid.coords[0])
        ring = np.asarray(poly.exterior.coords)[:-1]
        return [np.array([c, ring[i], ring[(i + 1) % len(ring)]]) for i in range(len(ring))]
    return [
        np.asarray(t.exterior.coords)[:3]
        for t in triangulate(poly)
        if poly.contains(t.representative_point())
    ]


def _split_triangle(tri: np.ndarray) -> list[np.ndarray]:
    a, b, c = tri
    ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
    return [np.array([a, ab, ca]), np.array([ab, b, bc]), np.array([ca, bc, c]), np.array([ab, bc, ca])]


def _refine(poly: Polygon, level: int) -> list[Polygon]:
    tris = fan_triangles(poly)
    for _ in range(level - 1):
        tris = [t for tri in tris for t in _split_triangle(tri)]
    return [Polygon(t) for t in tris]


def _clean_ring(coords: np.ndarray, tol: float) -> np.ndarray:
    pts = np.asarray(coords, dtype=float)
    if np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    keep = [pts[0]]
    for p in pts[1:]:
        if np.linalg.norm(p - keep[-1]) > tol:
            keep.append(p)
    if len(keep) > 1 and np.linalg.norm(keep[0] - keep[-1]) <= tol:
        keep.pop()
    pts = np.array(keep)
    changed = True
    while changed and len(pts) > 3:
        changed = False
        for i in range(len(pts)):
            prev, cur, nxt = pts[i - 1], pts[i], pts[(i + 1) % len(pts)]
            e1, e2 = cur - prev, nxt - cur
            cross = e1[0] * e2[1] - e1[1] * e2[0]
            if abs(cross) <= 1e-12 * np.linalg.norm(e1) * np.linalg.norm(e2) and np.dot(e1, e2) > 0:
                pts = np.delete(pts, i, axis=0)
                changed = True
                break
    return pts


def _insert_hanging(ring: np.ndarray, tree: cKDTree, vertices: np.ndarray, tol: float) -> np.ndarray:
    out = []
    n = len(ring)
    for i in range(n):
        a, b = ring[i], ring[(i + 1) % n]
        out.append(a)
        ab = b - a
        length = np.linalg.norm(ab)
        cand = tree.query_ball_point((a + b) / 2, length / 2 + tol)
        if not cand:
            continue
        pts = vertices[cand]
        t = (pts - a) @ ab / length**2
        dist = np.abs((pts[:, 0] - a[0]) * ab[1] - (pts[:, 1] - a[1]) * ab[0]) / length
        inner = (dist <= tol) & (t * length > tol) & ((1 - t) * length > tol)
        if inner.any():
            order = np.argsort(t[inner])
            out.extend(pts[inner][order])
    return np.array(out)


def _voronoi_regions(nodes: NodeSet, envelope: Polygon) -> list[Polygon]:
    if nodes.count == 1:
        return [envelope]
    regions = voronoi_diagram(MultiPoint(nodes.coords), envelope=envelope)
    tree = cKDTree(nodes.coords)
    by_node: list[Polygon | None] = [None] * nodes.count
    for region in regions.geoms:
        _, site = tree.query(np.asarray(region.representative_point().coords[0]))
        by_node[int(site)] = region
    for i, region in enumerate(by_node):
        if region is None:
            raise MeshGenerationError("no Voronoi region found (duplicate node?)", node=i)
    return by_node


def build_smoothing_cells(
    nodes: NodeSet,
    domain: Domain2D,
    refine_regions: list[RefineRegion] | tuple = (),
) -> SmoothingCellMesh:
    """Voronoi smoothing cells clipped to the domain, split along material zones and refined.

    Cell boundaries are made conforming: every edge is split at vertices of
    neighbouring cells lying on it, so each interface segment is shared.
    """
    body = domain.polygon
    diam = domain.diameter
    tol = 1e-10 * diam
    min_area = 1e-12 * nodes.spacing**2
    x0, y0, x1, y1 = domain.bounds
    envelope = box(x0 - diam, y0 - diam, x1 + diam, y1 + diam)

    cells: list[Polygon] = []
    owner: list[int] = []
    zone: list[int] = []
    for i, region in enumerate(_voronoi_regions(nodes, envelope)):
        parts = _polygon_parts(region.intersection(body), min_area)
        if not parts:
            raise MeshGenerationError("clipped Voronoi cell has zero area", node=i)
        cells.extend(parts)
        owner.extend([i] * len(parts))
        zone.extend([-1] * len(parts))

    for z, mz in enumerate(domain.zones):
        zpoly = mz.polygon()
        new_cells, new_owner, new_zone = [], [], []
        for poly, o, zo in zip(cells, owner, zone):
            if not poly.intersects(zpoly):
                new_cells.append(poly), new_owner.append(o), new_zone.append(zo)
                continue
            inside = _polygon_parts(poly.intersection(zpoly), min_area)
            outside = _polygon_parts(poly.difference(zpoly), min_area)
            new_cells.extend(inside + outside)
            new_owner.extend([o] * (len(inside) + len(outside)))
            new_zone.extend([z] * len(inside) + [zo] * len(outside))
        cells, owner, zone = new_cells, new_owner, new_zone

    for region in refine_regions:
        if region.level <= 0:
            continue
        rpoly = region.polygon()
        new_cells, new_owner, new_zone = [], [], []
        for poly, o, zo in zip(cells, owner, zone):
            if poly.intersection(rpoly).area <= min_area:
                new_cells.append(poly), new_owner.append(o), new_zone.append(zo)
                continue
            if not _is_convex(poly):
                logger.warning("cell of node %d is not convex; left unrefined", o)
                new_cells.append(poly), new_owner.append(o), new_zone.append(zo)
                continue
            subs = _refine(poly, region.level)
            new_cells.extend(subs)
            new_owner.extend([o] * len(subs))
            new_zone.extend([zo] * len(subs))
        cells, owner, zone = new_cells, new_owner, new_zone

    rings = []
    for poly in cells:
        poly = orient(poly)
        rings.append(
            [_clean_ring(np.asarray(poly.exterior.coords), tol)]
            + [_clean_ring(np.asarray(r.coords), tol) for r in poly.interiors]
        )
    vertices = np.unique(np.concatenate([r for rs in rings for r in rs]), axis=0)
    tree = cKDTree(vertices)
    rings = [[_insert_hanging(r, tree, vertices, tol) for r in rs] for rs in rings]
    polygons = [orient(Polygon(rs[0], rs[1:])) for rs in rings]

    edge_region = domain.edge_region()
    outer_edges = domain.edges
    boundary = body.boundary

    seg_cell, seg_a, seg_b = [], [], []
    for L, poly in enumerate(polygons):
        for ring in [poly.exterior, *poly.interiors]:
            pts = np.asarray(ring.coords)
            a, b = pts[:-1], pts[1:]
            ok = np.linalg.norm(b - a, axis=1) > tol
            seg_cell.extend([L] * int(ok.sum()))
            seg_a.append(a[ok])
            seg_b.append(b[ok])
    seg_cell = np.asarray(seg_cell, dtype=int)
    seg_a = np.concatenate(seg_a)
    seg_b = np.concatenate(seg_b)
    d = seg_b - seg_a
    length = np.linalg.norm(d, axis=1)
    normal = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    mid = (seg_a + seg_b) / 2

    on_boundary = shapely.distance(boundary, shapely.points(mid)) <= tol
    seg_region = np.full(len(mid), -1, dtype=int)
    for e, (p, q) in enumerate(outer_edges):
        if edge_region[e] < 0:
            continue
        pq = q - p
        lpq = np.linalg.norm(pq)

        def _dist(x):
            return np.abs((x[:, 0] - p[0]) * pq[1] - (x[:, 1] - p[1]) * pq[0]) / lpq

        def _t(x):
            return (x - p) @ pq / lpq**2

        hit = (
            on_boundary
            & (_dist(seg_a) <= tol) & (_dist(seg_b) <= tol)
            & (_t(mid) > 0.0) & (_t(mid) < 1.0)
        )
        seg_region[hit] = edge_region[e]

    keys = np.round(mid / (1e-9 * diam)).astype(np.int64)
    _, first, seg_point = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    eval_points = mid[first]

    mesh = SmoothingCellMesh(
        polygons=polygons,
        volumes=np.array([p.area for p in polygons]),
        centroids=np.array([p.centroid.coords[0] for p in polygons]),
        owner=np.asarray(owner, dtype=int),
        zone=np.asarray(zone, dtype=int),
        seg_cell=seg_cell,
        seg_midpoint=mid,
        seg_normal=normal,
        seg_length=length,
        seg_point=np.asarray(seg_point, dtype=int).ravel(),
        seg_region=seg_region,
        seg_boundary=on_boundary,
        eval_points=eval_points,
        region_names=domain.region_names,
    )
    mesh.check(domain.area)
    logger.info(
        "smoothing mesh: %d cells, %d segments, %d surface points", mesh.n_cells, mesh.n_segments, mesh.n_surf
    )
    return mesh


def segments_cross(p: np.ndarray, q: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """True where segment p->q properly crosses any of ``segments`` (M, 2, 2)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    out = np.zeros(np.broadcast_shapes(p.shape, q.shape)[:-1], dtype=bool)
    for a, b in np.asarray(segments, dtype=float).reshape(-1, 2, 2):

        def _side(u, v, w):
            return (v[..., 0] - u[..., 0]) * (w[..., 1] - u[..., 1]) - (v[..., 1] - u[..., 1]) * (w[..., 0] - u[..., 0])

        d1 = _side(a, b, p)
        d2 = _side(a, b, q)
        d3 = _side(p, q, a)
        d4 = _side(p, q, b)
        out |= (d1 * d2 < 0) & (d3 * d4 < 0)
    return out
