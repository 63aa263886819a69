"""Planar geometry primitives: points in km coordinates, polygonal
administrative areas, and point-membership tests.

Coordinates are assumed to be already projected to a planar km grid;
there is no geodesy here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Points within this distance (km) of a polygon edge count as inside.
EDGE_TOL = 1e-9


class GeometryError(ValueError):
    """Degenerate polygon or unresolvable geometry."""


@dataclass(frozen=True)
class Point:
    """A location in planar km coordinates (x = easting, y = northing)."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


def distance(a: Point, b: Point) -> float:
    """Euclidean distance in km."""
    return math.hypot(a.x - b.x, a.y - b.y)


def _as_points_array(pts) -> np.ndarray:
    """Coerce a Point, sequence of Points, or (n,2) array to an (n,2) float array."""
    if isinstance(pts, Point):
        return pts.as_array()[None, :]
    if isinstance(pts, (list, tuple)) and len(pts) and isinstance(pts[0], Point):
        arr = np.array([[p.x, p.y] for p in pts], dtype=float)
    else:
        arr = np.asarray(pts, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] != 2:
        raise GeometryError(f"expected (n,2) coordinates, got shape {arr.shape}")
    return arr


def _polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area of an open vertex loop."""
    x, y = vertices[:, 0], vertices[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return 0.5 * float(np.sum(x * yn - xn * y))


def _points_in_polygon(vertices: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Even-odd membership test for points against an open vertex loop.

    Points within EDGE_TOL of a boundary segment count as inside, which
    makes the boundary rule deterministic.
    """
    x1, y1 = vertices[:, 0], vertices[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    px = pts[:, 0][:, None]
    py = pts[:, 1][:, None]

    # distance from each point to each edge segment
    ex, ey = x2 - x1, y2 - y1
    seg_len2 = ex * ex + ey * ey
    t = ((px - x1) * ex + (py - y1) * ey) / seg_len2
    t = np.clip(t, 0.0, 1.0)
    dx = px - (x1 + t * ex)
    dy = py - (y1 + t * ey)
    on_edge = np.any(dx * dx + dy * dy <= EDGE_TOL * EDGE_TOL, axis=1)

    # half-open crossing rule; exact boundary hits are covered by on_edge
    cond = (y1 > py) != (y2 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_int = x1 + (py - y1) * ex / ey
    crossings = np.sum(cond & (px < x_int), axis=1)

    return on_edge | (crossings % 2 == 1)


class AdminArea:
    """A simple polygon with an integer id and a label.

    Vertices are an ordered open loop (the closing vertex may be repeated
    in the input; it is dropped). Orientation does not matter.
    """

    def __init__(self, area_id: int, name: str, vertices):
        verts = np.asarray(vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise GeometryError("vertices must be an (k,2) array")
        if verts.shape[0] >= 2 and np.allclose(verts[0], verts[-1]):
            verts = verts[:-1]
        if verts.shape[0] < 3:
            raise GeometryError(f"area {area_id}: polygon needs >= 3 distinct vertices")
        if not np.all(np.isfinite(verts)):
            raise GeometryError(f"area {area_id}: non-finite vertex")
        if abs(_polygon_area(verts)) <= 0.0:
            raise GeometryError(f"area {area_id}: polygon has zero area")
        self.id = int(area_id)
        self.name = str(name)
        self.vertices = verts

    @property
    def area(self) -> float:
        return abs(_polygon_area(self.vertices))

    def bounds(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def contains_many(self, pts) -> np.ndarray:
        return _points_in_polygon(self.vertices, _as_points_array(pts))

    def __repr__(self):
        return f"AdminArea(id={self.id}, name={self.name!r}, nvert={len(self.vertices)})"


def contains(area: AdminArea, p: Point) -> bool:
    """True iff p is inside area or on its boundary."""
    return bool(area.contains_many(p)[0])


class Geography:
    """A set of admin areas with unique ids, assumed non-overlapping up to
    shared boundaries. Boundary ties resolve to the lowest area id."""

    def __init__(self, areas, check_overlap: bool = True):
        areas = sorted(areas, key=lambda a: a.id)
        ids = [a.id for a in areas]
        if len(set(ids)) != len(ids):
            raise GeometryError(f"duplicate area ids: {ids}")
        if not areas:
            raise GeometryError("geography needs at least one area")
        self.areas = areas
        lo = np.min([a.bounds()[:2] for a in areas], axis=0)
        hi = np.max([a.bounds()[2:] for a in areas], axis=0)
        self.bounding_box = (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))
        if check_overlap:
            self._check_overlap()

    def _check_overlap(self, draws: int = 256):
        xmin, ymin, xmax, ymax = self.bounding_box
        rng = np.random.default_rng(1849320597)
        pts = np.column_stack(
            [rng.uniform(xmin, xmax, draws), rng.uniform(ymin, ymax, draws)]
        )
        hits = np.zeros(draws, dtype=int)
        for a in self.areas:
            hits += a.contains_many(pts).astype(int)
        if np.any(hits > 1):
            raise GeometryError("areas overlap beyond shared boundaries")

    @property
    def domain_size(self) -> float:
        """Largest side of the bounding box, in km."""
        xmin, ymin, xmax, ymax = self.bounding_box
        return max(xmax - xmin, ymax - ymin)

    def area_by_id(self, area_id: int) -> AdminArea:
        for a in self.areas:
            if a.id == area_id:
                return a
        raise KeyError(f"no area with id {area_id}")

    def locate_many(self, pts) -> np.ndarray:
        """Area id per point, -1 where no area contains the point.

        Areas are scanned in ascending id order so that a point on a shared
        boundary deterministically resolves to the lowest id.
        """
        arr = _as_points_array(pts)
        out = np.full(arr.shape[0], -1, dtype=int)
        undecided = np.ones(arr.shape[0], dtype=bool)
        for a in self.areas:
            if not np.any(undecided):
                break
            idx = np.flatnonzero(undecided)
            inside = a.contains_many(arr[idx])
            out[idx[inside]] = a.id
            undecided[idx[inside]] = False
        return out


def locate(geo: Geography, p: Point) -> int | None:
    """Id of the unique containing area, or None if outside all areas."""
    got = int(geo.locate_many(p)[0])
    return None if got < 0 else got


def read_geography(path, check_overlap: bool = True) -> Geography:
    """Read the text geography format: `area <id> <name>` header lines each
    followed by `x y` vertex lines, areas separated by blank lines."""
    areas = []
    header = None
    verts: list[list[float]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                if header is not None:
                    areas.append(AdminArea(header[0], header[1], verts))
                    header, verts = None, []
                continue
            if line.startswith("area "):
                if header is not None:
                    areas.append(AdminArea(header[0], header[1], verts))
                    verts = []
                parts = line.split(maxsplit=2)
                if len(parts) < 3:
                    raise GeometryError(f"{path}:{lineno}: malformed area header")
                header = (int(parts[1]), parts[2])
            else:
                if header is None:
                    raise GeometryError(f"{path}:{lineno}: vertex before area header")
                xy = line.split()
                if len(xy) != 2:
                    raise GeometryError(f"{path}:{lineno}: expected `x y`")
                verts.append([float(xy[0]), float(xy[1])])
    if header is not None:
        areas.append(AdminArea(header[0], header[1], verts))
    return Geography(areas, check_overlap=check_overlap)


def write_geography(geo: Geography, path):
    with open(path, "w") as fh:
        for a in geo.areas:
            fh.write(f"area {a.id} {a.name}\n")
            for x, y in a.vertices:
                fh.write(f"{x:.17g} {y:.17g}\n")
            fh.write("\n")
