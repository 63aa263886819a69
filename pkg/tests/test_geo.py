"""Geometry primitives: distances, point-in-polygon, area lookup."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomask.geo import (
    AdminArea,
    Geography,
    GeometryError,
    Point,
    contains,
    distance,
    locate,
    read_geography,
    write_geography,
)

UNIT_SQUARE = AdminArea(1, "unit", [[0, 0], [1, 0], [1, 1], [0, 1]])

# concave notch: L-shape covering the unit square minus its upper-right quadrant
L_SHAPE = AdminArea(2, "ell", [[0, 0], [1, 0], [1, 0.5], [0.5, 0.5], [0.5, 1], [0, 1]])


def winding_number_contains(vertices: np.ndarray, p) -> bool:
    """Independent membership oracle: winding number accumulated from signed
    angles, with an explicit on-segment check."""
    v = np.asarray(vertices, dtype=float)
    x, y = p
    for i in range(len(v)):
        a, b = v[i], v[(i + 1) % len(v)]
        ab = b - a
        ap = np.array([x, y]) - a
        t = np.dot(ap, ab) / np.dot(ab, ab)
        t = min(max(t, 0.0), 1.0)
        if np.hypot(*(ap - t * ab)) <= 1e-9:
            return True
    total = 0.0
    for i in range(len(v)):
        a = v[i] - [x, y]
        b = v[(i + 1) % len(v)] - [x, y]
        cross = a[0] * b[1] - a[1] * b[0]
        total += np.arctan2(cross, np.dot(a, b))
    return bool(abs(total) > np.pi)


class TestDistance:
    def test_identity(self):
        assert distance(Point(0, 0), Point(0, 0)) == 0.0

    def test_three_four_five(self):
        assert distance(Point(0, 0), Point(3, 4)) == 5.0

    def test_high_precision_value(self):
        # sqrt(3.3^2 + 5.1^2) evaluated independently at 30 digits
        got = distance(Point(1.2, -0.7), Point(-2.1, 4.4))
        assert got == pytest.approx(6.07453701939497608, abs=1e-14)

    def test_symmetry(self):
        a, b = Point(0.3, -2.0), Point(5.5, 1.25)
        assert distance(a, b) == distance(b, a)

    @given(
        st.tuples(*[st.floats(-100, 100) for _ in range(6)]),
    )
    @settings(max_examples=200, deadline=None)
    def test_triangle_inequality(self, coords):
        a, b, c = Point(coords[0], coords[1]), Point(coords[2], coords[3]), Point(coords[4], coords[5])
        assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-9


class TestContains:
    def test_centroid_inside(self):
        assert contains(UNIT_SQUARE, Point(0.5, 0.5))

    def test_far_outside(self):
        assert not contains(UNIT_SQUARE, Point(2, 2))

    def test_concave_notch_outside(self):
        # the notch quadrant is not part of the L-shape
        assert not contains(L_SHAPE, Point(0.75, 0.75))
        assert winding_number_contains(L_SHAPE.vertices, (0.75, 0.75)) is False

    def test_boundary_counts_inside(self):
        assert contains(UNIT_SQUARE, Point(0.0, 0.5))
        assert contains(UNIT_SQUARE, Point(1.0, 1.0))

    def test_degenerate_polygon_rejected(self):
        with pytest.raises(GeometryError):
            AdminArea(9, "line", [[0, 0], [1, 1], [2, 2]])
        with pytest.raises(GeometryError):
            AdminArea(9, "pair", [[0, 0], [1, 1]])

    @pytest.mark.parametrize("area", [UNIT_SQUARE, L_SHAPE])
    def test_matches_winding_oracle(self, area):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-0.25, 1.25, size=(10_000, 2))
        got = area.contains_many(pts)
        want = np.array([winding_number_contains(area.vertices, p) for p in pts])
        assert np.array_equal(got, want)


class TestLocate:
    def make_geo(self):
        # ids deliberately out of construction order; areas 2 and 5 share an edge
        a2 = AdminArea(2, "west", [[0, 0], [1, 0], [1, 1], [0, 1]])
        a5 = AdminArea(5, "east", [[1, 0], [2, 0], [2, 1], [1, 1]])
        return Geography([a5, a2])

    def test_interior(self):
        geo = self.make_geo()
        assert locate(geo, Point(0.5, 0.5)) == 2
        assert locate(geo, Point(1.5, 0.5)) == 5

    def test_outside_all(self):
        assert locate(self.make_geo(), Point(5, 5)) is None

    def test_shared_edge_tie_breaks_low(self):
        assert locate(self.make_geo(), Point(1.0, 0.5)) == 2

    def test_matches_exhaustive_contains(self):
        geo = self.make_geo()
        rng = np.random.default_rng(11)
        pts = rng.uniform(-0.5, 2.5, size=(2000, 2))
        ids = geo.locate_many(pts)
        for p, got in zip(pts, ids):
            hits = [a.id for a in geo.areas if contains(a, Point(*p))]
            want = min(hits) if hits else -1
            assert got == want

    def test_overlap_detection(self):
        a1 = AdminArea(1, "a", [[0, 0], [2, 0], [2, 2], [0, 2]])
        a2 = AdminArea(2, "b", [[1, 1], [3, 1], [3, 3], [1, 3]])
        with pytest.raises(GeometryError):
            Geography([a1, a2])

    def test_duplicate_ids_rejected(self):
        a1 = AdminArea(1, "a", [[0, 0], [1, 0], [1, 1], [0, 1]])
        a1b = AdminArea(1, "b", [[2, 0], [3, 0], [3, 1], [2, 1]])
        with pytest.raises(GeometryError):
            Geography([a1, a1b])


def test_geography_roundtrip(tmp_path):
    geo = Geography(
        [
            AdminArea(1, "north west", [[0, 0], [1, 0], [1, 1], [0, 1]]),
            AdminArea(3, "south", [[1, 0], [2.5, 0], [2.5, 1], [1, 1]]),
        ]
    )
    path = tmp_path / "geo.txt"
    write_geography(geo, path)
    back = read_geography(path)
    assert [a.id for a in back.areas] == [1, 3]
    assert back.areas[0].name == "north west"
    assert np.allclose(back.areas[1].vertices, geo.areas[1].vertices)
    assert back.bounding_box == geo.bounding_box
