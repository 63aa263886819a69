"""Jittering mechanism, masking, normalizing constants, and candidate
location priors."""

import math

import numpy as np
import pytest
from scipy import stats

from geomask.displace import (
    EXACT,
    JITTERED,
    MASKED,
    CandidatePrior,
    DisplaceError,
    JitterScheme,
    LocationRecord,
    NormalizingTable,
    build_normalizing_table,
    displacement_prior,
    jitter,
    mask,
    masking_prior,
    normalizer,
    polar_offsets,
    read_location_records,
    read_normalizing_table,
    write_location_records,
    write_normalizing_table,
)
from geomask.frame import RURAL, URBAN, EnumerationArea, Masterframe, set_weights
from geomask.geo import AdminArea, Geography, Point

BIG_AREA = AdminArea(1, "big", [[-100, -100], [100, -100], [100, 100], [-100, 100]])


def simple_frame(xy, stratum=RURAL, area_id=1, pops=None):
    n = len(xy)
    frame = Masterframe(
        area_id=np.full(n, area_id),
        stratum=np.full(n, stratum),
        xy=np.asarray(xy, dtype=float),
        population=np.ones(n) if pops is None else np.asarray(pops, dtype=float),
    )
    return frame


class TestJitter:
    def test_urban_displacement_bounded(self):
        scheme = JitterScheme()
        rng = np.random.default_rng(0)
        s = Point(0.0, 0.0)
        for _ in range(2000):
            p = jitter(s, URBAN, scheme, BIG_AREA, rng)
            assert math.hypot(p.x, p.y) < 2.0

    def test_tiny_radius_converges_to_origin(self):
        scheme = JitterScheme(urban_radius=1e-9)
        p = jitter(Point(3.0, 4.0), URBAN, scheme, BIG_AREA, 5)
        assert math.hypot(p.x - 3.0, p.y - 4.0) < 1e-9

    def test_radius_is_uniform_not_area_uniform(self):
        # marginal p(r) = 1/R: Kolmogorov-Smirnov at level 0.01
        rng = np.random.default_rng(11)
        offs = polar_offsets(rng, 2.0, 100_000)
        radii = np.hypot(offs[:, 0], offs[:, 1])
        res = stats.kstest(radii, stats.uniform(loc=0, scale=2.0).cdf)
        assert res.pvalue > 0.01

    def test_angle_uniform_resultant(self):
        rng = np.random.default_rng(12)
        offs = polar_offsets(rng, 5.0, 100_000)
        ang = np.arctan2(offs[:, 1], offs[:, 0])
        resultant = abs(np.mean(np.exp(1j * ang)))
        assert resultant < 0.01

    def test_rural_mixture_fraction(self):
        scheme = JitterScheme()
        rng = np.random.default_rng(13)
        radii = scheme.sample_radius(RURAL, rng, size=100_000)
        frac10 = np.mean(radii == 10.0)
        assert abs(frac10 - 0.01) < 0.001

    def test_restriction_keeps_point_inside(self):
        area = AdminArea(1, "cell", [[0, 0], [1, 0], [1, 1], [0, 1]])
        scheme = JitterScheme()  # urban R=2 far exceeds the area size
        rng = np.random.default_rng(3)
        s = Point(0.98, 0.5)
        for _ in range(500):
            p = jitter(s, URBAN, scheme, area, rng)
            assert area.contains_many(np.array([[p.x, p.y]]))[0]

    def test_unrestricted_can_leave_area(self):
        area = AdminArea(1, "cell", [[0, 0], [1, 0], [1, 1], [0, 1]])
        scheme = JitterScheme(restrict_to_area=False)
        rng = np.random.default_rng(3)
        pts = [jitter(Point(0.98, 0.5), URBAN, scheme, area, rng) for _ in range(200)]
        outside = [p for p in pts if not area.contains_many(np.array([[p.x, p.y]]))[0]]
        assert outside

    def test_sliver_area_rejection_exhausts(self):
        sliver = AdminArea(1, "sliver", [[0, 0], [1e-7, 0], [1e-7, 1e-7], [0, 1e-7]])
        scheme = JitterScheme(urban_radius=5.0)
        with pytest.raises(DisplaceError, match="rejection"):
            jitter(Point(5e-8, 5e-8), URBAN, scheme, sliver, 1)

    def test_deterministic_given_seed(self):
        scheme = JitterScheme()
        a = jitter(Point(1.0, 1.0), RURAL, scheme, BIG_AREA, 77)
        b = jitter(Point(1.0, 1.0), RURAL, scheme, BIG_AREA, 77)
        assert (a.x, a.y) == (b.x, b.y)


class TestMask:
    def make_geo(self):
        a2 = AdminArea(2, "w", [[0, 0], [1, 0], [1, 1], [0, 1]])
        a5 = AdminArea(5, "e", [[1, 0], [2, 0], [2, 1], [1, 1]])
        return Geography([a5, a2])

    def test_interior(self):
        rec = mask(Point(1.5, 0.5), self.make_geo(), URBAN)
        assert rec.kind == MASKED and rec.area_id == 5 and rec.point is None

    def test_boundary_tiebreak(self):
        rec = mask(Point(1.0, 0.5), self.make_geo(), RURAL)
        assert rec.area_id == 2

    def test_unresolvable_errors(self):
        with pytest.raises(DisplaceError):
            mask(Point(9.0, 9.0), self.make_geo(), RURAL)

    def test_roundtrip_with_frame(self):
        rng = np.random.default_rng(4)
        geo = Geography(
            [
                AdminArea(1, "a", [[0, 0], [10, 0], [10, 10], [0, 10]]),
                AdminArea(2, "b", [[10, 0], [20, 0], [20, 10], [10, 10]]),
            ]
        )
        pts = np.column_stack([rng.uniform(0.1, 19.9, 200), rng.uniform(0.1, 9.9, 200)])
        want = geo.locate_many(pts)
        got = [mask(Point(*p), geo, RURAL).area_id for p in pts]
        assert np.array_equal(np.asarray(got), want)


class TestNormalizer:
    def ea_at(self, x, y, stratum=URBAN):
        return EnumerationArea(0, 1, stratum, Point(x, y), 1.0, 1.0)

    def test_interior_disk_gives_exactly_one(self):
        c = normalizer(self.ea_at(0.0, 0.0), 2.0, BIG_AREA, draws=2000, seed=0)
        assert c == 1.0

    def test_half_plane_edge_gives_two(self):
        # area occupies x <= 0; EA sits exactly on the straight edge
        half = AdminArea(1, "half", [[-100, -100], [0, -100], [0, 100], [-100, 100]])
        c = normalizer(self.ea_at(0.0, 0.0), 5.0, half, draws=1_000_000, seed=1)
        assert c == pytest.approx(2.0, abs=0.01)

    def test_c_at_least_one(self):
        area = AdminArea(1, "sq", [[0, 0], [4, 0], [4, 4], [0, 4]])
        for seed in range(5):
            c = normalizer(self.ea_at(0.5, 0.5), 2.0, area, draws=500, seed=seed)
            assert c >= 1.0

    def test_zero_hits_errors(self):
        sliver = AdminArea(1, "sliver", [[0, 0], [1e-7, 0], [1e-7, 1e-7], [0, 1e-7]])
        with pytest.raises(DisplaceError, match="degenerate"):
            normalizer(self.ea_at(5e-8, 5e-8), 10.0, sliver, draws=1000, seed=2)

    def test_table_covers_all_pairs_at_paper_draw_count(self):
        geo = Geography([AdminArea(1, "a", [[0, 0], [8, 0], [8, 8], [0, 8]])])
        rng = np.random.default_rng(5)
        n = 30
        frame = Masterframe(
            area_id=np.ones(n, dtype=int),
            stratum=np.r_[np.full(15, RURAL), np.full(15, URBAN)],
            xy=rng.uniform(0.5, 7.5, size=(n, 2)),
            population=np.ones(n),
        )
        scheme = JitterScheme()
        table = build_normalizing_table(frame, geo, scheme, draws=1000, seed=0)
        # rural EAs need R=5 and R=10; urban need R=2
        assert len(table) == 15 * 2 + 15
        for row in range(15):
            assert table.get(row, 5.0) >= 1.0
            assert table.get(row, 10.0) >= 1.0
        for row in range(15, 30):
            assert table.get(row, 2.0) >= 1.0

    def test_table_csv_roundtrip(self, tmp_path):
        table = NormalizingTable()
        table.put(3, 2.0, 1.25, 1000)
        table.put(4, 10.0, 3.5, 500)
        path = tmp_path / "norm.csv"
        write_normalizing_table(table, path)
        back = read_normalizing_table(path)
        assert back.get(3, 2.0) == 1.25
        assert back.get(4, 10.0) == 3.5
        with pytest.raises(DisplaceError):
            back.get(4, 2.0)


class TestMaskingPrior:
    def test_uniform_block(self):
        frame = set_weights(simple_frame([[1, 1], [2, 2], [3, 3], [4, 4]]), "uniform")
        prior = masking_prior(1, RURAL, frame)
        assert np.allclose(prior.probabilities, 0.25)

    def test_pps_block(self):
        frame = set_weights(simple_frame([[1, 1], [2, 2]], pops=[1, 3]), "pps")
        prior = masking_prior(1, RURAL, frame)
        assert np.allclose(prior.probabilities, [0.25, 0.75])

    def test_block_size_matches_published_count(self):
        rng = np.random.default_rng(0)
        frame = set_weights(simple_frame(rng.uniform(0, 50, size=(4268, 2))), "uniform")
        prior = masking_prior(1, RURAL, frame)
        assert len(prior) == 4268
        assert abs(prior.probabilities.sum() - 1.0) < 1e-10

    def test_empty_block_errors(self):
        frame = simple_frame([[1, 1]])
        with pytest.raises(Exception):
            masking_prior(2, RURAL, frame)


def const_table(frame, scheme, value=1.0):
    table = NormalizingTable()
    for row in range(len(frame)):
        for radius in scheme.radii():
            table.put(row, radius, value, 1)
    return table


class TestDisplacementPrior:
    def test_single_candidate_in_range(self):
        frame = simple_frame([[1.0, 0.0]], stratum=URBAN)
        scheme = JitterScheme()
        prior = displacement_prior(Point(0, 0), 1, URBAN, frame, scheme, const_table(frame, scheme))
        assert prior.ea_ids.tolist() == [0]
        assert prior.probabilities[0] == 1.0

    def test_indicator_cuts_beyond_radius(self):
        frame = simple_frame([[1.0, 0.0], [2.5, 0.0]], stratum=URBAN)
        scheme = JitterScheme()
        prior = displacement_prior(Point(0, 0), 1, URBAN, frame, scheme, const_table(frame, scheme))
        assert prior.ea_ids.tolist() == [0]
        assert prior.prob_of(0) == 1.0
        assert prior.prob_of(1) == 0.0

    def test_rural_mixture_evaluates_the_stated_formula(self):
        frame = simple_frame([[1.0, 0.0], [7.0, 0.0]], stratum=RURAL)
        scheme = JitterScheme()
        prior = displacement_prior(Point(0, 0), 1, RURAL, frame, scheme, const_table(frame, scheme))
        # independent evaluation of the mixture density ratio
        w1 = 0.99 / (10 * math.pi * 1.0) + 0.01 / (20 * math.pi * 1.0)
        w2 = 0.01 / (20 * math.pi * 7.0)
        assert prior.prob_of(0) == pytest.approx(w1 / (w1 + w2), rel=1e-12)
        assert prior.prob_of(1) == pytest.approx(w2 / (w1 + w2), rel=1e-12)
        assert prior.prob_of(0) == pytest.approx(0.99928263988522238, rel=1e-12)

    def test_normalizing_constants_reweight(self):
        frame = simple_frame([[1.0, 0.0], [1.0, 1.0]], stratum=URBAN)
        scheme = JitterScheme()
        table = NormalizingTable()
        table.put(0, 2.0, 1.0, 1)
        table.put(1, 2.0, 3.0, 1)
        prior = displacement_prior(Point(0, 0), 1, URBAN, frame, scheme, table)
        d0, d1 = 1.0, math.sqrt(2.0)
        w0, w1 = 1.0 / d0, 3.0 / d1
        assert prior.prob_of(0) == pytest.approx(w0 / (w0 + w1), rel=1e-12)
        assert prior.prob_of(1) == pytest.approx(w1 / (w0 + w1), rel=1e-12)

    def test_zero_distance_point_mass(self):
        frame = simple_frame([[0.0, 0.0], [1.0, 0.0]], stratum=URBAN)
        scheme = JitterScheme()
        prior = displacement_prior(Point(0, 0), 1, URBAN, frame, scheme, const_table(frame, scheme))
        assert prior.ea_ids.tolist() == [0]
        assert prior.probabilities[0] == 1.0

    def test_no_candidate_in_range_errors(self):
        frame = simple_frame([[50.0, 0.0]], stratum=URBAN)
        scheme = JitterScheme()
        with pytest.raises(DisplaceError, match="inconsistent"):
            displacement_prior(Point(0, 0), 1, URBAN, frame, scheme, const_table(frame, scheme))

    def test_true_ea_receives_positive_probability(self):
        # full round trip: jitter every EA of a frame, then check its prior
        geo = Geography([AdminArea(1, "a", [[0, 0], [12, 0], [12, 12], [0, 12]])])
        rng = np.random.default_rng(21)
        n = 60
        frame = Masterframe(
            area_id=np.ones(n, dtype=int),
            stratum=np.r_[np.full(30, RURAL), np.full(30, URBAN)],
            xy=rng.uniform(0.5, 11.5, size=(n, 2)),
            population=np.ones(n),
        )
        frame = set_weights(frame, "uniform")
        scheme = JitterScheme()
        table = build_normalizing_table(frame, geo, scheme, draws=400, seed=0)
        area = geo.areas[0]
        for row in range(n):
            ea = frame.ea(row)
            u = jitter(ea.location, ea.stratum, scheme, area, rng)
            prior = displacement_prior(u, 1, ea.stratum, frame, scheme, table)
            assert prior.prob_of(row) > 0.0
            assert abs(prior.probabilities.sum() - 1.0) < 1e-10

    def test_pure_function_of_inputs(self):
        frame = simple_frame([[1.0, 0.5], [0.5, 1.5]], stratum=URBAN)
        scheme = JitterScheme()
        t = const_table(frame, scheme)
        p1 = displacement_prior(Point(0.2, 0.1), 1, URBAN, frame, scheme, t)
        p2 = displacement_prior(Point(0.2, 0.1), 1, URBAN, frame, scheme, t)
        assert np.array_equal(p1.probabilities, p2.probabilities)


class TestCandidatePrior:
    def test_rejects_bad_sums(self):
        with pytest.raises(DisplaceError):
            CandidatePrior(np.array([0, 1]), np.array([0.6, 0.6]))

    def test_rejects_nonpositive(self):
        with pytest.raises(DisplaceError):
            CandidatePrior(np.array([0, 1]), np.array([1.0, 0.0]))


class TestRecords:
    def test_masked_record_carries_no_point(self):
        with pytest.raises(DisplaceError):
            LocationRecord(kind=MASKED, area_id=1, stratum=RURAL, point=Point(0, 0))
        with pytest.raises(DisplaceError):
            LocationRecord(kind=EXACT, area_id=1, stratum=RURAL)

    def test_csv_roundtrip(self, tmp_path):
        records = [
            LocationRecord(kind=EXACT, area_id=1, stratum=URBAN, point=Point(1.25, -0.5)),
            LocationRecord(kind=JITTERED, area_id=2, stratum=RURAL, point=Point(3.5, 4.5)),
            LocationRecord(kind=MASKED, area_id=3, stratum=RURAL),
        ]
        path = tmp_path / "records.csv"
        write_location_records(records, path)
        back = read_location_records(path)
        assert [r.kind for r in back] == [EXACT, JITTERED, MASKED]
        assert back[0].point.x == 1.25
        assert back[2].point is None
        assert [r.area_id for r in back] == [1, 2, 3]
