"""Scenario orchestration, data generation, MSE decomposition, regimes, and
the disclosure audit."""

import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from geomask.displace import EXACT, JITTERED, MASKED, JitterScheme
from geomask.evaluation import (
    ALL_SCENARIOS,
    EvalError,
    RegimeData,
    Scenario,
    SimulationConfig,
    apply_regime,
    block_centroid,
    build_world,
    disclosure_audit,
    make_truth,
    mse,
    run_scenario,
    run_scenarios,
    simulate_outcomes,
)
from geomask.frame import RURAL, URBAN, Masterframe, set_weights
from geomask.geo import Point


def small_cfg(**kw):
    base = dict(
        seed=5, eas_per_block=30, clusters_per_block=3, iterations=16,
        chains=2, posterior_draws=120, grid_steps=3, area_side=10.0,
        mesh_spacing=2.5, grid_policy="freeze", normalizer_draws=200,
        aggregate_factor=5, scenarios=("1a",),
    )
    base.update(kw)
    return SimulationConfig(**base)


@pytest.fixture(scope="module")
def world():
    return build_world(small_cfg())


class TestScenarioIds:
    def test_table_layout(self):
        assert len(ALL_SCENARIOS) == 12
        assert Scenario.from_id("1a").regime == "exact"
        assert Scenario.from_id("2b").regime == "jittered-naive"
        assert Scenario.from_id("3a").regime == "jittered-DA"
        assert Scenario.from_id("4b").regime == "masked-drop"
        assert Scenario.from_id("5a").regime == "masked-centroid"
        assert Scenario.from_id("6b").regime == "masked-DA"
        assert Scenario.from_id("1a").covariate is False
        assert Scenario.from_id("1b").covariate is True

    def test_unknown_rejected(self):
        with pytest.raises(EvalError):
            Scenario.from_id("7a")


class TestSimulateOutcomes:
    def test_symmetric_truth_mean_half(self, world):
        truth = make_truth(world, 5)
        truth.w[:] = 0.0
        truth.beta0 = 0.0
        truth.beta1 = 0.0
        rng = np.random.default_rng(0)
        reps, tot = 200, 0.0
        for r in range(reps):
            obs = simulate_outcomes(truth, world, rng)
            tot += float(np.mean(obs.y / obs.trials))
        K = len(world.clusters)
        se = math.sqrt(0.25 / (reps * K * world.cfg.trials))
        assert abs(tot / reps - 0.5) < 3 * se

    def test_zero_beta1_ignores_covariate(self, world):
        truth = make_truth(world, 5)
        truth.beta1 = 0.0
        o1 = simulate_outcomes(truth, world, 9)
        world2 = build_world(small_cfg())
        world2.cluster_z = world2.cluster_z + 100.0
        truth2 = make_truth(world2, 5)
        truth2.beta1 = 0.0
        o2 = simulate_outcomes(truth2, world2, 9)
        assert np.array_equal(o1.y, o2.y)

    def test_outcome_frequencies_match_binomial_pmf(self, world):
        truth = make_truth(world, 7)
        reps = 4000
        rng = np.random.default_rng(1)
        ys = np.array([simulate_outcomes(truth, world, rng).y[0] for r in range(reps)])
        eta = truth.beta0 + truth.beta1 * world.cluster_z[0] + world.cluster_proj.apply(truth.w)[0]
        p = expit(eta)
        edges = [-0.5 + k for k in range(27)]
        obs_counts, _ = np.histogram(ys, bins=edges)
        want = stats.binom.pmf(np.arange(26), 25, p) * reps
        keep = want > 5
        chi2 = np.sum((obs_counts[keep] - want[keep]) ** 2 / want[keep])
        dof = keep.sum() - 1
        assert chi2 < stats.chi2.ppf(0.99, dof)

    def test_deterministic(self, world):
        truth = make_truth(world, 5)
        a = simulate_outcomes(truth, world, 3)
        b = simulate_outcomes(truth, world, 3)
        assert np.array_equal(a.y, b.y)


class TestApplyRegime:
    def test_exact_passthrough(self, world):
        data = apply_regime(world.clusters, "exact", world.geo, world.frame,
                            world.cfg.scheme, seed=1)
        assert all(r.kind == EXACT for r in data.records)
        assert np.allclose(data.resolved_points, world.clusters.points)

    def test_jitter_moves_points_within_area(self, world):
        data = apply_regime(world.clusters, "jittered-naive", world.geo, world.frame,
                            world.cfg.scheme, seed=1)
        assert all(r.kind == JITTERED for r in data.records)
        for k, rec in enumerate(data.records):
            assert rec.point is not None
            d = math.hypot(rec.point.x - world.clusters.points[k, 0],
                           rec.point.y - world.clusters.points[k, 1])
            limit = 2.0 if world.clusters.stratum[k] == URBAN else 10.0
            assert 0 < d < limit
            assert world.geo.locate_many(np.array([[rec.point.x, rec.point.y]]))[0] == rec.area_id

    def test_jitter_shared_across_regime_family(self, world):
        a = apply_regime(world.clusters, "jittered-naive", world.geo, world.frame,
                         world.cfg.scheme, seed=4)
        b = apply_regime(world.clusters, "jittered-DA", world.geo, world.frame,
                         world.cfg.scheme, seed=4)
        assert np.allclose(a.resolved_points, b.resolved_points)

    def test_masked_share_per_block(self, world):
        data = apply_regime(world.clusters, "masked-drop", world.geo, world.frame,
                            world.cfg.scheme, seed=2, mask_fraction=0.5)
        for (i, j) in world.frame.blocks:
            in_block = np.flatnonzero(
                (world.clusters.area_id == i) & (world.clusters.stratum == j)
            )
            if len(in_block) == 0:
                continue
            n_masked = int(data.masked[in_block].sum())
            assert n_masked == int(len(in_block) * 0.5)

    def test_half_of_398_retained(self):
        # the published design: 398 clusters, 50% masked leaves 199
        rng = np.random.default_rng(0)
        frame = set_weights(
            Masterframe(
                area_id=np.ones(500, int),
                stratum=np.r_[np.full(250, RURAL), np.full(250, URBAN)],
                xy=rng.uniform(1, 9, size=(500, 2)),
                population=np.ones(500),
            ),
            "uniform",
        )
        from geomask.frame import SampleDesign, draw_clusters
        from geomask.geo import AdminArea, Geography

        geo = Geography([AdminArea(1, "a", [[0, 0], [10, 0], [10, 10], [0, 10]])])
        design = SampleDesign(clusters_per_block={(1, RURAL): 200, (1, URBAN): 198})
        clusters = draw_clusters(frame, design, seed=1)
        assert len(clusters) == 398
        data = apply_regime(clusters, "masked-drop", geo, frame, JitterScheme(), seed=3)
        assert int((~data.masked).sum()) == 199

    def test_masked_subset_shared_and_centroid_resolution(self, world):
        drop = apply_regime(world.clusters, "masked-drop", world.geo, world.frame,
                            world.cfg.scheme, seed=5)
        cent = apply_regime(world.clusters, "masked-centroid", world.geo, world.frame,
                            world.cfg.scheme, seed=5)
        da = apply_regime(world.clusters, "masked-DA", world.geo, world.frame,
                          world.cfg.scheme, seed=5)
        assert np.array_equal(drop.masked, cent.masked)
        assert np.array_equal(drop.masked, da.masked)
        for k in np.flatnonzero(cent.masked):
            i, j = int(world.clusters.area_id[k]), int(world.clusters.stratum[k])
            idx = world.frame.block(i, j)
            want = world.frame.xy[idx].mean(axis=0)
            assert np.allclose(cent.resolved_points[k], want)
            c = block_centroid(world.frame, i, j)
            assert np.allclose([c.x, c.y], want)

    def test_outcomes_never_touched(self, world):
        truth = make_truth(world, 5)
        obs = simulate_outcomes(truth, world, 11)
        y_before = obs.y.copy()
        for regime in ("exact", "jittered-naive", "masked-centroid"):
            apply_regime(world.clusters, regime, world.geo, world.frame,
                         world.cfg.scheme, seed=1)
        assert np.array_equal(obs.y, y_before)


class TestMse:
    def test_point_mass_at_truth_is_zero(self):
        truth = np.linspace(0, 1, 50)
        draws = np.tile(truth, (20, 1))
        out = mse(draws, truth)
        assert out["mse"] == pytest.approx(0.0, abs=1e-20)
        assert out["bias2"] == pytest.approx(0.0, abs=1e-20)
        assert out["variance"] == pytest.approx(0.0, abs=1e-20)

    def test_constant_offset_is_pure_bias(self):
        truth = np.linspace(0, 1, 50)
        draws = np.tile(truth + 0.3, (20, 1))
        out = mse(draws, truth)
        assert out["variance"] == pytest.approx(0.0, abs=1e-20)
        assert out["bias2"] == pytest.approx(100 * 0.09, rel=1e-10)
        assert out["mse"] == pytest.approx(100 * 0.09, rel=1e-10)

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(3)
        truth = rng.normal(size=40)
        draws = truth + rng.normal(scale=0.5, size=(200, 40)) + 0.1
        out = mse(draws, truth)
        G = 40
        bias2 = sum((draws[:, g].mean() - truth[g]) ** 2 for g in range(G)) / G
        var = sum(draws[:, g].var(ddof=1) for g in range(G)) / G
        assert out["bias2"] == pytest.approx(100 * bias2, abs=1e-10)
        assert out["variance"] == pytest.approx(100 * var, abs=1e-10)
        assert out["mse"] == pytest.approx(out["bias2"] + out["variance"], abs=1e-10)

    def test_identity_holds(self):
        rng = np.random.default_rng(4)
        draws = rng.normal(size=(64, 30))
        truth = rng.normal(size=30)
        out = mse(draws, truth)
        assert out["mse"] == pytest.approx(out["bias2"] + out["variance"], abs=1e-10)

    def test_grid_mismatch_errors(self):
        with pytest.raises(EvalError):
            mse(np.zeros((5, 10)), np.zeros(11))


class TestDisclosure:
    def make_regime(self, records):
        K = len(records)
        return RegimeData(
            regime="jittered-DA", records=records,
            masked=np.zeros(K, dtype=bool), resolved_points=np.zeros((K, 2)),
        )

    def isolated_frame(self):
        # EA 0 isolated; EAs 1..4 clustered together far away
        xy = np.array([[1.0, 1.0], [30.0, 30.0], [30.5, 30.0], [30.0, 30.5], [30.5, 30.5]])
        return set_weights(
            Masterframe(
                area_id=np.ones(5, int), stratum=np.full(5, URBAN), xy=xy,
                population=np.ones(5),
            ),
            "uniform",
        )

    def test_isolated_ea_flagged_unique(self):
        frame = self.isolated_frame()
        from geomask.displace import LocationRecord

        rec = LocationRecord(kind=JITTERED, area_id=1, stratum=URBAN, point=Point(1.5, 1.0))
        rows = disclosure_audit(self.make_regime([rec]), None, frame, JitterScheme())
        assert len(rows) == 1
        r = rows[0]
        assert r.candidates == 1
        assert r.unique and r.p95 and r.ratio5 and r.ratio2
        assert r.ratio == math.inf

    def test_five_candidates_counted(self):
        frame = self.isolated_frame()
        from geomask.displace import LocationRecord

        rec = LocationRecord(kind=JITTERED, area_id=1, stratum=URBAN, point=Point(30.2, 30.2))
        rows = disclosure_audit(self.make_regime([rec]), None, frame, JitterScheme())
        assert rows[0].candidates == 4  # the far EA is out of urban range
        rec = LocationRecord(kind=MASKED, area_id=1, stratum=URBAN)
        rows = disclosure_audit(self.make_regime([rec]), None, frame, JitterScheme())
        assert rows[0].candidates == 5  # masked counts the whole block

    def test_posterior_concentration_flags(self):
        frame = self.isolated_frame()
        from geomask.displace import LocationRecord

        rec = LocationRecord(kind=MASKED, area_id=1, stratum=URBAN)
        post = {0: (np.arange(5), np.array([0.8, 0.1, 0.05, 0.04, 0.01]))}
        rows = disclosure_audit(self.make_regime([rec]), None, frame, JitterScheme(), post)
        r = rows[0]
        assert r.top_prob == pytest.approx(0.8)
        assert r.ratio == pytest.approx(8.0)
        assert not r.unique and not r.p95 and r.ratio5 and r.ratio2

    def test_flags_monotone(self):
        frame = self.isolated_frame()
        from geomask.displace import LocationRecord

        rec = LocationRecord(kind=MASKED, area_id=1, stratum=URBAN)
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.full(5, 0.3))
            rows = disclosure_audit(
                self.make_regime([rec]), None, frame, JitterScheme(),
                {0: (np.arange(5), p)},
            )
            r = rows[0]
            assert (not r.unique) or r.p95
            assert (not r.p95) or r.ratio5
            assert (not r.ratio5) or r.ratio2

    def test_exact_records_excluded(self, world):
        data = apply_regime(world.clusters, "exact", world.geo, world.frame,
                            world.cfg.scheme, seed=1)
        rows = disclosure_audit(data, world.clusters, world.frame, world.cfg.scheme)
        assert rows == []


class TestRunScenarios:
    def test_shared_truth_across_scenarios(self):
        cfg = small_cfg(scenarios=("1a", "4a"), posterior_draws=60, iterations=10)
        world = build_world(cfg)
        results = run_scenarios(world, replicate_seed=3)
        assert set(results) == {"1a", "4a"}
        # identical truth surfaces across scenarios comes from shared make_truth:
        t1 = make_truth(world, 3)
        t2 = make_truth(world, 3)
        assert np.array_equal(t1.surfaces["prob"], t2.surfaces["prob"])

    def test_scenario_result_shapes(self, world):
        truth = make_truth(world, 5)
        obs = simulate_outcomes(truth, world, 13)
        res = run_scenario(world, truth, obs, Scenario.from_id("1b"), 5)
        assert set(res.param_summary) == {"beta0", "beta1", "phi1", "phi2"}
        for med, lo, hi in res.param_summary.values():
            assert lo <= med <= hi
        surfaces = {(r.surface, r.resolution) for r in res.mse_rows}
        assert surfaces == {
            ("field", "1km"), ("logit", "1km"), ("prob", "1km"),
            ("field", "5km"), ("logit", "5km"), ("prob", "5km"),
        }
        for r in res.mse_rows:
            assert r.mse == pytest.approx(r.bias2 + r.variance, abs=1e-10)
        out = res.surfaces(world)
        assert np.all(out["prob_q2.5"] <= out["prob_q97.5"] + 1e-12)

    def test_masked_drop_audits_masked_clusters_from_prior(self, world):
        truth = make_truth(world, 5)
        obs = simulate_outcomes(truth, world, 13)
        res4 = run_scenario(world, truth, obs, Scenario.from_id("4a"), 5)
        data = apply_regime(world.clusters, "masked-drop", world.geo, world.frame,
                            world.cfg.scheme, seed=5, mask_fraction=0.5)
        audited = {r.cluster_id for r in res4.disclosure}
        assert audited == set(np.flatnonzero(data.masked).tolist())
        for r in res4.disclosure:
            i = int(world.clusters.area_id[r.cluster_id])
            j = int(world.clusters.stratum[r.cluster_id])
            assert r.candidates == world.frame.block_size(i, j)

    def test_masked_da_reports_location_posteriors(self, world):
        truth = make_truth(world, 5)
        obs = simulate_outcomes(truth, world, 13)
        res = run_scenario(world, truth, obs, Scenario.from_id("6a"), 5)
        data = apply_regime(world.clusters, "masked-DA", world.geo, world.frame,
                            world.cfg.scheme, seed=5, mask_fraction=0.5)
        masked_idx = set(np.flatnonzero(data.masked).tolist())
        assert set(res.location_posteriors) == masked_idx
        for ids, probs in res.location_posteriors.values():
            assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        audited = {r.cluster_id for r in res.disclosure}
        assert audited == masked_idx
