"""Simulation-study orchestration at desk scale: synthetic geography and
rasters, truth generation under the binomial spatial model, the scenario
matrix (exact / jittered / masked location regimes, with and without a
covariate), MSE decomposition of predicted surfaces, and disclosure-risk
audits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from . import chain as chain_mod
from .displace import (
    EXACT,
    JITTERED,
    MASKED,
    CandidatePrior,
    JitterScheme,
    LocationRecord,
    NormalizingTable,
    build_normalizing_table,
    displacement_prior,
    jitter,
    masking_prior,
)
from .field import FemMatrices, MaternParams, Mesh, Precision, Projector, build_mesh, fem_matrices, project, sample_field
from .frame import (
    RURAL,
    URBAN,
    ClusterSample,
    Masterframe,
    Raster,
    SampleDesign,
    cell_areas,
    draw_clusters,
    generate_frame,
    set_weights,
    stratify,
)
from .geo import AdminArea, Geography, Point
from .lgm import (
    GridSpec,
    ObservationSet,
    PriorSpec,
    aggregate_blocks,
    build_grid,
    draw_joint_samples,
    predict_surface,
    surface_draws,
)

REGIMES = (
    "exact",
    "jittered-naive",
    "jittered-DA",
    "masked-drop",
    "masked-centroid",
    "masked-DA",
)

_REGIME_BY_NUMBER = dict(enumerate(REGIMES, start=1))


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    """One row of the scenario matrix; ids follow the 1a..6b convention
    (number = location regime, letter = covariate off/on)."""

    id: str
    regime: str
    covariate: bool

    @classmethod
    def from_id(cls, sid: str) -> "Scenario":
        sid = sid.strip()
        if len(sid) != 2 or sid[0] not in "123456" or sid[1] not in "ab":
            raise EvalError(f"unknown scenario id {sid!r} (expected 1a..6b)")
        return cls(id=sid, regime=_REGIME_BY_NUMBER[int(sid[0])], covariate=sid[1] == "b")


ALL_SCENARIOS = tuple(f"{n}{s}" for n in range(1, 7) for s in "ab")


# ---------------------------------------------------------------------------
# synthetic desk-scale inputs
# ---------------------------------------------------------------------------


def make_demo_geography(n_per_side: int = 2, area_side: float = 12.0) -> Geography:
    """A grid of square admin areas, ids 1..n^2, sharing edges."""
    areas = []
    aid = 1
    for j in range(n_per_side):
        for i in range(n_per_side):
            x0, y0 = i * area_side, j * area_side
            verts = [
                [x0, y0],
                [x0 + area_side, y0],
                [x0 + area_side, y0 + area_side],
                [x0, y0 + area_side],
            ]
            areas.append(AdminArea(aid, f"area{aid}", verts))
            aid += 1
    return Geography(areas)


def _bump_field(xs: np.ndarray, ys: np.ndarray, centers, widths, amps) -> np.ndarray:
    gx, gy = np.meshgrid(xs, ys)
    out = np.zeros_like(gx)
    for (cx, cy), wdt, amp in zip(centers, widths, amps):
        out += amp * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * wdt**2))
    return out


def _cell_axes(geo: Geography, cellsize: float) -> tuple[np.ndarray, np.ndarray, float, float]:
    xmin, ymin, xmax, ymax = geo.bounding_box
    ncols = int(round((xmax - xmin) / cellsize))
    nrows = int(round((ymax - ymin) / cellsize))
    xs = xmin + (np.arange(ncols) + 0.5) * cellsize
    ys = ymin + (nrows - 1 - np.arange(nrows) + 0.5) * cellsize  # top row first
    return xs, ys, xmin, ymin


def make_density_raster(geo: Geography, cellsize: float = 1.0, seed: int = 1, n_bumps: int = 6) -> Raster:
    """Synthetic population density: a positive baseline plus lumpy bumps,
    so per-area thresholds carve out urban pockets."""
    xs, ys, xmin, ymin = _cell_axes(geo, cellsize)
    rng = np.random.default_rng((seed, 211))
    xmax, ymax = xs[-1] + cellsize / 2, ys[0] + cellsize / 2
    centers = np.column_stack(
        [rng.uniform(xmin, xmax, n_bumps), rng.uniform(ymin, ymax, n_bumps)]
    )
    widths = rng.uniform(0.05, 0.15, n_bumps) * max(xmax - xmin, ymax - ymin)
    amps = rng.lognormal(math.log(40.0), 0.6, n_bumps)
    values = 1.0 + _bump_field(xs, ys, centers, widths, amps)
    return Raster(xmin, ymin, cellsize, values)


def make_covariate_raster(density: Raster, seed: int = 1) -> Raster:
    """Synthetic spatial covariate resembling sqrt nighttime lights: tracks
    population with an added smooth independent component."""
    rng = np.random.default_rng((seed, 223))
    xs = density.xll + (np.arange(density.ncols) + 0.5) * density.cellsize
    ys = density.yll + (density.nrows - 1 - np.arange(density.nrows) + 0.5) * density.cellsize
    xmax = density.xll + density.ncols * density.cellsize
    ymax = density.yll + density.nrows * density.cellsize
    centers = np.column_stack(
        [rng.uniform(density.xll, xmax, 2), rng.uniform(density.yll, ymax, 2)]
    )
    widths = rng.uniform(0.2, 0.4, 2) * max(xmax - density.xll, ymax - density.yll)
    amps = rng.uniform(0.5, 1.5, 2)
    smooth = _bump_field(xs, ys, centers, widths, amps)
    values = np.sqrt(density.values / density.values.mean()) + smooth
    values = (values - values.mean()) / values.std()
    return Raster(density.xll, density.yll, density.cellsize, values)


# ---------------------------------------------------------------------------
# configuration and precomputed world
# ---------------------------------------------------------------------------


@dataclass
class SimulationConfig:
    """Desk-scale analogue of the paper's simulation setup."""

    seed: int = 0
    areas_per_side: int = 2
    area_side: float = 12.0
    cellsize: float = 1.0
    target_urban_fraction: float = 0.35
    eas_per_block: int = 125
    clusters_per_block: int = 4
    trials: int = 25
    weight_mode: str = "uniform"
    selection: str = "uniform"
    scheme: JitterScheme = field(default_factory=JitterScheme)
    mask_fraction: float = 0.5
    # truth (beta values follow the published simulation's truth row)
    beta0: float = -1.5
    beta1: float = 0.15
    truth_log_sd: float = math.log(0.7)
    truth_range_fraction: float = 0.3  # practical range / domain size
    # field and priors
    mesh_spacing: float = 2.0
    mesh_extension: float | None = None  # default: 2 prior-mean ranges
    prior_phi_sd: tuple[float, float] = (1.5, 1.5)
    prior_range_fraction: float = 0.2
    # inference
    grid_steps: int = 5
    grid_span: float = 2.5
    posterior_draws: int = 1000
    chains: int = 4
    iterations: int = 200
    burn_in: int | None = None
    thin: int = 1
    grid_policy: str = "every"
    normalizer_draws: int = 1000
    aggregate_factor: int = 5
    scenarios: tuple[str, ...] = ALL_SCENARIOS

    def truth_phi(self, geo: Geography) -> np.ndarray:
        rng_km = self.truth_range_fraction * geo.domain_size
        return np.array([self.truth_log_sd, math.log(math.sqrt(8.0) / rng_km)])


@dataclass
class World:
    """Immutable scaffolding shared by every scenario and replicate."""

    cfg: SimulationConfig
    geo: Geography
    density: Raster
    covariate: Raster
    strata: np.ndarray
    frame: Masterframe
    clusters: ClusterSample
    design: SampleDesign
    mesh: Mesh
    fem: FemMatrices
    prior: PriorSpec
    eval_points: np.ndarray
    eval_shape: tuple[int, int]
    eval_proj: Projector
    eval_z: np.ndarray
    cluster_proj: Projector
    cluster_z: np.ndarray
    norm_table: NormalizingTable | None = None

    def ensure_norm_table(self) -> NormalizingTable:
        if self.norm_table is None:
            self.norm_table = build_normalizing_table(
                self.frame, self.geo, self.cfg.scheme, self.cfg.normalizer_draws,
                seed=self.cfg.seed,
            )
        return self.norm_table


def assemble_world(
    cfg: SimulationConfig,
    geo: Geography,
    density: Raster,
    covariate: Raster,
    frame: Masterframe,
    clusters: ClusterSample,
) -> World:
    """Build the field/inference machinery around existing frame artifacts."""
    strata = stratify(density, geo, cfg.target_urban_fraction)
    design = SampleDesign(
        clusters_per_block={k: 0 for k in frame.blocks}, trials=cfg.trials,
        selection=cfg.selection,
    )
    prior = PriorSpec.vague_for_domain(geo.domain_size, cfg.prior_phi_sd)
    prior_range = cfg.prior_range_fraction * geo.domain_size
    extension = cfg.mesh_extension if cfg.mesh_extension is not None else 2.0 * prior_range
    mesh = build_mesh(geo, cfg.mesh_spacing, extension)
    fem = fem_matrices(mesh)

    eval_points = covariate.cell_centers()
    eval_shape = (covariate.nrows, covariate.ncols)
    eval_proj = project(mesh, eval_points)
    eval_z = covariate.values.ravel().copy()
    cluster_proj = project(mesh, clusters.points)
    cluster_z = covariate.value_at_many(clusters.points)

    return World(
        cfg=cfg, geo=geo, density=density, covariate=covariate, strata=strata,
        frame=frame, clusters=clusters, design=design, mesh=mesh, fem=fem,
        prior=prior, eval_points=eval_points, eval_shape=eval_shape,
        eval_proj=eval_proj, eval_z=eval_z, cluster_proj=cluster_proj,
        cluster_z=cluster_z,
    )


def build_world(cfg: SimulationConfig, geo: Geography | None = None,
                density: Raster | None = None, covariate: Raster | None = None) -> World:
    geo = geo or make_demo_geography(cfg.areas_per_side, cfg.area_side)
    density = density or make_density_raster(geo, cfg.cellsize, cfg.seed)
    covariate = covariate or make_covariate_raster(density, cfg.seed)
    strata = stratify(density, geo, cfg.target_urban_fraction)

    counts = {}
    areas_grid = cell_areas(density, geo)
    for a in geo.areas:
        for stratum in (RURAL, URBAN):
            has_cells = np.any((areas_grid == a.id) & (strata == stratum) & (density.values > 0))
            if has_cells:
                counts[(a.id, stratum)] = cfg.eas_per_block
    frame = generate_frame(density, strata, geo, counts, seed=cfg.seed)
    frame = set_weights(frame, cfg.weight_mode)

    design = SampleDesign(
        clusters_per_block={k: min(cfg.clusters_per_block, frame.block_size(*k)) for k in counts},
        trials=cfg.trials,
        selection=cfg.selection,
    )
    clusters = draw_clusters(frame, design, seed=cfg.seed + 1)
    world = assemble_world(cfg, geo, density, covariate, frame, clusters)
    world.design = design
    return world


# ---------------------------------------------------------------------------
# truth and data generation
# ---------------------------------------------------------------------------


@dataclass
class TruthSet:
    beta0: float
    beta1: float
    phi: np.ndarray
    w: np.ndarray
    clusters: ClusterSample
    surfaces: dict[str, np.ndarray]  # field / logit / prob on the eval grid

    def params(self, covariate: bool) -> dict[str, float]:
        out = {"beta0": self.beta0, "phi1": float(self.phi[0]), "phi2": float(self.phi[1])}
        if covariate:
            out["beta1"] = self.beta1
        return out


def make_truth(world: World, replicate_seed: int) -> TruthSet:
    cfg = world.cfg
    phi = cfg.truth_phi(world.geo)
    prec = Precision(world.fem, MaternParams.from_phi(phi))
    w = sample_field(prec, np.random.default_rng((replicate_seed, 31)))
    field_eval = world.eval_proj.apply(w)
    logit_eval = cfg.beta0 + cfg.beta1 * world.eval_z + field_eval
    surfaces = {"field": field_eval, "logit": logit_eval, "prob": expit(logit_eval)}
    return TruthSet(
        beta0=cfg.beta0, beta1=cfg.beta1, phi=phi, w=w,
        clusters=world.clusters, surfaces=surfaces,
    )


def simulate_outcomes(truth: TruthSet, world: World, seed) -> ObservationSet:
    """y ~ Binomial(n, expit(beta0 + beta1 z + field)) at the true cluster
    locations; deterministic given the seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eta = truth.beta0 + truth.beta1 * world.cluster_z + world.cluster_proj.apply(truth.w)
    n = np.full(len(eta), world.cfg.trials)
    y = rng.binomial(world.cfg.trials, expit(eta))
    return ObservationSet(
        y=y.astype(float), trials=n, points=world.clusters.points,
        covariate=world.cluster_z, stratum=world.clusters.stratum,
    )


# ---------------------------------------------------------------------------
# location regimes
# ---------------------------------------------------------------------------


@dataclass
class RegimeData:
    """Location records per cluster plus regime-specific extras."""

    regime: str
    records: list[LocationRecord]
    masked: np.ndarray  # bool per cluster (False everywhere unless masking)
    resolved_points: np.ndarray  # (K,2); centroids fill masked rows for masked-centroid


def _mask_subset(clusters: ClusterSample, fraction: float, seed: int) -> np.ndarray:
    """Fixed per-(area, stratum) random subset of clusters to mask."""
    masked = np.zeros(len(clusters), dtype=bool)
    keys = sorted(set(zip(clusters.area_id.tolist(), clusters.stratum.tolist())))
    for (i, j) in keys:
        idx = np.flatnonzero((clusters.area_id == i) & (clusters.stratum == j))
        n_mask = int(len(idx) * fraction + 1e-9)
        if n_mask == 0:
            continue
        rng = np.random.default_rng((seed, 13, int(i), int(j)))
        masked[rng.choice(idx, size=n_mask, replace=False)] = True
    return masked


def block_centroid(frame: Masterframe, area_id: int, stratum: int) -> Point:
    idx = frame.block(area_id, stratum)
    xy = frame.xy[idx].mean(axis=0)
    return Point(float(xy[0]), float(xy[1]))


def apply_regime(
    clusters: ClusterSample,
    regime: str,
    geo: Geography,
    frame: Masterframe,
    scheme: JitterScheme,
    seed: int,
    mask_fraction: float = 0.5,
) -> RegimeData:
    """Produce the analyst-visible location records. Outcomes are never
    touched. Jitters and the masked subset depend only on (seed, cluster),
    so scenarios sharing a regime family see identical anonymization."""
    if regime not in REGIMES:
        raise EvalError(f"unknown regime {regime!r}")
    K = len(clusters)
    records: list[LocationRecord] = []
    masked = np.zeros(K, dtype=bool)
    resolved = clusters.points.copy()

    if regime == "exact":
        for k in range(K):
            records.append(
                LocationRecord(
                    kind=EXACT, area_id=int(clusters.area_id[k]),
                    stratum=int(clusters.stratum[k]),
                    point=Point(*clusters.points[k]),
                )
            )
    elif regime.startswith("jittered"):
        for k in range(K):
            area = geo.area_by_id(int(clusters.area_id[k]))
            rng = np.random.default_rng((seed, 11, k))
            pt = jitter(Point(*clusters.points[k]), int(clusters.stratum[k]), scheme, area, rng)
            records.append(
                LocationRecord(
                    kind=JITTERED, area_id=int(clusters.area_id[k]),
                    stratum=int(clusters.stratum[k]), point=pt,
                )
            )
            resolved[k] = [pt.x, pt.y]
    else:  # masked-*
        masked = _mask_subset(clusters, mask_fraction, seed)
        for k in range(K):
            if masked[k]:
                records.append(
                    LocationRecord(
                        kind=MASKED, area_id=int(clusters.area_id[k]),
                        stratum=int(clusters.stratum[k]),
                    )
                )
                if regime == "masked-centroid":
                    c = block_centroid(frame, int(clusters.area_id[k]), int(clusters.stratum[k]))
                    resolved[k] = [c.x, c.y]
            else:
                records.append(
                    LocationRecord(
                        kind=EXACT, area_id=int(clusters.area_id[k]),
                        stratum=int(clusters.stratum[k]),
                        point=Point(*clusters.points[k]),
                    )
                )
    return RegimeData(regime=regime, records=records, masked=masked, resolved_points=resolved)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MseRow:
    surface: str  # field | logit | prob
    resolution: str  # 1km | 5km
    mse: float
    bias2: float
    variance: float


def mse(draws: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    """Average squared bias plus average posterior variance over grid cells,
    scaled by 100 to match the reporting convention."""
    draws = np.asarray(draws, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if draws.ndim != 2 or draws.shape[1] != truth.shape[0]:
        raise EvalError(f"draws {draws.shape} do not match truth grid {truth.shape}")
    mean = draws.mean(axis=0)
    var = draws.var(axis=0, ddof=1) if len(draws) > 1 else np.zeros_like(mean)
    bias2 = float(np.mean((mean - truth) ** 2))
    variance = float(np.mean(var))
    return {
        "mse": 100.0 * (bias2 + variance),
        "bias2": 100.0 * bias2,
        "variance": 100.0 * variance,
    }


def mse_report(
    beta_draws: np.ndarray,
    w_draws: np.ndarray,
    world: World,
    truth: TruthSet,
    covariate: bool,
) -> list[MseRow]:
    """MSE of the latent-field and logit-probability surfaces at the native
    grid and aggregated (probability scale) to coarser blocks."""
    z = world.eval_z if covariate else None
    draws = surface_draws(beta_draws, w_draws, world.eval_proj, z)
    rows = []
    for name in ("field", "logit", "prob"):
        rows.append(MseRow(name, "1km", **mse(draws[name], truth.surfaces[name])))
    f = world.cfg.aggregate_factor
    field5 = aggregate_blocks(draws["field"], world.eval_shape, f)
    tfield5 = aggregate_blocks(truth.surfaces["field"][None, :], world.eval_shape, f)[0]
    prob5 = aggregate_blocks(draws["prob"], world.eval_shape, f)
    tprob5 = aggregate_blocks(truth.surfaces["prob"][None, :], world.eval_shape, f)[0]
    eps = 1e-12
    logit5 = logit(np.clip(prob5, eps, 1 - eps))
    tlogit5 = logit(np.clip(tprob5, eps, 1 - eps))
    rows.append(MseRow("field", "5km", **mse(field5, tfield5)))
    rows.append(MseRow("logit", "5km", **mse(logit5, tlogit5)))
    rows.append(MseRow("prob", "5km", **mse(prob5, tprob5)))
    return rows


# ---------------------------------------------------------------------------
# disclosure audit
# ---------------------------------------------------------------------------


@dataclass
class DisclosureRow:
    cluster_id: int
    kind: str
    candidates: int
    top_prob: float
    ratio: float
    unique: bool
    p95: bool
    ratio5: bool
    ratio2: bool


def _concentration(probs: np.ndarray) -> tuple[float, float]:
    p = np.sort(np.asarray(probs, dtype=float))[::-1]
    top = float(p[0])
    if len(p) == 1 or p[1] == 0.0:
        return top, math.inf
    return top, float(p[0] / p[1])


def disclosure_audit(
    regime_data: RegimeData,
    clusters: ClusterSample,
    frame: Masterframe,
    scheme: JitterScheme,
    posteriors: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
) -> list[DisclosureRow]:
    """Candidate counts and posterior-concentration flags per anonymized
    cluster. Clusters without a sampled location posterior are assessed on
    their candidate prior."""
    posteriors = posteriors or {}
    rows = []
    for k, rec in enumerate(regime_data.records):
        if rec.kind == EXACT:
            continue
        idx = frame.block(rec.area_id, rec.stratum)
        if rec.kind == JITTERED:
            radius = scheme.max_radius(rec.stratum)
            dist = np.hypot(frame.xy[idx, 0] - rec.point.x, frame.xy[idx, 1] - rec.point.y)
            count = int(np.sum(dist < radius))
        else:
            count = len(idx)
        if k in posteriors:
            _, probs = posteriors[k]
        else:
            w = frame.weight[idx]
            if rec.kind == JITTERED:
                w = w[dist < radius] if np.any(dist < radius) else w
            probs = w / w.sum()
        top, ratio = _concentration(probs)
        unique = count == 1
        if unique:
            top, ratio = 1.0, math.inf
        rows.append(
            DisclosureRow(
                cluster_id=k, kind=rec.kind, candidates=max(count, 1),
                top_prob=top, ratio=ratio, unique=unique,
                p95=top > 0.95, ratio5=ratio > 5.0, ratio2=ratio > 2.0,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# scenario execution
# ---------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    scenario: Scenario
    param_summary: dict[str, tuple[float, float, float]]  # median, q2.5, q97.5
    mse_rows: list[MseRow]
    rhats: dict[str, float]
    worst_rhat: float
    disclosure: list[DisclosureRow]
    beta_draws: np.ndarray
    w_draws: np.ndarray
    phi_draws: np.ndarray
    location_posteriors: dict[int, tuple[np.ndarray, np.ndarray]]

    def surfaces(self, world: World) -> dict[str, np.ndarray]:
        z = world.eval_z if self.scenario.covariate else None
        return predict_surface(self.beta_draws, self.w_draws, world.eval_proj, z)


def _summaries(beta_draws, phi_draws, covariate: bool) -> dict[str, tuple[float, float, float]]:
    def q(v):
        return (
            float(np.quantile(v, 0.5)),
            float(np.quantile(v, 0.025)),
            float(np.quantile(v, 0.975)),
        )

    out = {"beta0": q(beta_draws[:, 0])}
    if covariate:
        out["beta1"] = q(beta_draws[:, 1])
    out["phi1"] = q(phi_draws[:, 0])
    out["phi2"] = q(phi_draws[:, 1])
    return out


def _grid_scenario_draws(world: World, obs: ObservationSet, proj, seed) -> tuple:
    """Independent joint draws from a single fitted grid, organised as
    config.chains pseudo-chains for uniform diagnostics."""
    cfg = world.cfg
    grid = build_grid(
        obs, world.prior, world.fem, proj,
        GridSpec(cfg.grid_steps, cfg.grid_span),
    )
    per = max(10, cfg.posterior_draws // cfg.chains)
    stores = []
    for c in range(cfg.chains):
        rng = np.random.default_rng((seed, 97, c))
        b, w, ph = draw_joint_samples(grid, per, rng)
        stores.append(
            chain_mod.SampleStore(
                betas=b, ws=w, phis=ph,
                assignments=np.empty((per, 0), dtype=int),
                unresolved=np.empty(0, dtype=int), chain_index=c,
            )
        )
    return stores


def _subset_obs(obs: ObservationSet, keep: np.ndarray) -> ObservationSet:
    return ObservationSet(
        y=obs.y[keep], trials=obs.trials[keep], points=obs.points[keep],
        covariate=None if obs.covariate is None else obs.covariate[keep],
        stratum=None if obs.stratum is None else obs.stratum[keep],
        likelihood=obs.likelihood, gauss_sd=obs.gauss_sd,
    )


def run_scenario(
    world: World,
    truth: TruthSet,
    obs: ObservationSet,
    scenario: Scenario,
    seed: int,
) -> ScenarioResult:
    """Fit one scenario on shared simulated data and summarize it."""
    cfg = world.cfg
    regime_data = apply_regime(
        world.clusters, scenario.regime, world.geo, world.frame, cfg.scheme,
        seed=seed, mask_fraction=cfg.mask_fraction,
    )
    covariate = scenario.covariate
    loc_post: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    da = scenario.regime in ("jittered-DA", "masked-DA")
    if not da:
        keep = np.ones(len(obs.y), dtype=bool)
        points = regime_data.resolved_points
        if scenario.regime == "masked-drop":
            keep = ~regime_data.masked
        pts = points[keep]
        z = world.covariate.value_at_many(pts) if covariate else None
        fit_obs = ObservationSet(
            y=obs.y[keep], trials=obs.trials[keep], points=pts, covariate=z,
        )
        proj = project(world.mesh, pts)
        stores = _grid_scenario_draws(world, fit_obs, proj, seed)
    else:
        priors: list[CandidatePrior | None] = []
        for k, rec in enumerate(regime_data.records):
            if rec.kind == EXACT:
                priors.append(None)
            elif rec.kind == MASKED:
                priors.append(masking_prior(rec.area_id, rec.stratum, world.frame))
            else:
                priors.append(
                    displacement_prior(
                        rec.point, rec.area_id, rec.stratum, world.frame,
                        cfg.scheme, world.ensure_norm_table(),
                    )
                )
        problem = chain_mod.DaProblem(
            y=obs.y, trials=obs.trials, records=regime_data.records,
            candidate_priors=priors, frame=world.frame, mesh=world.mesh,
            fem=world.fem, prior=world.prior,
            covariate=world.covariate if covariate else None,
        )
        chain_cfg = chain_mod.ChainConfig(
            iterations=cfg.iterations, burn_in=cfg.burn_in, chains=cfg.chains,
            seed=seed, grid_policy=cfg.grid_policy, thin=cfg.thin,
            grid_spec=GridSpec(cfg.grid_steps, cfg.grid_span),
        )
        stores = chain_mod.run(problem, chain_cfg)
        for k in stores[0].unresolved.tolist():
            loc_post[int(k)] = chain_mod.location_posterior(stores, int(k))

    beta_draws = np.vstack([s.betas for s in stores])
    w_draws = np.vstack([s.ws for s in stores])
    phi_draws = np.vstack([s.phis for s in stores])
    rhats = chain_mod.diagnostics(stores)
    disclosure = disclosure_audit(
        regime_data, world.clusters, world.frame, cfg.scheme, loc_post or None
    )
    return ScenarioResult(
        scenario=scenario,
        param_summary=_summaries(beta_draws, phi_draws, covariate),
        mse_rows=mse_report(beta_draws, w_draws, world, truth, covariate),
        rhats=rhats,
        worst_rhat=chain_mod.worst_gate_rhat(stores),
        disclosure=disclosure,
        beta_draws=beta_draws,
        w_draws=w_draws,
        phi_draws=phi_draws,
        location_posteriors=loc_post,
    )


def run_scenarios(world: World, replicate_seed: int | None = None) -> dict[str, ScenarioResult]:
    """Execute every configured scenario on one shared simulated truth."""
    seed = world.cfg.seed if replicate_seed is None else replicate_seed
    truth = make_truth(world, seed)
    obs = simulate_outcomes(truth, world, np.random.default_rng((seed, 41)))
    out = {}
    for sid in world.cfg.scenarios:
        scenario = Scenario.from_id(sid)
        out[sid] = run_scenario(world, truth, obs, scenario, seed)
    return out
