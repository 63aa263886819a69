"""Hybrid sampler: exact Gibbs updates of unresolved cluster locations
alternate with joint draws of (theta, phi) from the Laplace-grid
approximation of the conditional latent Gaussian model.

Clusters with exact locations bypass the location step; when every cluster
is exact the sampler degenerates to independent draws from a single fitted
grid mixture.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .displace import EXACT, CandidatePrior, LocationRecord
from .field import FemMatrices, Mesh, project
from .frame import Masterframe, Raster
from .lgm import (
    GridSpec,
    ObservationSet,
    PriorSpec,
    _PrecisionCache,
    build_grid,
    refit_grid,
    sample_joint,
)


class ChainError(RuntimeError):
    pass


@dataclass
class ChainConfig:
    iterations: int
    burn_in: int | None = None  # default iterations // 5
    chains: int = 4
    seed: int = 0
    grid_policy: str = "every"  # every | freeze
    thin: int = 1
    grid_spec: GridSpec = field(default_factory=GridSpec)
    monitor_nodes: int = 10

    def __post_init__(self):
        if self.burn_in is None:
            self.burn_in = self.iterations // 5
        if not (self.iterations > self.burn_in >= 0):
            raise ChainError("need iterations > burn_in >= 0")
        if self.chains < 1 or self.thin < 1:
            raise ChainError("need chains >= 1 and thin >= 1")
        if self.grid_policy not in ("every", "freeze"):
            raise ChainError(f"unknown grid policy {self.grid_policy!r}")


@dataclass
class DaProblem:
    """Everything one sampler run needs: outcomes, location records, the
    candidate prior per unresolved cluster, and the field machinery."""

    y: np.ndarray
    trials: np.ndarray
    records: list[LocationRecord]
    candidate_priors: list[CandidatePrior | None]
    frame: Masterframe
    mesh: Mesh
    fem: FemMatrices
    prior: PriorSpec
    covariate: Raster | None = None
    likelihood: str = "binomial"
    gauss_sd: float = 1.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.trials = np.broadcast_to(np.asarray(self.trials, dtype=float), self.y.shape).copy()
        k = len(self.y)
        if len(self.records) != k or len(self.candidate_priors) != k:
            raise ChainError("records and candidate priors must align with outcomes")
        for i, (rec, cp) in enumerate(zip(self.records, self.candidate_priors)):
            if rec.kind == EXACT and cp is not None:
                raise ChainError(f"cluster {i}: exact record with a candidate prior")
            if rec.kind != EXACT and cp is None:
                raise ChainError(f"cluster {i}: {rec.kind} record without a candidate prior")
        if self.likelihood != "binomial" and any(r.kind != EXACT for r in self.records):
            raise ChainError("the location Gibbs step supports only the binomial likelihood")

    @property
    def n_clusters(self) -> int:
        return len(self.y)


def gibbs_location(
    y: float,
    trials: float,
    log_prior: np.ndarray,
    eta: np.ndarray,
    rng: np.random.Generator,
) -> int:
    """Sample one candidate index from prior x binomial likelihood, in log
    space; the max-log shift makes underflow impossible."""
    logw = log_prior + y * eta - trials * np.logaddexp(0.0, eta)
    logw = logw - logw.max()
    w = np.exp(logw)
    return int(rng.choice(len(w), p=w / w.sum()))


@dataclass
class SampleStore:
    """Post-burn-in, thinned states of one chain."""

    betas: np.ndarray  # (n, p)
    ws: np.ndarray  # (n, M)
    phis: np.ndarray  # (n, 2)
    assignments: np.ndarray  # (n, n_unresolved) frame rows
    unresolved: np.ndarray  # cluster indices the assignment columns refer to
    chain_index: int = 0

    @property
    def n_draws(self) -> int:
        return len(self.betas)


@dataclass
class ChainState:
    """Mutable sampler state, mostly useful in error reports."""

    iteration: int
    assignment: np.ndarray
    beta: np.ndarray
    w: np.ndarray
    phi: np.ndarray


class _Workspace:
    """Shared, read-only precomputation for all chains of one problem."""

    def __init__(self, problem: DaProblem):
        self.problem = problem
        recs = problem.records
        self.unresolved = np.array(
            [i for i, r in enumerate(recs) if r.kind != EXACT], dtype=int
        )
        self.exact = np.array([i for i, r in enumerate(recs) if r.kind == EXACT], dtype=int)

        pts = []
        self.cluster_row = np.full(problem.n_clusters, -1, dtype=int)
        for i in self.exact:
            self.cluster_row[i] = len(pts)
            pts.append([recs[i].point.x, recs[i].point.y])
        self.cand_offset = {}
        self.cand_rows = {}
        for i in self.unresolved:
            cp = problem.candidate_priors[i]
            self.cand_offset[int(i)] = len(pts)
            self.cand_rows[int(i)] = cp.ea_ids  # frame rows == ea ids
            pts.extend(problem.frame.xy[cp.ea_ids].tolist())
        self.points = np.asarray(pts, dtype=float).reshape(-1, 2)
        self.A_all = project(problem.mesh, self.points).A
        if problem.covariate is not None:
            self.z_all = problem.covariate.value_at_many(self.points)
        else:
            self.z_all = None
        self.log_priors = {
            int(i): np.log(problem.candidate_priors[i].probabilities) for i in self.unresolved
        }

    def rows_for(self, assignment: np.ndarray) -> np.ndarray:
        """Row (into points/A_all) per cluster for the current assignment of
        unresolved clusters (assignment holds local candidate indices)."""
        rows = self.cluster_row.copy()
        for slot, i in enumerate(self.unresolved):
            rows[i] = self.cand_offset[int(i)] + int(assignment[slot])
        return rows

    def observation_set(self, rows: np.ndarray) -> tuple[ObservationSet, "sp.csr_matrix"]:
        z = None if self.z_all is None else self.z_all[rows]
        obs = ObservationSet(
            y=self.problem.y,
            trials=self.problem.trials,
            points=self.points[rows],
            covariate=z,
            likelihood=self.problem.likelihood,
            gauss_sd=self.problem.gauss_sd,
        )
        return obs, self.A_all[rows]


class _RowProjector:
    """Adapter giving a row-sliced sparse matrix the Projector surface."""

    def __init__(self, A, points):
        self.A = A
        self.points = points

    @property
    def n_points(self):
        return self.A.shape[0]

    def apply(self, w):
        return self.A @ w


def _thread_cap(requested: int) -> int:
    env = os.environ.get("GEOMASK_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(requested, cap))


def run(problem: DaProblem, config: ChainConfig) -> list[SampleStore]:
    """Run all chains; deterministic given config.seed regardless of the
    thread cap (each chain owns an RNG stream derived from its index)."""
    ws = _Workspace(problem)
    n_chains = config.chains
    workers = _thread_cap(n_chains)
    if workers == 1 or n_chains == 1:
        return [_run_chain(ws, config, c) for c in range(n_chains)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(_run_chain, ws, config, c) for c in range(n_chains)]
        return [f.result() for f in futs]


def _run_chain(ws: _Workspace, config: ChainConfig, chain_index: int) -> SampleStore:
    problem = ws.problem
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 97, chain_index)))
    fem, prior = problem.fem, problem.prior
    n_unres = len(ws.unresolved)
    p = 1 if ws.z_all is None else 2
    M = len(fem.c_diag)
    cache = _PrecisionCache(fem)

    # initial locations from the candidate priors
    assignment = np.zeros(n_unres, dtype=int)
    for slot, i in enumerate(ws.unresolved):
        probs = problem.candidate_priors[i].probabilities
        assignment[slot] = rng.choice(len(probs), p=probs)

    rows = ws.rows_for(assignment)
    obs, A = ws.observation_set(rows)
    proj = _RowProjector(A, ws.points[rows])
    grid = build_grid(obs, prior, fem, proj, config.grid_spec, cache=cache)
    theta, phi, _ = sample_joint(grid, rng)

    keep_every = config.thin
    n_keep = (config.iterations - config.burn_in + keep_every - 1) // keep_every
    betas = np.empty((n_keep, p))
    wss = np.empty((n_keep, M))
    phis = np.empty((n_keep, 2))
    assigns = np.empty((n_keep, n_unres), dtype=int)
    stored = 0

    static = n_unres == 0
    for t in range(1, config.iterations + 1):
        state = ChainState(t, assignment.copy(), theta[:p], theta[p:], phi)
        try:
            if not static:
                # step (a): exact Gibbs over candidate EAs given current theta
                beta, w = theta[:p], theta[p:]
                s_cand = ws.A_all @ w
                for slot, i in enumerate(ws.unresolved):
                    off = ws.cand_offset[int(i)]
                    ncand = len(ws.cand_rows[int(i)])
                    sl = slice(off, off + ncand)
                    eta = beta[0] + s_cand[sl]
                    if p > 1:
                        eta = eta + beta[1] * ws.z_all[sl]
                    assignment[slot] = gibbs_location(
                        problem.y[i], problem.trials[i], ws.log_priors[int(i)], eta, rng
                    )
                rows = ws.rows_for(assignment)
                obs, A = ws.observation_set(rows)
                proj = _RowProjector(A, ws.points[rows])
                # step (b): conditional Laplace-grid fit and a joint draw
                if config.grid_policy == "every":
                    grid = build_grid(
                        obs, prior, fem, proj, config.grid_spec,
                        start_phi=grid.phi_hat, cache=cache, warm=grid,
                    )
                else:
                    grid = refit_grid(grid, obs, prior, fem, proj, cache)
            theta, phi, _ = sample_joint(grid, rng)
        except Exception as exc:
            raise ChainError(
                f"chain {chain_index} failed at iteration {t}: {exc}; "
                f"state: phi={state.phi}, beta={state.beta}"
            ) from exc
        if t > config.burn_in and (t - config.burn_in - 1) % keep_every == 0:
            betas[stored] = theta[:p]
            wss[stored] = theta[p:]
            phis[stored] = phi
            assigns[stored] = [
                ws.cand_rows[int(i)][assignment[slot]]
                for slot, i in enumerate(ws.unresolved)
            ]
            stored += 1

    return SampleStore(
        betas=betas[:stored],
        ws=wss[:stored],
        phis=phis[:stored],
        assignments=assigns[:stored],
        unresolved=ws.unresolved.copy(),
        chain_index=chain_index,
    )


def rhat(traces: np.ndarray) -> float:
    """Classic Gelman-Rubin potential scale reduction over (nchains, n)
    traces; +inf when the within-chain variance vanishes."""
    traces = np.asarray(traces, dtype=float)
    if traces.ndim != 2 or traces.shape[0] < 2 or traces.shape[1] < 10:
        raise ChainError("rhat needs >= 2 chains of equal length >= 10")
    n = traces.shape[1]
    within = float(np.mean(np.var(traces, axis=1, ddof=1)))
    means = traces.mean(axis=1)
    b_over_n = float(np.var(means, ddof=1))
    if within == 0.0:
        return math.inf
    return math.sqrt(((n - 1) / n * within + b_over_n) / within)


def monitored_scalars(stores: list[SampleStore], monitor_nodes: int = 10) -> dict[str, np.ndarray]:
    """Name -> (nchains, n) traces for the fixed effects, phi, and a fixed
    set of mesh-node weights."""
    p = stores[0].betas.shape[1]
    M = stores[0].ws.shape[1]
    out: dict[str, np.ndarray] = {}
    for j in range(p):
        out[f"beta{j}"] = np.stack([s.betas[:, j] for s in stores])
    for j in range(2):
        out[f"phi{j + 1}"] = np.stack([s.phis[:, j] for s in stores])
    if M and monitor_nodes:
        nodes = np.unique(np.linspace(0, M - 1, min(monitor_nodes, M)).round().astype(int))
        for m in nodes:
            out[f"w_{m + 1}"] = np.stack([s.ws[:, m] for s in stores])
    return out


def diagnostics(stores: list[SampleStore], monitor_nodes: int = 10) -> dict[str, float]:
    """R-hat per monitored scalar."""
    return {name: rhat(tr) for name, tr in monitored_scalars(stores, monitor_nodes).items()}


def worst_gate_rhat(stores: list[SampleStore], monitor_nodes: int = 10) -> float:
    """Largest R-hat for convergence gating. Traces that are one identical
    constant across every chain (e.g. phi pinned to a single grid point) are
    a point mass, not a mixing failure, and are skipped."""
    worst = 1.0
    for tr in monitored_scalars(stores, monitor_nodes).values():
        if np.ptp(tr) == 0.0:
            continue
        worst = max(worst, rhat(tr))
    return worst


def location_posterior(stores: list[SampleStore], cluster: int) -> tuple[np.ndarray, np.ndarray]:
    """(candidate EA ids, visit frequencies) pooled over chains for one
    unresolved cluster."""
    unres = stores[0].unresolved
    hit = np.flatnonzero(unres == cluster)
    if hit.size == 0:
        raise ChainError(f"cluster {cluster} was not sampled (exact location)")
    slot = int(hit[0])
    visits = np.concatenate([s.assignments[:, slot] for s in stores])
    values, counts = np.unique(visits, return_counts=True)
    return values, counts / counts.sum()
