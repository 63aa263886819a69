"""Conditional latent Gaussian model for fixed cluster locations.

For each hyperparameter value phi the conditional posterior of
theta = [beta, w] is approximated by a Gaussian at its mode (Newton on the
binomial log posterior), and phi itself lives on a small grid weighted by
the Laplace marginal-likelihood estimate times the prior. Joint draws come
from the resulting mixture of Gaussians; phi can only take grid values.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.optimize as sopt
from scipy.special import expit, gammaln

from .field import FemMatrices, MaternParams, Precision, Projector

BETA_VARIANCE_DEFAULT = 100.0
NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50


class LgmError(ValueError):
    pass


@dataclass
class ObservationSet:
    """Binomial outcomes with resolved locations and optional covariate
    values; `likelihood="gaussian"` is a test hook that treats y as real
    responses with known sd."""

    y: np.ndarray
    trials: np.ndarray
    points: np.ndarray  # (k,2)
    covariate: np.ndarray | None = None
    stratum: np.ndarray | None = None
    likelihood: str = "binomial"
    gauss_sd: float = 1.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.trials = np.broadcast_to(np.asarray(self.trials, dtype=float), self.y.shape).copy()
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.covariate is not None:
            self.covariate = np.asarray(self.covariate, dtype=float)
            if self.covariate.shape != self.y.shape:
                raise LgmError("covariate values must align with outcomes")
        if len(self.points) != len(self.y):
            raise LgmError("locations must align with outcomes")
        if self.likelihood not in ("binomial", "gaussian"):
            raise LgmError(f"unknown likelihood {self.likelihood!r}")
        if self.likelihood == "binomial" and (
            np.any(self.y < 0) or np.any(self.y > self.trials)
        ):
            raise LgmError("need 0 <= y <= n")

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def n_beta(self) -> int:
        return 1 if self.covariate is None else 2

    def design_matrix(self) -> np.ndarray:
        X = np.ones((self.n_obs, self.n_beta))
        if self.covariate is not None:
            X[:, 1] = self.covariate
        return X

    def with_locations(self, points: np.ndarray, covariate=None) -> "ObservationSet":
        """Same outcomes at different resolved locations (DA updates)."""
        return ObservationSet(
            y=self.y.copy(),
            trials=self.trials.copy(),
            points=points,
            covariate=covariate if self.covariate is not None else None,
            stratum=self.stratum,
            likelihood=self.likelihood,
            gauss_sd=self.gauss_sd,
        )


@dataclass
class LatentState:
    beta: np.ndarray
    w: np.ndarray


@dataclass
class PriorSpec:
    """Independent priors: N(0, beta_variance) per fixed effect and
    independent normals on phi = [log lambda, log kappa]."""

    phi_mean: np.ndarray
    phi_sd: np.ndarray = field(default_factory=lambda: np.array([1.5, 1.5]))
    beta_variance: float = BETA_VARIANCE_DEFAULT

    def __post_init__(self):
        self.phi_mean = np.asarray(self.phi_mean, dtype=float)
        self.phi_sd = np.asarray(self.phi_sd, dtype=float)
        if np.any(self.phi_sd <= 0) or self.beta_variance <= 0:
            raise LgmError("prior variances must be positive")

    @classmethod
    def vague_for_domain(cls, domain_size: float, phi_sd=(1.5, 1.5)) -> "PriorSpec":
        """Prior means matching marginal variance 1 and a practical range of
        20% of the domain size."""
        mean = np.array([0.0, math.log(math.sqrt(8.0) / (0.2 * domain_size))])
        return cls(phi_mean=mean, phi_sd=np.asarray(phi_sd, dtype=float))

    def log_phi_prior(self, phi) -> float:
        z = (np.asarray(phi, dtype=float) - self.phi_mean) / self.phi_sd
        return float(-0.5 * np.sum(z**2) - np.sum(np.log(self.phi_sd)) - math.log(2 * math.pi))


def _loglik_terms(obs: ObservationSet, eta: np.ndarray) -> float:
    if obs.likelihood == "gaussian":
        r = obs.y - eta
        return float(
            -0.5 * np.sum(r**2) / obs.gauss_sd**2
            - obs.n_obs * (math.log(obs.gauss_sd) + 0.5 * math.log(2 * math.pi))
        )
    return float(
        np.sum(
            obs.y * eta
            - obs.trials * np.logaddexp(0.0, eta)
            + gammaln(obs.trials + 1)
            - gammaln(obs.y + 1)
            - gammaln(obs.trials - obs.y + 1)
        )
    )


def _loglik_score_weight(obs: ObservationSet, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(d loglik / d eta, negative second derivative) per observation."""
    if obs.likelihood == "gaussian":
        w = np.full_like(eta, 1.0 / obs.gauss_sd**2)
        return (obs.y - eta) * w, w
    p = expit(eta)
    return obs.y - obs.trials * p, obs.trials * p * (1.0 - p)


def log_likelihood(obs: ObservationSet, state: LatentState, proj: Projector) -> float:
    """Data log-likelihood at theta = (beta, w), including binomial constants."""
    eta = obs.design_matrix() @ state.beta + proj.apply(state.w)
    return _loglik_terms(obs, eta)


@dataclass
class LaplaceFit:
    """Gaussian approximation of theta | phi, y, s at one grid point."""

    phi: np.ndarray
    mode: np.ndarray
    chol: np.ndarray  # lower factor of the posterior precision
    log_marginal: float
    converged: bool
    iterations: int
    grad_norm: float
    n_beta: int

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(len(self.mode))
        return self.mode + sla.solve_triangular(self.chol.T, z, lower=False, check_finite=False)

    @property
    def beta(self) -> np.ndarray:
        return self.mode[: self.n_beta]

    @property
    def w(self) -> np.ndarray:
        return self.mode[self.n_beta:]


def laplace_mode(
    obs: ObservationSet,
    phi,
    prior: PriorSpec,
    fem: FemMatrices | None,
    proj: Projector | None = None,
    start: np.ndarray | None = None,
    prec: Precision | None = None,
) -> LaplaceFit:
    """Newton-Raphson mode of theta | phi, y, s and the Laplace estimate of
    log p(y | phi, s).

    fem=None drops the spatial field entirely (test hook: theta = beta).
    A precomputed Precision for this phi may be passed to reuse its factor.
    """
    phi = np.asarray(phi, dtype=float)
    X = obs.design_matrix()
    p = X.shape[1]
    if fem is None:
        M = 0
        J = X
        Qdense = np.zeros((0, 0))
        logdet_q = 0.0
    else:
        if prec is None:
            prec = Precision(fem, MaternParams.from_phi(phi))
        M = prec.n
        if proj is None:
            raise LgmError("a projector is required when the field is present")
        J = np.hstack([X, proj.A.toarray()])
        Qdense = prec.dense()
        logdet_q = prec.logdet()
    d = p + M

    P = np.zeros((d, d))
    P[np.arange(p), np.arange(p)] = 1.0 / prior.beta_variance
    if M:
        P[p:, p:] = Qdense

    def logpost_quad(theta, eta):
        return _loglik_terms(obs, eta) - 0.5 * float(theta @ (P @ theta))

    theta = np.zeros(d) if start is None else np.asarray(start, dtype=float).copy()
    if theta.shape != (d,):
        raise LgmError(f"start has shape {theta.shape}, expected ({d},)")
    eta = J @ theta
    lp = logpost_quad(theta, eta)
    converged = False
    grad_norm = math.inf
    L = None
    it = 0
    for it in range(1, NEWTON_MAX_ITER + 1):
        score, wgt = _loglik_score_weight(obs, eta)
        g = J.T @ score - P @ theta
        grad_norm = float(np.max(np.abs(g))) if d else 0.0
        H = (J.T * wgt) @ J + P
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError as exc:
            raise LgmError(f"posterior precision not SPD at phi={phi}") from exc
        if grad_norm < NEWTON_TOL:
            converged = True
            break
        step = sla.cho_solve((L, True), g, check_finite=False)
        scale = 1.0
        while scale > 1e-12:
            cand = theta + scale * step
            eta_c = J @ cand
            lp_c = logpost_quad(cand, eta_c)
            if lp_c >= lp - 1e-12:
                theta, eta, lp = cand, eta_c, lp_c
                break
            scale *= 0.5
        else:
            raise LgmError("Newton line search stalled; log posterior cannot increase")

    if not converged:
        # factorization must describe the final theta
        _, wgt = _loglik_score_weight(obs, eta)
        H = (J.T * wgt) @ J + P
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError as exc:
            raise LgmError(f"posterior precision not SPD at phi={phi}") from exc
    logdet_h = 2.0 * float(np.sum(np.log(np.diag(L))))

    log_joint = (
        _loglik_terms(obs, eta)
        - 0.5 * p * math.log(2 * math.pi * prior.beta_variance)
        - 0.5 * float(theta[:p] @ theta[:p]) / prior.beta_variance
    )
    if M:
        w = theta[p:]
        log_joint += 0.5 * logdet_q - 0.5 * M * math.log(2 * math.pi) - 0.5 * float(w @ (Qdense @ w))
    log_marginal = log_joint + 0.5 * d * math.log(2 * math.pi) - 0.5 * logdet_h

    return LaplaceFit(
        phi=phi,
        mode=theta,
        chol=L,
        log_marginal=log_marginal,
        converged=converged,
        iterations=it,
        grad_norm=grad_norm,
        n_beta=p,
    )


@dataclass
class GridSpec:
    steps: int = 5
    span: float = 2.5  # in posterior sd units

    def __post_init__(self):
        if self.steps < 1 or self.span <= 0:
            raise LgmError("grid spec must be positive")


@dataclass
class HyperGrid:
    """Grid-mixture Gaussian approximation of (theta, phi) | y, s. The grid
    is rectangular in the principal-axis coordinates of the phi posterior
    (inverse-Hessian eigenbasis), so correlated hyperparameters are spanned
    along their ridge."""

    phis: np.ndarray  # (G,2)
    log_weights: np.ndarray
    weights: np.ndarray
    fits: list[LaplaceFit]
    phi_hat: np.ndarray
    phi_sd: np.ndarray  # principal standard deviations
    axes: np.ndarray | None = None  # columns = principal directions

    @property
    def size(self) -> int:
        return len(self.fits)

    def posterior_mean_phi(self) -> np.ndarray:
        return self.weights @ self.phis

    def posterior_mean_beta(self) -> np.ndarray:
        return self.weights @ np.stack([f.beta for f in self.fits])


class _PrecisionCache:
    """Precision objects keyed by phi; factorizations are reused when the
    grid is frozen across sampler iterations."""

    def __init__(self, fem: FemMatrices | None):
        self.fem = fem
        self._store: dict[bytes, Precision] = {}

    def get(self, phi: np.ndarray) -> Precision | None:
        if self.fem is None:
            return None
        key = np.asarray(phi, dtype=float).tobytes()
        if key not in self._store:
            self._store[key] = Precision(self.fem, MaternParams.from_phi(phi))
        return self._store[key]


def _grid_offsets(spec: GridSpec) -> np.ndarray:
    if spec.steps == 1:
        return np.array([0.0])
    return np.linspace(-spec.span, spec.span, spec.steps)


def build_grid(
    obs: ObservationSet,
    prior: PriorSpec,
    fem: FemMatrices | None,
    proj: Projector | None = None,
    grid_spec: GridSpec | None = None,
    start_phi: np.ndarray | None = None,
    cache: _PrecisionCache | None = None,
    warm: HyperGrid | None = None,
) -> HyperGrid:
    """Locate the phi posterior mode by quasi-Newton with finite-difference
    gradients, spread a rectangular grid +-span posterior sds around it, and
    weight grid points by exp(Laplace log marginal + log prior)."""
    grid_spec = grid_spec or GridSpec()
    cache = cache or _PrecisionCache(fem)
    d_expected = obs.n_beta + (0 if fem is None else len(fem.c_diag))
    theta0 = None
    if warm is not None and len(warm.fits[0].mode) == d_expected:
        theta0 = warm.fits[0].mode
    warm_mode = {"theta": theta0}

    def fit_at(phi, start=None):
        return laplace_mode(obs, phi, prior, fem, proj, start=start, prec=cache.get(phi))

    def objective(phi):
        try:
            fit = fit_at(phi, start=warm_mode["theta"])
        except (LgmError, FloatingPointError, ValueError, np.linalg.LinAlgError):
            return 1e12
        warm_mode["theta"] = fit.mode
        return -(fit.log_marginal + prior.log_phi_prior(phi))

    x0 = np.asarray(start_phi if start_phi is not None else prior.phi_mean, dtype=float)
    phi_hat, phi_sd = None, None
    try:
        res = sopt.minimize(
            objective, x0, method="BFGS", options={"gtol": 1e-3, "eps": 1e-5, "maxiter": 60}
        )
        if np.all(np.isfinite(res.x)) and res.fun < 1e11:
            phi_hat = res.x
    except (ValueError, FloatingPointError, np.linalg.LinAlgError):
        phi_hat = None
    if phi_hat is None:
        warnings.warn("phi optimizer failed; grid centered at the prior mean")
        phi_hat = prior.phi_mean.copy()
        phi_sd = prior.phi_sd.copy()
    if phi_sd is None:
        phi_sd = _fd_posterior_sd(objective, phi_hat, prior)

    offsets = _grid_offsets(grid_spec)
    phis, fits, logw = [], [], []
    start = warm_mode["theta"]
    for o1 in offsets:
        for o2 in offsets:
            phi = phi_hat + np.array([o1 * phi_sd[0], o2 * phi_sd[1]])
            try:
                fit = fit_at(phi, start=start)
            except LgmError:
                warnings.warn(f"dropping grid point phi={phi}: Laplace fit failed")
                continue
            start = fit.mode
            phis.append(phi)
            fits.append(fit)
            logw.append(fit.log_marginal + prior.log_phi_prior(phi))
    if not fits:
        raise LgmError("no grid point admitted a Laplace fit")
    logw = np.asarray(logw)
    logw -= logw.max()
    weights = np.exp(logw)
    weights /= weights.sum()
    return HyperGrid(
        phis=np.asarray(phis),
        log_weights=logw,
        weights=weights,
        fits=fits,
        phi_hat=phi_hat,
        phi_sd=phi_sd,
    )


def refit_grid(
    grid: HyperGrid,
    obs: ObservationSet,
    prior: PriorSpec,
    fem: FemMatrices | None,
    proj: Projector | None,
    cache: _PrecisionCache,
) -> HyperGrid:
    """Refit the conditional Gaussians at frozen phi grid locations (the
    likelihood changed because locations moved) and reweight."""
    fits, logw = [], []
    for k, phi in enumerate(grid.phis):
        fit = laplace_mode(
            obs, phi, prior, fem, proj, start=grid.fits[k].mode, prec=cache.get(phi)
        )
        fits.append(fit)
        logw.append(fit.log_marginal + prior.log_phi_prior(phi))
    logw = np.asarray(logw)
    logw -= logw.max()
    weights = np.exp(logw)
    weights /= weights.sum()
    return HyperGrid(
        phis=grid.phis.copy(),
        log_weights=logw,
        weights=weights,
        fits=fits,
        phi_hat=grid.phi_hat,
        phi_sd=grid.phi_sd,
    )


def _fd_posterior_sd(objective, phi_hat: np.ndarray, prior: PriorSpec, h: float = 0.05) -> np.ndarray:
    """Posterior sds for grid spacing from a central finite-difference
    Hessian of the negative log posterior; falls back to the prior sds."""
    f0 = objective(phi_hat)
    H = np.zeros((2, 2))
    e = np.eye(2) * h
    for i in range(2):
        H[i, i] = (objective(phi_hat + e[i]) - 2 * f0 + objective(phi_hat - e[i])) / h**2
    H[0, 1] = H[1, 0] = (
        objective(phi_hat + e[0] + e[1])
        - objective(phi_hat + e[0] - e[1])
        - objective(phi_hat - e[0] + e[1])
        + objective(phi_hat - e[0] - e[1])
    ) / (4 * h**2)
    det = H[0, 0] * H[1, 1] - H[0, 1] ** 2
    if H[0, 0] <= 0 or det <= 0:
        warnings.warn("posterior Hessian not positive definite; using prior sds for the grid")
        return prior.phi_sd.copy()
    cov = np.linalg.inv(H)
    return np.sqrt(np.diag(cov))


def sample_joint(grid: HyperGrid, seed) -> tuple[np.ndarray, np.ndarray, int]:
    """One draw: a grid point by weight, then theta from its Gaussian.
    Returns (theta, phi, grid index); phi only ever takes grid values."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = int(rng.choice(grid.size, p=grid.weights))
    theta = grid.fits[k].sample(rng)
    return theta, grid.phis[k].copy(), k


def draw_joint_samples(grid: HyperGrid, n_draws: int, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(betas, ws, phis) stacked over n_draws independent joint draws."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = grid.fits[0].n_beta
    d = len(grid.fits[0].mode)
    betas = np.empty((n_draws, p))
    ws = np.empty((n_draws, d - p))
    phis = np.empty((n_draws, 2))
    for t in range(n_draws):
        theta, phi, _ = sample_joint(grid, rng)
        betas[t] = theta[:p]
        ws[t] = theta[p:]
        phis[t] = phi
    return betas, ws, phis


def surface_draws(
    betas: np.ndarray,
    ws: np.ndarray,
    proj: Projector,
    covariate: np.ndarray | None,
) -> dict[str, np.ndarray]:
    """Per-draw surfaces at the projector's points: latent field, linear
    predictor (logit p), and probability."""
    if ws.size:
        field_draws = np.asarray((proj.A @ ws.T).T)
    else:
        field_draws = np.zeros((len(betas), proj.n_points))
    eta = field_draws + betas[:, 0][:, None]
    if betas.shape[1] > 1:
        if covariate is None:
            raise LgmError("model has a covariate effect but no covariate values were given")
        eta = eta + np.outer(betas[:, 1], covariate)
    return {"field": field_draws, "logit": eta, "prob": expit(eta)}


def predict_surface(
    betas: np.ndarray,
    ws: np.ndarray,
    proj: Projector,
    covariate: np.ndarray | None = None,
    quantiles=(0.025, 0.5, 0.975),
) -> dict[str, np.ndarray]:
    """Posterior quantile summaries per prediction point for the probability
    and latent-field surfaces."""
    draws = surface_draws(betas, ws, proj, covariate)
    out = {}
    for name in ("prob", "field", "logit"):
        qs = np.quantile(draws[name], quantiles, axis=0)
        for q, row in zip(quantiles, qs):
            out[f"{name}_q{q * 100:g}"] = row
    return out


def aggregate_blocks(values: np.ndarray, shape: tuple[int, int], factor: int) -> np.ndarray:
    """Block means of a (..., nrows*ncols) stack of grids; dims must divide."""
    nrows, ncols = shape
    if nrows % factor or ncols % factor:
        raise LgmError(f"grid {shape} not divisible by aggregation factor {factor}")
    lead = values.shape[:-1]
    v = values.reshape(*lead, nrows // factor, factor, ncols // factor, factor)
    return v.mean(axis=(-3, -1)).reshape(*lead, -1)


def write_samples(path, betas: np.ndarray, phis: np.ndarray, ws: np.ndarray, fmt: str = "wide"):
    """Posterior sample dump; wide has one row per draw, long one row per
    (draw, parameter)."""
    nb = betas.shape[1]
    mw = ws.shape[1]
    names = ["phi1", "phi2"] + [f"beta{i}" for i in range(nb)] + [f"w_{m + 1}" for m in range(mw)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if fmt == "wide":
            w.writerow(["draw"] + names)
            for t in range(len(betas)):
                row = [t]
                row.extend(f"{v:.17g}" for v in phis[t])
                row.extend(f"{v:.17g}" for v in betas[t])
                row.extend(f"{v:.17g}" for v in ws[t])
                w.writerow(row)
        elif fmt == "long":
            w.writerow(["draw", "parameter", "value"])
            for t in range(len(betas)):
                vals = list(phis[t]) + list(betas[t]) + list(ws[t])
                for name, v in zip(names, vals):
                    w.writerow([t, name, f"{v:.17g}"])
        else:
            raise LgmError(f"unknown sample format {fmt!r}")


def read_samples(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a wide-format sample dump back into (betas, phis, ws)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row[1:]] for row in reader]
    arr = np.asarray(rows)
    names = header[1:]
    nb = sum(1 for n in names if n.startswith("beta"))
    phis = arr[:, 0:2]
    betas = arr[:, 2 : 2 + nb]
    ws = arr[:, 2 + nb :]
    return betas, phis, ws
