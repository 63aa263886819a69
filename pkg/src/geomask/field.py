"""Latent spatial field: Matern covariance, structured triangular mesh,
finite-element matrices, the sparse GMRF precision approximating the SPDE
solution, and projection of mesh weights to arbitrary points.

Smoothness is fixed at nu = 1, so the precision uses the alpha = 2 form
Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G) with lumped mass C and
tau^2 = 1 / (4 pi kappa^2 lambda^2), which makes the field's marginal
variance lambda^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.special import k1

from .geo import Geography, _as_points_array


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class MaternParams:
    """Hyperparameters phi = [log lambda, log kappa]; nu fixed at 1."""

    log_sd: float  # phi_1 = log lambda
    log_scale: float  # phi_2 = log kappa

    def __post_init__(self):
        if not (math.isfinite(self.log_sd) and math.isfinite(self.log_scale)):
            raise FieldError(f"non-finite Matern parameters ({self.log_sd}, {self.log_scale})")

    @classmethod
    def from_phi(cls, phi) -> "MaternParams":
        return cls(float(phi[0]), float(phi[1]))

    @property
    def phi(self) -> np.ndarray:
        return np.array([self.log_sd, self.log_scale])

    @property
    def lam(self) -> float:
        return math.exp(self.log_sd)

    @property
    def kappa(self) -> float:
        return math.exp(self.log_scale)

    @property
    def tau2(self) -> float:
        return 1.0 / (4.0 * math.pi * self.kappa**2 * self.lam**2)

    @property
    def practical_range(self) -> float:
        """Distance at which the nu=1 correlation drops to ~0.1."""
        return math.sqrt(8.0) / self.kappa


def matern_cov_at(dist, params: MaternParams) -> np.ndarray:
    """Matern nu=1 covariance lambda^2 (kappa d) K_1(kappa d), with the
    continuous limit lambda^2 at d = 0."""
    d = np.asarray(dist, dtype=float)
    x = params.kappa * d
    out = np.empty_like(d)
    zero = x == 0.0
    with np.errstate(invalid="ignore", over="ignore"):
        out[~zero] = params.lam**2 * x[~zero] * k1(x[~zero])
    out[zero] = params.lam**2
    return out


def matern_cov(a, b, params: MaternParams) -> float:
    d = math.hypot(a.x - b.x, a.y - b.y)
    return float(matern_cov_at(np.array(d), params))


class Mesh:
    """Structured triangular mesh: a regular grid of squares, each split
    along its SW-NE diagonal."""

    def __init__(self, origin: tuple[float, float], spacing: float, nx: int, ny: int):
        if spacing <= 0 or nx < 1 or ny < 1:
            raise FieldError("mesh needs positive spacing and at least one cell per axis")
        self.origin = (float(origin[0]), float(origin[1]))
        self.spacing = float(spacing)
        self.nx = int(nx)
        self.ny = int(ny)
        xs = self.origin[0] + self.spacing * np.arange(nx + 1)
        ys = self.origin[1] + self.spacing * np.arange(ny + 1)
        gx, gy = np.meshgrid(xs, ys)  # row j (y), col i (x)
        self.nodes = np.column_stack([gx.ravel(), gy.ravel()])
        tris = []
        for j in range(ny):
            for i in range(nx):
                a = j * (nx + 1) + i
                b = a + 1
                c = b + (nx + 1)
                d = a + (nx + 1)
                tris.append([a, b, c])  # lower (v <= u)
                tris.append([a, c, d])  # upper
        self.triangles = np.array(tris, dtype=int)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, y0, x0 + self.nx * self.spacing, y0 + self.ny * self.spacing)

    def locate_points(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(triangle index, node-index triple, barycentric coords) per point.

        Points on the top/right boundary clamp into the last cell; shared
        edges resolve to the lower triangle. Raises for points outside.
        """
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        x0, y0 = self.origin
        h = self.spacing
        fx = (pts[:, 0] - x0) / h
        fy = (pts[:, 1] - y0) / h
        eps = 1e-12 * max(self.nx, self.ny)
        bad = (fx < -eps) | (fx > self.nx + eps) | (fy < -eps) | (fy > self.ny + eps)
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise FieldError(f"point ({pts[k,0]}, {pts[k,1]}) lies outside the mesh {self.extent()}")
        i = np.clip(np.floor(fx).astype(int), 0, self.nx - 1)
        j = np.clip(np.floor(fy).astype(int), 0, self.ny - 1)
        u = fx - i
        v = fy - j
        lower = v <= u
        cell = 2 * (j * self.nx + i)
        tri_idx = np.where(lower, cell, cell + 1)
        nodes = self.triangles[tri_idx]
        bary = np.where(
            lower[:, None],
            np.column_stack([1.0 - u, u - v, v]),
            np.column_stack([1.0 - v, u, v - u]),
        )
        bary = np.clip(bary, 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        return tri_idx, nodes, bary

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        x0, y0, x1, y1 = self.extent()
        return (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)


def build_mesh(geo: Geography, spacing: float, extension: float) -> Mesh:
    """Structured mesh covering the geography's bounding box extended by the
    margin on every side."""
    if spacing <= 0:
        raise FieldError("spacing must be positive")
    xmin, ymin, xmax, ymax = geo.bounding_box
    if spacing > (xmax - xmin) + 2 * extension or spacing > (ymax - ymin) + 2 * extension:
        raise FieldError(
            f"spacing {spacing} exceeds the extended bounding box "
            f"({xmax - xmin + 2 * extension} x {ymax - ymin + 2 * extension})"
        )
    x0, y0 = xmin - extension, ymin - extension
    nx = max(1, math.ceil((xmax + extension - x0) / spacing - 1e-12))
    ny = max(1, math.ceil((ymax + extension - y0) / spacing - 1e-12))
    return Mesh((x0, y0), spacing, nx, ny)


@dataclass
class FemMatrices:
    """Lumped mass diagonal and stiffness matrix of the mesh."""

    c_diag: np.ndarray  # (M,) positive
    G: sp.csr_matrix  # (M,M) symmetric PSD, zero row sums


def fem_matrices(mesh: Mesh) -> FemMatrices:
    nodes, tris = mesh.nodes, mesh.triangles
    p1, p2, p3 = nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]
    d21, d31 = p2 - p1, p3 - p1
    signed = 0.5 * (d21[:, 0] * d31[:, 1] - d21[:, 1] * d31[:, 0])
    area = np.abs(signed)
    if np.any(area <= 1e-14 * mesh.spacing**2):
        raise FieldError("degenerate triangle in mesh")

    M = mesh.n_nodes
    c_diag = np.zeros(M)
    np.add.at(c_diag, tris.ravel(), np.repeat(area / 3.0, 3))

    # gradients of the linear basis: grad psi_i = (b_i, c_i) / (2 signed area)
    b = np.stack(
        [p2[:, 1] - p3[:, 1], p3[:, 1] - p1[:, 1], p1[:, 1] - p2[:, 1]], axis=1
    )
    c = np.stack(
        [p3[:, 0] - p2[:, 0], p1[:, 0] - p3[:, 0], p2[:, 0] - p1[:, 0]], axis=1
    )
    denom = 2.0 * signed
    rows, cols, vals = [], [], []
    for a_ in range(3):
        for b_ in range(3):
            rows.append(tris[:, a_])
            cols.append(tris[:, b_])
            vals.append((b[:, a_] * b[:, b_] + c[:, a_] * c[:, b_]) / (denom * denom) * area)
    G = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(M, M)
    ).tocsr()
    return FemMatrices(c_diag=c_diag, G=G)


class Precision:
    """Sparse SPD precision Q(phi) of the mesh weights, with a cached dense
    Cholesky factor (desk-scale meshes keep this cheap)."""

    def __init__(self, fem: FemMatrices, params: MaternParams):
        self.params = params
        k2 = params.kappa**2
        Ci = sp.diags(1.0 / fem.c_diag)
        K = sp.diags(k2**2 * fem.c_diag) + 2.0 * k2 * fem.G + fem.G @ Ci @ fem.G
        self.Q = (params.tau2 * K).tocsr()
        self._chol: np.ndarray | None = None
        self._dense: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    def dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.Q.toarray()
        return self._dense

    def chol(self) -> np.ndarray:
        """Lower-triangular L with Q = L L^T."""
        if self._chol is None:
            try:
                self._chol = sla.cholesky(self.Q.toarray(), lower=True)
            except sla.LinAlgError as exc:
                raise FieldError(
                    f"precision not positive definite at phi = "
                    f"({self.params.log_sd}, {self.params.log_scale})"
                ) from exc
        return self._chol

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol()))))

    def quad_form(self, w: np.ndarray) -> float:
        return float(w @ (self.Q @ w))

    def dense_cov(self) -> np.ndarray:
        L = self.chol()
        return sla.cho_solve((L, True), np.eye(self.n))


def precision(fem: FemMatrices, params: MaternParams) -> Precision:
    return Precision(fem, params)


class Projector:
    """Sparse map from mesh weights to field values at fixed query points;
    each row holds the barycentric coordinates of one point."""

    def __init__(self, A: sp.csr_matrix, points: np.ndarray):
        self.A = A
        self.points = points

    @property
    def n_points(self) -> int:
        return self.A.shape[0]

    def apply(self, w: np.ndarray) -> np.ndarray:
        return self.A @ w


def project(mesh: Mesh, points) -> Projector:
    pts = _as_points_array(points)
    _, nodes, bary = mesh.locate_points(pts)
    n = len(pts)
    rows = np.repeat(np.arange(n), 3)
    A = sp.coo_matrix(
        (bary.ravel(), (rows, nodes.ravel())), shape=(n, mesh.n_nodes)
    ).tocsr()
    A.sum_duplicates()
    return Projector(A, pts)


def sample_field(prec: Precision, seed) -> np.ndarray:
    """One draw w ~ N(0, Q^-1) via back-substitution on the Cholesky factor."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal(prec.n)
    return sla.solve_triangular(prec.chol().T, z, lower=False)


def write_mesh(mesh: Mesh, path):
    with open(path, "w") as fh:
        fh.write(f"# structured {mesh.origin[0]:.17g} {mesh.origin[1]:.17g} "
                 f"{mesh.spacing:.17g} {mesh.nx} {mesh.ny}\n")
        for x, y in mesh.nodes:
            fh.write(f"node {x:.17g} {y:.17g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"tri {a} {b} {c}\n")


def read_mesh(path) -> Mesh:
    with open(path) as fh:
        first = fh.readline().split()
        if len(first) == 7 and first[0] == "#" and first[1] == "structured":
            return Mesh(
                (float(first[2]), float(first[3])), float(first[4]), int(first[5]), int(first[6])
            )
    raise FieldError(f"{path}: not a structured mesh file")


def write_precision(prec: Precision, path):
    """Coordinate-list text export for debugging."""
    coo = prec.Q.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# {prec.n} {prec.n} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v:.17g}\n")
