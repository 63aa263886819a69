"""Forward anonymization of cluster locations (jittering, masking) and the
induced candidate-location priors over enumeration areas.

Jittering displaces a point by a uniform angle and a uniform radius up to a
stratum-dependent maximum (urban 2 km; rural 5 km with 1% of clusters
displaced up to 10 km), optionally rejected until the displaced point stays
within the admin area. Masking reports only the admin area.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .frame import Masterframe, EnumerationArea, RURAL, URBAN, STRATUM_NAMES, STRATUM_CODES
from .geo import AdminArea, Geography, Point, locate

MAX_REJECTIONS = 100_000

EXACT, JITTERED, MASKED = "exact", "jittered", "masked"


class DisplaceError(ValueError):
    pass


@dataclass(frozen=True)
class JitterScheme:
    urban_radius: float = 2.0
    rural_radii: tuple[float, ...] = (5.0, 10.0)
    rural_probs: tuple[float, ...] = (0.99, 0.01)
    restrict_to_area: bool = True

    def __post_init__(self):
        if self.urban_radius <= 0 or any(r <= 0 for r in self.rural_radii):
            raise DisplaceError("radii must be positive")
        if len(self.rural_radii) != len(self.rural_probs):
            raise DisplaceError("rural radii and probabilities must align")
        if abs(sum(self.rural_probs) - 1.0) > 1e-12:
            raise DisplaceError("rural mixture probabilities must sum to 1")

    def radius_mixture(self, stratum: int) -> list[tuple[float, float]]:
        """(radius, probability) pairs for the stratum's displacement law."""
        if stratum == URBAN:
            return [(self.urban_radius, 1.0)]
        return list(zip(self.rural_radii, self.rural_probs))

    def max_radius(self, stratum: int) -> float:
        return max(r for r, _ in self.radius_mixture(stratum))

    def radii(self) -> list[float]:
        """All radii any stratum can use; the normalizing table covers these."""
        return sorted({self.urban_radius, *self.rural_radii})

    def sample_radius(self, stratum: int, rng: np.random.Generator, size=None):
        if stratum == URBAN:
            return self.urban_radius if size is None else np.full(size, self.urban_radius)
        return rng.choice(self.rural_radii, size=size, p=self.rural_probs)


def polar_offsets(rng: np.random.Generator, radius: float, size: int) -> np.ndarray:
    """(size,2) displacement vectors with angle ~ U(0,2pi) and radius ~ U(0,R)."""
    theta = rng.uniform(0.0, 2.0 * math.pi, size)
    r = rng.uniform(0.0, radius, size)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def jitter(s: Point, stratum: int, scheme: JitterScheme, area: AdminArea, seed) -> Point:
    """Displace a point under the scheme's law.

    The rural radius branch is drawn once per call; with restrict_to_area the
    (radius, angle) pair is redrawn until the displaced point stays inside
    the area.
    """
    rng = _as_rng(seed)
    radius = float(scheme.sample_radius(stratum, rng))
    origin = s.as_array()
    attempts = 0
    batch = 64
    while attempts < MAX_REJECTIONS:
        offs = polar_offsets(rng, radius, batch)
        pts = origin + offs
        if not scheme.restrict_to_area:
            return Point(float(pts[0, 0]), float(pts[0, 1]))
        inside = area.contains_many(pts)
        hit = np.flatnonzero(inside)
        if hit.size:
            return Point(float(pts[hit[0], 0]), float(pts[hit[0], 1]))
        attempts += batch
    raise DisplaceError(
        f"jitter rejection failed {MAX_REJECTIONS} times for point ({s.x},{s.y}); "
        "degenerate sliver area?"
    )


@dataclass(frozen=True)
class LocationRecord:
    """What the analyst sees for one cluster."""

    kind: str  # exact | jittered | masked
    area_id: int
    stratum: int
    point: Point | None = None

    def __post_init__(self):
        if self.kind not in (EXACT, JITTERED, MASKED):
            raise DisplaceError(f"unknown record kind {self.kind!r}")
        if self.kind == MASKED and self.point is not None:
            raise DisplaceError("masked records carry no point")
        if self.kind != MASKED and self.point is None:
            raise DisplaceError(f"{self.kind} record needs a point")


def mask(s: Point, geo: Geography, stratum: int) -> LocationRecord:
    area_id = locate(geo, s)
    if area_id is None:
        raise DisplaceError(f"point ({s.x},{s.y}) is outside every admin area")
    return LocationRecord(kind=MASKED, area_id=area_id, stratum=stratum)


def normalizer(ea: EnumerationArea, radius: float, area: AdminArea, draws: int = 1000, seed=0) -> float:
    """Monte-Carlo boundary constant C for one EA and radius:
    draws / (# unrestricted jitterings that stay inside the area).

    C == 1 exactly when no draw leaves the area, and C >= 1 always.
    """
    if draws < 1:
        raise DisplaceError("draws must be >= 1")
    rng = _as_rng(seed)
    pts = ea.location.as_array() + polar_offsets(rng, radius, draws)
    hits = int(area.contains_many(pts).sum())
    if hits == 0:
        raise DisplaceError(
            f"no jittering of EA {ea.ea_id} at radius {radius} km stayed inside "
            f"area {area.id}; area degenerate relative to the radius"
        )
    return draws / hits


class NormalizingTable:
    """Boundary constants keyed by (ea_id, radius); write-once, then read-only."""

    def __init__(self):
        self._table: dict[tuple[int, float], tuple[float, int]] = {}

    @staticmethod
    def _key(ea_id: int, radius: float) -> tuple[int, float]:
        return int(ea_id), round(float(radius), 9)

    def put(self, ea_id: int, radius: float, constant: float, draws: int):
        self._table[self._key(ea_id, radius)] = (float(constant), int(draws))

    def get(self, ea_id: int, radius: float) -> float:
        key = self._key(ea_id, radius)
        if key not in self._table:
            raise DisplaceError(f"normalizing table has no entry for EA {key[0]} at R={key[1]}")
        return self._table[key][0]

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, key) -> bool:
        return self._key(*key) in self._table

    def items(self):
        return sorted(self._table.items())


def build_normalizing_table(
    frame: Masterframe,
    geo: Geography,
    scheme: JitterScheme,
    draws: int = 1000,
    seed: int = 0,
) -> NormalizingTable:
    """Populate constants for every EA at the radii its stratum can use.

    Each (EA, radius) pair gets its own RNG stream so the table does not
    depend on evaluation order.
    """
    table = NormalizingTable()
    for a in geo.areas:
        for stratum in (RURAL, URBAN):
            if frame.block_size(a.id, stratum) == 0:
                continue
            idx = frame.block(a.id, stratum)
            for radius, _ in scheme.radius_mixture(stratum):
                for row in idx:
                    ea = frame.ea(int(row))
                    rng = np.random.default_rng((seed, int(row), int(round(radius * 1000))))
                    table.put(ea.ea_id, radius, normalizer(ea, radius, a, draws, rng), draws)
    return table


def write_normalizing_table(table: NormalizingTable, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ea_id", "radius_km", "constant", "draws"])
        for (ea_id, radius), (constant, draws) in table.items():
            w.writerow([ea_id, f"{radius:.17g}", f"{constant:.17g}", draws])


def read_normalizing_table(path) -> NormalizingTable:
    table = NormalizingTable()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table.put(int(row["ea_id"]), float(row["radius_km"]), float(row["constant"]), int(row["draws"]))
    return table


@dataclass(frozen=True)
class CandidatePrior:
    """Prior over candidate EAs for one cluster; retained entries are
    strictly positive and sum to 1."""

    ea_ids: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ea_ids, dtype=int)
        p = np.asarray(self.probabilities, dtype=float)
        object.__setattr__(self, "ea_ids", ids)
        object.__setattr__(self, "probabilities", p)
        if len(ids) != len(p) or len(ids) == 0:
            raise DisplaceError("candidate prior needs matching, non-empty ids and probabilities")
        if np.any(p <= 0):
            raise DisplaceError("retained candidates must have strictly positive probability")
        if abs(p.sum() - 1.0) > 1e-10:
            raise DisplaceError(f"candidate probabilities sum to {p.sum()}, not 1")

    def __len__(self) -> int:
        return len(self.ea_ids)

    def prob_of(self, ea_id: int) -> float:
        hit = np.flatnonzero(self.ea_ids == int(ea_id))
        return float(self.probabilities[hit[0]]) if hit.size else 0.0


def masking_prior(area_id: int, stratum: int, frame: Masterframe) -> CandidatePrior:
    """Prior over the (area, stratum) block under masking: the selection
    weights d themselves."""
    idx = frame.block(area_id, stratum)
    w = frame.weight[idx].astype(float)
    return CandidatePrior(frame.ea_id[idx], w / w.sum())


def displacement_prior(
    u: Point,
    area_id: int,
    stratum: int,
    frame: Masterframe,
    scheme: JitterScheme,
    table: NormalizingTable,
) -> CandidatePrior:
    """Posterior-of-location prior given a jittered point u: each block EA e
    gets weight d_e * sum over the radius mixture of
    prob_R * C(e,R) / (2 pi R dist(u,e)) * 1{0 < dist < R}, normalized.

    A candidate at distance exactly 0 dominates every finite-density one, so
    zero-distance candidates become a point mass split by their d weights.
    """
    idx = frame.block(area_id, stratum)
    ids = frame.ea_id[idx]
    d = frame.weight[idx].astype(float)
    dist = np.hypot(frame.xy[idx, 0] - u.x, frame.xy[idx, 1] - u.y)

    at_zero = dist == 0.0
    if np.any(at_zero):
        w = np.where(at_zero, d, 0.0)
        keep = w > 0
        if not np.any(keep):
            raise DisplaceError("zero-distance candidates all have zero prior weight")
        return CandidatePrior(ids[keep], w[keep] / w[keep].sum())

    w = np.zeros(len(idx))
    for radius, prob in scheme.radius_mixture(stratum):
        consts = np.array([table.get(int(e), radius) for e in ids])
        in_range = dist < radius
        with np.errstate(divide="ignore"):
            w += np.where(in_range, prob * consts / (2.0 * math.pi * radius * dist), 0.0)
    w *= d
    keep = w > 0
    if not np.any(keep):
        raise DisplaceError(
            f"no candidate EA within {scheme.max_radius(stratum)} km of ({u.x},{u.y}); "
            "reported point inconsistent with the frame"
        )
    return CandidatePrior(ids[keep], w[keep] / w[keep].sum())


def write_location_records(records: list[LocationRecord], path, cluster_ids=None):
    """CSV  cluster_id,kind,x,y,area_id,stratum  with empty x,y for masked."""
    if cluster_ids is None:
        cluster_ids = range(len(records))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "kind", "x", "y", "area_id", "stratum"])
        for cid, rec in zip(cluster_ids, records):
            x = "" if rec.point is None else f"{rec.point.x:.17g}"
            y = "" if rec.point is None else f"{rec.point.y:.17g}"
            w.writerow([cid, rec.kind, x, y, rec.area_id, STRATUM_NAMES[rec.stratum]])


def read_location_records(path) -> list[LocationRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            point = None
            if row["x"] != "" and row["y"] != "":
                point = Point(float(row["x"]), float(row["y"]))
            records.append(
                LocationRecord(
                    kind=row["kind"],
                    area_id=int(row["area_id"]),
                    stratum=STRATUM_CODES[row["stratum"]],
                    point=point,
                )
            )
    return records
