"""Synthetic masterframe construction and stratified cluster sampling.

A population-density raster is split into urban/rural strata within each
admin area, enumeration areas (EAs) are drawn proportional to density, and
clusters are sampled per (area, stratum) block without replacement.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .geo import Geography, Point

RURAL, URBAN = 0, 1
STRATUM_NAMES = {RURAL: "rural", URBAN: "urban"}
STRATUM_CODES = {"rural": RURAL, "urban": URBAN}


class FrameError(ValueError):
    pass


@dataclass
class Raster:
    """Row-major grid of values; row 0 is the northernmost (top) row,
    matching the ASCII-grid file layout."""

    xll: float
    yll: float
    cellsize: float
    values: np.ndarray
    nodata: float = -9999.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.size == 0:
            raise FrameError("raster values must be a non-empty 2-D array")
        if self.cellsize <= 0:
            raise FrameError("cellsize must be positive")
        if not np.all(np.isfinite(self.values)):
            raise FrameError("raster values must be finite")

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return (
            self.xll,
            self.yll,
            self.xll + self.ncols * self.cellsize,
            self.yll + self.nrows * self.cellsize,
        )

    def cell_centers(self) -> np.ndarray:
        """(nrows*ncols, 2) centers in row-major (top row first) order."""
        cs = self.cellsize
        xs = self.xll + (np.arange(self.ncols) + 0.5) * cs
        ys = self.yll + (self.nrows - 1 - np.arange(self.nrows) + 0.5) * cs
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def cell_of_many(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) arrays for points; points on the top/right boundary
        clamp into the last cell; points outside the extent raise."""
        pts = np.asarray(pts, dtype=float)
        xmin, ymin, xmax, ymax = self.extent
        ok = (
            (pts[:, 0] >= xmin)
            & (pts[:, 0] <= xmax)
            & (pts[:, 1] >= ymin)
            & (pts[:, 1] <= ymax)
        )
        if not np.all(ok):
            bad = pts[~ok][0]
            raise FrameError(f"point ({bad[0]}, {bad[1]}) outside raster extent {self.extent}")
        col = np.minimum(((pts[:, 0] - xmin) / self.cellsize).astype(int), self.ncols - 1)
        row_from_bottom = np.minimum(
            ((pts[:, 1] - ymin) / self.cellsize).astype(int), self.nrows - 1
        )
        return self.nrows - 1 - row_from_bottom, col

    def value_at_many(self, pts) -> np.ndarray:
        r, c = self.cell_of_many(np.asarray(pts, dtype=float))
        return self.values[r, c]

    def value_at(self, p: Point) -> float:
        return float(self.value_at_many(np.array([[p.x, p.y]]))[0])


def read_ascii_grid(path) -> Raster:
    """Read the ASCII grid format (ncols/nrows/xllcorner/yllcorner/cellsize/
    nodata header then row-major values, top row first)."""
    header = {}
    rows = []
    with open(path) as fh:
        for raw in fh:
            parts = raw.split()
            if not parts:
                continue
            key = parts[0].lower()
            if len(parts) == 2 and key in (
                "ncols",
                "nrows",
                "xllcorner",
                "yllcorner",
                "cellsize",
                "nodata_value",
                "nodata",
            ):
                header[key] = float(parts[1])
            else:
                rows.extend(float(v) for v in parts)
    try:
        ncols, nrows = int(header["ncols"]), int(header["nrows"])
        values = np.array(rows, dtype=float).reshape(nrows, ncols)
    except (KeyError, ValueError) as exc:
        raise FrameError(f"malformed ASCII grid {path}: {exc}") from exc
    nodata = header.get("nodata_value", header.get("nodata", -9999.0))
    return Raster(header["xllcorner"], header["yllcorner"], header["cellsize"], values, nodata)


def write_ascii_grid(raster: Raster, path):
    with open(path, "w") as fh:
        fh.write(f"ncols {raster.ncols}\n")
        fh.write(f"nrows {raster.nrows}\n")
        fh.write(f"xllcorner {raster.xll:.17g}\n")
        fh.write(f"yllcorner {raster.yll:.17g}\n")
        fh.write(f"cellsize {raster.cellsize:.17g}\n")
        fh.write(f"nodata_value {raster.nodata:.17g}\n")
        for row in raster.values:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def cell_areas(raster: Raster, geo: Geography) -> np.ndarray:
    """Area id per raster cell (by cell center), -1 outside all areas."""
    return geo.locate_many(raster.cell_centers()).reshape(raster.nrows, raster.ncols)


def stratify(density: Raster, geo: Geography, target_urban_fraction: float) -> np.ndarray:
    """Label each cell urban (1) or rural (0), per area.

    Within each area, the urban set is {cells with density > t} for the
    largest threshold t whose population-weighted share is >= the target,
    i.e. the smallest achievable share at or above the target. Areas with
    zero total density are labelled all rural with a warning.
    """
    if not 0.0 < target_urban_fraction < 1.0:
        raise FrameError("target urban fraction must be in (0,1)")
    if np.any(density.values < 0):
        raise FrameError("density must be non-negative")
    areas = cell_areas(density, geo)
    labels = np.zeros_like(density.values, dtype=int)
    for a in geo.areas:
        mask = areas == a.id
        v = density.values[mask]
        total = v.sum()
        if total <= 0:
            warnings.warn(f"area {a.id} has zero population density; labelled all rural")
            continue
        order = np.argsort(v)[::-1]
        uniq = np.unique(v)[::-1]
        share = 0.0
        cut = None
        csum = np.cumsum(v[order])
        for u in uniq:
            n_above_or_eq = int(np.searchsorted(-v[order], -u, side="right"))
            share = csum[n_above_or_eq - 1] / total
            if share >= target_urban_fraction:
                cut = u
                break
        if cut is None:
            # even all positive cells fall short only if target > 1; not reachable
            cut = uniq[-1]
        sub = labels[mask]
        sub[v >= cut] = URBAN
        labels[mask] = sub
    return labels


@dataclass(frozen=True)
class EnumerationArea:
    """One potential cluster location in the sampling frame."""

    ea_id: int
    area_id: int
    stratum: int
    location: Point
    population: float
    weight: float


class Masterframe:
    """The complete list of EAs, indexed by (area, stratum) block."""

    def __init__(self, area_id, stratum, xy, population, weight=None):
        self.area_id = np.asarray(area_id, dtype=int)
        self.stratum = np.asarray(stratum, dtype=int)
        self.xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self.population = np.asarray(population, dtype=float)
        n = len(self.area_id)
        if not (len(self.stratum) == len(self.xy) == len(self.population) == n):
            raise FrameError("masterframe column lengths disagree")
        self.ea_id = np.arange(n, dtype=int)
        if weight is None:
            weight = np.zeros(n)
            for idx in self._iter_block_indices():
                weight[idx] = 1.0 / len(idx)
        self.weight = np.asarray(weight, dtype=float)
        self._blocks = {}
        for (i, j), idx in self._block_map().items():
            self._blocks[(i, j)] = idx

    def _block_map(self):
        out: dict[tuple[int, int], np.ndarray] = {}
        for key in sorted(set(zip(self.area_id.tolist(), self.stratum.tolist()))):
            out[key] = np.flatnonzero((self.area_id == key[0]) & (self.stratum == key[1]))
        return out

    def _iter_block_indices(self):
        seen = sorted(set(zip(self.area_id.tolist(), self.stratum.tolist())))
        for key in seen:
            yield np.flatnonzero((self.area_id == key[0]) & (self.stratum == key[1]))

    def __len__(self) -> int:
        return len(self.ea_id)

    @property
    def blocks(self) -> dict[tuple[int, int], np.ndarray]:
        return self._blocks

    def block(self, area_id: int, stratum: int) -> np.ndarray:
        """Row indices of the (area, stratum) block, in ea_id order."""
        key = (int(area_id), int(stratum))
        if key not in self._blocks:
            raise FrameError(f"no block for area {key[0]}, stratum {STRATUM_NAMES.get(key[1], key[1])}")
        return self._blocks[key]

    def block_size(self, area_id: int, stratum: int) -> int:
        try:
            return len(self.block(area_id, stratum))
        except FrameError:
            return 0

    def ea(self, ea_id: int) -> EnumerationArea:
        i = int(ea_id)
        return EnumerationArea(
            ea_id=i,
            area_id=int(self.area_id[i]),
            stratum=int(self.stratum[i]),
            location=Point(float(self.xy[i, 0]), float(self.xy[i, 1])),
            population=float(self.population[i]),
            weight=float(self.weight[i]),
        )


def generate_frame(
    density: Raster,
    strata: np.ndarray,
    geo: Geography,
    counts: dict[tuple[int, int], int],
    seed: int,
) -> Masterframe:
    """Draw EA locations per (area, stratum) block, cells chosen proportional
    to density and positions uniform within the chosen cell. Deterministic
    given the seed; blocks are processed in sorted key order."""
    areas = cell_areas(density, geo)
    centers = density.cell_centers().reshape(density.nrows, density.ncols, 2)
    rng = np.random.default_rng(seed)
    rows = {"area": [], "stratum": [], "xy": [], "pop": []}
    for (i, j), k in sorted(counts.items()):
        k = int(k)
        if k < 0:
            raise FrameError(f"negative count for block ({i},{j})")
        if k == 0:
            continue
        mask = (areas == i) & (strata == j) & (density.values > 0)
        flat = np.flatnonzero(mask.ravel())
        if flat.size == 0:
            raise FrameError(
                f"block (area {i}, {STRATUM_NAMES.get(j, j)}) has no positive-density cells "
                f"but {k} EAs were requested"
            )
        p = density.values.ravel()[flat]
        p = p / p.sum()
        got_xy = np.empty((0, 2))
        got_pop = np.empty(0)
        remaining = k
        attempts = 0
        cs = density.cellsize
        while remaining > 0:
            attempts += 1
            if attempts > 1000:
                raise FrameError(f"could not place EAs inside area {i}; sliver geometry?")
            pick = rng.choice(flat, size=remaining, p=p)
            r, c = np.unravel_index(pick, density.values.shape)
            offs = rng.uniform(-0.5 * cs, 0.5 * cs, size=(remaining, 2))
            pts = centers[r, c] + offs
            ok = geo.locate_many(pts) == i
            got_xy = np.vstack([got_xy, pts[ok]])
            got_pop = np.concatenate([got_pop, density.values[r, c][ok]])
            remaining = k - len(got_xy)
        rows["area"].extend([i] * k)
        rows["stratum"].extend([j] * k)
        rows["xy"].append(got_xy)
        rows["pop"].append(got_pop)
    if not rows["area"]:
        return Masterframe(
            np.empty(0, int), np.empty(0, int), np.empty((0, 2)), np.empty(0)
        )
    return Masterframe(
        np.array(rows["area"]),
        np.array(rows["stratum"]),
        np.vstack(rows["xy"]),
        np.concatenate(rows["pop"]),
    )


def set_weights(frame: Masterframe, mode: str) -> Masterframe:
    """Recompute the per-block prior weights d: uniform -> 1/m, pps -> N/sum(N)."""
    if mode not in ("uniform", "pps"):
        raise FrameError(f"unknown weight mode {mode!r}")
    weight = np.zeros(len(frame))
    for key, idx in frame.blocks.items():
        if mode == "uniform":
            weight[idx] = 1.0 / len(idx)
        else:
            tot = frame.population[idx].sum()
            if tot <= 0:
                raise FrameError(f"block {key} has zero total population; pps undefined")
            weight[idx] = frame.population[idx] / tot
    return Masterframe(frame.area_id, frame.stratum, frame.xy, frame.population, weight)


@dataclass
class SampleDesign:
    """Requested cluster counts per (area, stratum) block."""

    clusters_per_block: dict[tuple[int, int], int]
    trials: int = 25
    selection: str = "uniform"  # uniform | pps

    def __post_init__(self):
        if self.selection not in ("uniform", "pps"):
            raise FrameError(f"unknown selection mode {self.selection!r}")
        if self.trials < 1:
            raise FrameError("trials must be >= 1")


@dataclass
class ClusterSample:
    """Sampled clusters: frame rows plus true centroid locations."""

    frame_rows: np.ndarray  # indices into the masterframe
    ea_ids: np.ndarray
    points: np.ndarray  # (K,2) true locations
    area_id: np.ndarray
    stratum: np.ndarray

    def __len__(self) -> int:
        return len(self.ea_ids)


def draw_clusters(frame: Masterframe, design: SampleDesign, seed: int) -> ClusterSample:
    """Without-replacement sample of the requested size per block, uniform or
    proportional to the frame weights. Deterministic given the seed."""
    rng = np.random.default_rng(seed)
    chosen = []
    for (i, j), k in sorted(design.clusters_per_block.items()):
        k = int(k)
        if k == 0:
            continue
        idx = frame.block(i, j)
        if k > len(idx):
            raise FrameError(
                f"requested {k} clusters from block ({i},{STRATUM_NAMES.get(j, j)}) of size {len(idx)}"
            )
        if design.selection == "uniform":
            pick = rng.choice(idx, size=k, replace=False)
        else:
            w = frame.weight[idx]
            pick = rng.choice(idx, size=k, replace=False, p=w / w.sum())
        chosen.append(np.sort(pick))
    rows = np.concatenate(chosen) if chosen else np.empty(0, dtype=int)
    return ClusterSample(
        frame_rows=rows,
        ea_ids=frame.ea_id[rows],
        points=frame.xy[rows].copy(),
        area_id=frame.area_id[rows],
        stratum=frame.stratum[rows],
    )


def write_masterframe(frame: Masterframe, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ea_id", "area_id", "stratum", "x", "y", "population", "weight"])
        for i in range(len(frame)):
            w.writerow(
                [
                    frame.ea_id[i],
                    frame.area_id[i],
                    STRATUM_NAMES[int(frame.stratum[i])],
                    f"{frame.xy[i, 0]:.17g}",
                    f"{frame.xy[i, 1]:.17g}",
                    f"{frame.population[i]:.17g}",
                    f"{frame.weight[i]:.17g}",
                ]
            )


def read_masterframe(path) -> Masterframe:
    area, stratum, xy, pop, weight = [], [], [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            area.append(int(row["area_id"]))
            stratum.append(STRATUM_CODES[row["stratum"]])
            xy.append([float(row["x"]), float(row["y"])])
            pop.append(float(row["population"]))
            weight.append(float(row["weight"]))
    return Masterframe(area, stratum, xy, pop, weight)
