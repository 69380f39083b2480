"""
Surface Service

Prediction grids over the municipality region, thin plate spline
interpolation of station estimates and municipality averaging.
"""

import logging
from dataclasses import dataclass, field
from datetime import date
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import shapely
from joblib import Parallel, delayed
from scipy import linalg
from scipy.special import xlogy

from services.domain import METHOD_GQRM, ExposureSurface, MunicipalityMap, pairwise_distances
from services.errors import DataError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_SMOOTHING = 0.001


@dataclass(frozen=True)
class PredictionGrid:
    """Centroids plus lattice points, each assigned to one municipality."""

    points: np.ndarray
    membership: np.ndarray
    kind: np.ndarray
    altitude: np.ndarray
    spacing: Optional[float] = None
    fallback: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_lattice(self) -> int:
        return int(np.sum(self.kind == "lattice"))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "point": np.arange(len(self)),
            "x": self.points[:, 0],
            "y": self.points[:, 1],
            "municipality_id": self.membership,
            "kind": self.kind,
            "altitude": self.altitude,
        })


def _centroid_points(municipalities: MunicipalityMap) -> np.ndarray:
    pts = []
    for mid in municipalities.ids:
        geom = municipalities[mid].geometry
        c = geom.centroid
        if not geom.covers(c):
            c = geom.representative_point()
        pts.append((c.x, c.y))
    return np.array(pts, dtype=float)


def _lattice(region, spacing: float) -> np.ndarray:
    minx, miny, maxx, maxy = region.bounds
    xs = np.arange(minx + spacing / 2.0, maxx, spacing)
    ys = np.arange(miny + spacing / 2.0, maxy, spacing)
    if xs.size == 0 or ys.size == 0:
        return np.empty((0, 2))
    gx, gy = np.meshgrid(xs, ys)
    candidates = np.column_stack([gx.ravel(), gy.ravel()])
    inside = shapely.covers(region, shapely.points(candidates))
    return candidates[inside]


def _search_spacing(region, n_extra: int) -> float:
    base = np.sqrt(region.area / n_extra)
    best, best_gap = base, None
    for factor in np.linspace(0.7, 1.4, 141):
        h = base * factor
        gap = abs(len(_lattice(region, h)) - n_extra)
        if best_gap is None or gap < best_gap:
            best, best_gap = h, gap
            if gap == 0:
                break
    return float(best)


def _assign(points: np.ndarray, municipalities: MunicipalityMap) -> np.ndarray:
    membership = np.full(len(points), None, dtype=object)
    geoms = shapely.points(points)
    for mid in municipalities.ids:
        free = membership == None  # noqa: E711
        if not free.any():
            break
        hit = free & shapely.covers(municipalities[mid].geometry, geoms)
        membership[hit] = mid
    return membership


def build_grid(
    municipalities: MunicipalityMap,
    n_extra: int,
    spacing: Optional[float] = None,
) -> PredictionGrid:
    """
    Municipality centroids plus about n_extra lattice points clipped to the region.

    With spacing fixed the lattice is exactly the clipped regular grid at
    that spacing; otherwise the spacing whose clipped count is closest to
    n_extra is searched.
    """
    if n_extra < 0:
        raise ValidationError("n_extra must be >= 0")

    ids = municipalities.ids
    centroids = _centroid_points(municipalities)
    region = municipalities.region

    lattice = np.empty((0, 2))
    if spacing is not None:
        if spacing <= 0:
            raise ValidationError("Lattice spacing must be positive")
        lattice = _lattice(region, spacing)
    elif n_extra > 0:
        spacing = _search_spacing(region, n_extra)
        lattice = _lattice(region, spacing)

    lattice_members = _assign(lattice, municipalities)
    unassigned = lattice_members == None  # noqa: E711
    if unassigned.any():
        nearest = np.argmin(pairwise_distances(lattice[unassigned], centroids), axis=1)
        lattice_members[unassigned] = np.asarray(ids, dtype=object)[nearest]

    points = np.vstack([centroids, lattice])
    membership = np.concatenate([np.asarray(ids, dtype=object), lattice_members]).astype(str)
    kind = np.array(["centroid"] * len(ids) + ["lattice"] * len(lattice))
    alt_by_id = dict(zip(ids, municipalities.altitudes()))
    altitude = np.array([alt_by_id[m] for m in membership], dtype=float)

    logger.info(f"Prediction grid: {len(ids)} centroids + {len(lattice)} lattice points (spacing={spacing})")
    return PredictionGrid(points, membership, kind, altitude, spacing)


def tps_kernel(r: np.ndarray) -> np.ndarray:
    """Planar thin plate Green's function r^2 log(r) / (8 pi), zero at r=0."""
    r2 = np.asarray(r, dtype=float) ** 2
    return 0.5 * xlogy(r2, r2) / (8.0 * np.pi)


@dataclass(frozen=True)
class TpsModel:
    knots: np.ndarray
    weights: np.ndarray
    affine: np.ndarray
    smoothing: float
    center: np.ndarray
    scale: float

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([self.weights, self.affine])

    def _standard(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.center) / self.scale


def tps_fit(points: np.ndarray, values: np.ndarray, smoothing: float = DEFAULT_SMOOTHING, standardize: bool = True) -> TpsModel:
    """
    Penalized thin plate spline through (points, values).

    Solves (K + lambda I) c + T d = z subject to T'c = 0 via the null space
    of T'. With standardize, coordinates are shifted to their mean and
    divided by the bounding-box diagonal before fitting.
    """
    points = np.asarray(points, dtype=float)
    z = np.asarray(values, dtype=float)
    if smoothing < 0:
        raise ValidationError("Smoothing parameter must be >= 0")
    if len(points) < 3 or len(points) != len(z):
        raise ValidationError("TPS needs at least 3 knots with one value each")
    if not np.all(np.isfinite(z)):
        raise DataError("TPS values must be finite")

    if standardize:
        center = points.mean(axis=0)
        scale = float(np.hypot(*np.ptp(points, axis=0))) or 1.0
    else:
        center, scale = np.zeros(2), 1.0
    xy = (points - center) / scale

    n = len(xy)
    T = np.column_stack([np.ones(n), xy])
    Q, R = linalg.qr(T)
    diag = np.abs(np.diag(R[:3]))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise ValidationError("TPS knots are collinear; the affine part is not identifiable")

    A = tps_kernel(pairwise_distances(xy)) + smoothing * np.eye(n)
    Q1, Q2 = Q[:, :3], Q[:, 3:]
    if Q2.shape[1]:
        c = Q2 @ linalg.solve(Q2.T @ A @ Q2, Q2.T @ z, assume_a="sym")
    else:
        c = np.zeros(n)
    d = linalg.solve_triangular(R[:3], Q1.T @ (z - A @ c))
    return TpsModel(points, c, d, smoothing, center, scale)


def tps_predict(model: TpsModel, points: np.ndarray) -> np.ndarray:
    xy = model._standard(points)
    knots = model._standard(model.knots)
    out = tps_kernel(pairwise_distances(xy, knots)) @ model.weights
    out += model.affine[0] + xy @ model.affine[1:]
    return out


def municipality_average(values: np.ndarray, grid: PredictionGrid, ids: Optional[List[str]] = None) -> pd.Series:
    """
    Mean of grid values per municipality.

    A municipality with no member points takes the value of the grid point
    nearest its centroid (recorded in grid.fallback).
    """
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise DataError("Grid values must be finite")
    means = pd.Series(values).groupby(grid.membership).mean()
    if ids is None:
        return means.sort_index()
    out = means.reindex(ids)
    for mid in out.index[out.isna()]:
        if mid not in grid.fallback:
            raise DataError(f"Municipality {mid} has no grid points and no fallback")
        out[mid] = values[grid.fallback[mid]]
    return out


def with_fallbacks(grid: PredictionGrid, municipalities: MunicipalityMap) -> PredictionGrid:
    """Declare nearest-point fallbacks for municipalities without members."""
    present = set(grid.membership)
    fallback = dict(grid.fallback)
    for mid in municipalities.ids:
        if mid not in present:
            c = np.atleast_2d(municipalities[mid].centroid)
            fallback[mid] = int(np.argmin(pairwise_distances(c, grid.points)[0]))
            logger.warning(f"Municipality {mid} has no grid points; using nearest point {fallback[mid]}")
    return PredictionGrid(grid.points, grid.membership, grid.kind, grid.altitude, grid.spacing, fallback)


def interpolate_day(
    station_values: pd.Series,
    station_xy: pd.DataFrame,
    grid: PredictionGrid,
    ids: List[str],
    smoothing: float = DEFAULT_SMOOTHING,
    standardize: bool = True,
) -> pd.Series:
    """
    One day of the quantile surface: tps_fit on station values, tps_predict
    on the grid, then municipality averages.

    Args:
        station_values: Q* per station id for one (tau, date)
        station_xy: planar station coordinates (x, y) indexed by station id
        grid: prediction grid
        ids: municipality ids of the output, in order
    """
    xy = station_xy.loc[station_values.index, ["x", "y"]].to_numpy(dtype=float)
    model = tps_fit(xy, station_values.to_numpy(dtype=float), smoothing, standardize)
    return municipality_average(tps_predict(model, grid.points), grid, ids)


def _select_tau(q_table: pd.DataFrame, tau: float) -> pd.DataFrame:
    if "tau" not in q_table.columns:
        return q_table
    sub = q_table[np.isclose(q_table["tau"], tau)]
    if sub.empty:
        raise DataError(f"No plug-in quantiles for tau={tau}")
    return sub


def quantile_surface(
    q_table: pd.DataFrame,
    station_xy: pd.DataFrame,
    tau: float,
    grid: PredictionGrid,
    ids: List[str],
    smoothing: float = DEFAULT_SMOOTHING,
    standardize: bool = True,
    n_jobs: int = 1,
) -> ExposureSurface:
    """Daily municipality surface for one quantile level; days run in parallel."""
    sub = _select_tau(q_table, tau)
    wide = sub.pivot(index="date", columns="station_id", values="q_star").sort_index()
    if wide.isna().to_numpy().any():
        raise DataError("Plug-in quantiles missing for some stations on some days")

    rows = Parallel(n_jobs=n_jobs)(
        delayed(interpolate_day)(wide.loc[day], station_xy, grid, ids, smoothing, standardize)
        for day in wide.index
    )
    values = pd.DataFrame(np.column_stack(rows), index=ids, columns=pd.DatetimeIndex(wide.index))
    logger.info(f"Interpolated tau={tau} surface: {len(ids)} municipalities x {values.shape[1]} days")
    return ExposureSurface(
        METHOD_GQRM,
        values,
        {"method": METHOD_GQRM, "tau": tau, "smoothing": smoothing, "standardized": standardize, "grid_size": len(grid)},
    )


def day_values(q_table: pd.DataFrame, tau: float, day: date) -> pd.Series:
    sub = _select_tau(q_table, tau)
    rows = sub[pd.to_datetime(sub["date"]) == pd.Timestamp(day)]
    if rows.empty:
        raise DataError(f"No plug-in quantiles on {day}")
    return rows.set_index("station_id")["q_star"].sort_index()
