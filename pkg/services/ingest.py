"""
Ingest Service

Station quality control (selection rules, spline imputation) and the
gridded-reanalysis path: hourly to daily maxima and area-weighted
aggregation to municipalities.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.interpolate import CubicSpline, make_smoothing_spline

from services.domain import (
    METHOD_REANALYSIS,
    ExposureSurface,
    MunicipalityMap,
    SeasonWindow,
    StationSeries,
    exceedance_runs,
    overlap_area,
)
from services.errors import DataError, ValidationError

logger = logging.getLogger(__name__)

MAX_CONSECUTIVE_MISSING = "max-consecutive-missing"
MAX_MISSING_FRACTION = "max-missing-fraction"


@dataclass(frozen=True)
class SelectionRule:
    """Per-season missing-data rule a station must satisfy in every year."""

    mode: str
    limit: float

    def __post_init__(self):
        if self.mode not in (MAX_CONSECUTIVE_MISSING, MAX_MISSING_FRACTION):
            raise ValidationError(f"Unknown selection mode '{self.mode}'")
        if self.limit <= 0:
            raise ValidationError("Selection limit must be positive")
        if self.mode == MAX_MISSING_FRACTION and not 0 < self.limit < 1:
            raise ValidationError("Missing fraction limit must lie in (0, 1)")

    def accepts(self, missing: np.ndarray) -> bool:
        if self.mode == MAX_CONSECUTIVE_MISSING:
            longest = max((length for _, length in exceedance_runs(missing)), default=0)
            return longest <= self.limit
        return float(np.mean(missing)) < self.limit


def select_stations(
    stations: Sequence[StationSeries],
    rule: SelectionRule,
    season: SeasonWindow,
    years: Sequence[int],
) -> List[StationSeries]:
    """
    Keep the stations whose missing pattern satisfies the rule in every season.

    Runs are evaluated within each season independently.
    """
    selected = []
    for station in stations:
        ok = all(rule.accepts(station.season(year, season).isna().to_numpy()) for year in years)
        if ok:
            selected.append(station)
        else:
            logger.debug(f"Station {station.id} rejected by {rule.mode}({rule.limit})")

    if not selected:
        raise DataError(f"No station satisfies {rule.mode}({rule.limit})")

    logger.info(f"Selected {len(selected)}/{len(stations)} stations under {rule.mode}({rule.limit})")
    return selected


def impute_spline(station: StationSeries, season: SeasonWindow, years: Sequence[int]) -> StationSeries:
    """
    Fill missing days with a cubic smoothing spline over the day-of-season index.

    One spline per (station, year); the smoothing parameter is chosen by
    generalized cross-validation. Observed values are left untouched.
    """
    parts = []
    for year in years:
        values = station.season(year, season)
        missing = values.isna().to_numpy()
        if not missing.any():
            parts.append(values)
            continue

        ell = np.arange(1, len(values) + 1, dtype=float)
        observed = ~missing
        n_obs = int(observed.sum())
        if n_obs < 4:
            raise DataError(f"Station {station.id} has only {n_obs} observations in {year}")

        if n_obs >= 5:
            spline = make_smoothing_spline(ell[observed], values.to_numpy()[observed])
        else:
            spline = CubicSpline(ell[observed], values.to_numpy()[observed], bc_type="natural")

        filled = values.copy()
        filled.iloc[np.flatnonzero(missing)] = spline(ell[missing])
        parts.append(filled)
        logger.debug(f"Imputed {int(missing.sum())} days for station {station.id} in {year}")

    return station.with_values(pd.concat(parts))


def daily_max_from_hourly(hourly: pd.DataFrame) -> pd.DataFrame:
    """
    Daily maxima per cell from hourly rows (cell_id, date, hour, temp).

    The day boundary is the UTC calendar day of the input rows.
    """
    counts = hourly.groupby(["cell_id", "date"])["hour"].nunique()
    incomplete = counts[counts != 24]
    if not incomplete.empty:
        days = [f"{cell}@{pd.Timestamp(day).date().isoformat()}" for cell, day in incomplete.index[:20]]
        raise DataError("Missing hourly values", detail=", ".join(days))

    daily = hourly.groupby(["cell_id", "date"], sort=True)["temp"].max().rename("tmax").reset_index()
    return daily


@dataclass(frozen=True)
class ReanalysisGrid:
    """Rectangular reanalysis cells (planar km bounds) with daily maxima."""

    cells: pd.DataFrame
    values: pd.DataFrame
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        missing = set(self.cells.index) ^ set(self.values.index)
        if missing:
            raise ValidationError(f"Cell registry and values disagree on {sorted(missing)[:5]}")
        if self.values.isna().to_numpy().any():
            raise DataError("Reanalysis daily maxima contain missing values")
        _check_non_overlapping(self.cells)

    @property
    def bounds(self) -> np.ndarray:
        return self.cells.loc[self.values.index, ["x0", "y0", "x1", "y1"]].to_numpy(dtype=float)

    @property
    def centers(self) -> np.ndarray:
        b = self.bounds
        return np.column_stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2])


def _check_non_overlapping(cells: pd.DataFrame) -> None:
    b = cells[["x0", "y0", "x1", "y1"]].to_numpy(dtype=float)
    dx = np.minimum(b[:, None, 2], b[None, :, 2]) - np.maximum(b[:, None, 0], b[None, :, 0])
    dy = np.minimum(b[:, None, 3], b[None, :, 3]) - np.maximum(b[:, None, 1], b[None, :, 1])
    shared = (dx > 1e-9) & (dy > 1e-9)
    np.fill_diagonal(shared, False)
    if shared.any():
        i, j = np.argwhere(shared)[0]
        raise ValidationError(f"Reanalysis cells {cells.index[i]} and {cells.index[j]} overlap")


def _overlap_row(geometry, bounds: np.ndarray) -> np.ndarray:
    minx, miny, maxx, maxy = geometry.bounds
    row = np.zeros(len(bounds))
    candidates = np.flatnonzero(
        (bounds[:, 0] < maxx) & (bounds[:, 2] > minx) & (bounds[:, 1] < maxy) & (bounds[:, 3] > miny)
    )
    for k in candidates:
        row[k] = overlap_area(geometry, tuple(bounds[k]))
    return row


def overlap_weights(grid: ReanalysisGrid, municipalities: MunicipalityMap, n_jobs: int = 1) -> pd.DataFrame:
    """Municipality x cell overlap areas (km^2)."""
    bounds = grid.bounds
    ids = municipalities.ids
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_overlap_row)(municipalities[m].geometry, bounds) for m in ids
    )
    return pd.DataFrame(np.vstack(rows), index=ids, columns=grid.values.index)


def aggregate_cells(grid: ReanalysisGrid, municipalities: MunicipalityMap, n_jobs: int = 1) -> ExposureSurface:
    """
    Area-weighted municipality averages of the cell field.

    The normalizing area is the sum of overlaps, so weights always sum to one.
    """
    areas = overlap_weights(grid, municipalities, n_jobs=n_jobs)
    totals = areas.sum(axis=1)
    empty = totals.index[totals <= 0].tolist()
    if empty:
        raise DataError(f"Municipalities with no reanalysis overlap: {empty[:10]}")

    weights = areas.div(totals, axis=0)
    values = weights.to_numpy() @ grid.values.to_numpy(dtype=float)
    frame = pd.DataFrame(values, index=areas.index, columns=pd.DatetimeIndex(grid.values.columns))

    logger.info(f"Aggregated {len(grid.values)} cells to {len(frame)} municipalities")
    return ExposureSurface(
        METHOD_REANALYSIS,
        frame,
        {"method": METHOD_REANALYSIS, "day_boundary": "UTC", **grid.metadata},
    )
