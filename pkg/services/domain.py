"""
Domain Core

Shared domain types, season calendar arithmetic, planar projection and
geometry helpers used by every other service module.
"""

import logging
import math
import zlib
from dataclasses import dataclass, field
from datetime import date, timedelta
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, ndimage
from scipy.spatial.distance import cdist
from shapely.geometry import box
from shapely.geometry.base import BaseGeometry
from shapely.ops import unary_union

from services.errors import DataError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088

METHOD_GQRM = "gqrm"
METHOD_GGPM = "ggpm"
METHOD_REANALYSIS = "reanalysis"


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named module, derived from the root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


# ---------------------------------------------------------------------------
# Calendar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeasonWindow:
    """Inclusive month/day window repeated every year (default May 1 - Sep 30)."""

    start_month: int = 5
    start_day: int = 1
    end_month: int = 9
    end_day: int = 30

    def start(self, year: int) -> date:
        return date(year, self.start_month, self.start_day)

    def end(self, year: int) -> date:
        return date(year, self.end_month, self.end_day)

    def length(self, year: int) -> int:
        return (self.end(year) - self.start(year)).days + 1

    def days(self, year: int) -> List[date]:
        first = self.start(year)
        return [first + timedelta(days=i) for i in range(self.length(year))]

    def contains(self, day: date) -> bool:
        return self.start(day.year) <= day <= self.end(day.year)

    def day_of_season(self, day: date) -> int:
        if not self.contains(day):
            raise ValidationError(f"{day.isoformat()} is outside the season window")
        return (day - self.start(day.year)).days + 1

    def date_for(self, year: int, day_of_season: int) -> date:
        if not 1 <= day_of_season <= self.length(year):
            raise ValidationError(f"day_of_season {day_of_season} outside 1..{self.length(year)}")
        return self.start(year) + timedelta(days=day_of_season - 1)

    def index(self, years: Sequence[int]) -> pd.DatetimeIndex:
        """All season days of the given years, in order."""
        return pd.DatetimeIndex([pd.Timestamp(d) for y in years for d in self.days(y)])


SUMMER = SeasonWindow(6, 1, 8, 31)


@dataclass(frozen=True)
class DayKey:
    """A season day addressed by year and day-of-season index."""

    year: int
    day_of_season: int
    calendar_date: date

    @classmethod
    def from_date(cls, day: date, season: SeasonWindow) -> "DayKey":
        return cls(day.year, season.day_of_season(day), day)

    @classmethod
    def from_index(cls, year: int, day_of_season: int, season: SeasonWindow) -> "DayKey":
        return cls(year, day_of_season, season.date_for(year, day_of_season))

    def year_index(self, first_year: int) -> int:
        """1-based year index t."""
        return self.year - first_year + 1


def as_date(value) -> date:
    return pd.Timestamp(value).date()


def controls_for(event_date) -> List[date]:
    """Same-weekday dates within the event's calendar month and year, event excluded."""
    event = as_date(event_date)
    first = event.replace(day=1)
    offset = (event.isoweekday() - first.isoweekday()) % 7
    day = first + timedelta(days=offset)
    controls = []
    while day.month == event.month:
        if day != event:
            controls.append(day)
        day += timedelta(days=7)
    return controls


# ---------------------------------------------------------------------------
# Projection and geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalProjection:
    """Equirectangular projection to km around a reference point."""

    lon0: float
    lat0: float

    def project(self, lon, lat) -> Tuple[np.ndarray, np.ndarray]:
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        x = EARTH_RADIUS_KM * math.cos(math.radians(self.lat0)) * np.radians(lon - self.lon0)
        y = EARTH_RADIUS_KM * np.radians(lat - self.lat0)
        return x, y

    def unproject(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        lon = self.lon0 + np.degrees(x / (EARTH_RADIUS_KM * math.cos(math.radians(self.lat0))))
        lat = self.lat0 + np.degrees(y / EARTH_RADIUS_KM)
        return lon, lat

    def describe(self) -> str:
        return f"equirectangular(lon0={self.lon0:.6f}, lat0={self.lat0:.6f}, km)"


def overlap_area(polygon: BaseGeometry, cell: Tuple[float, float, float, float]) -> float:
    """Area of the intersection between a polygon and an axis-aligned cell (x0, y0, x1, y1)."""
    if polygon.is_empty or polygon.area <= 0 or not polygon.is_valid:
        raise ValidationError("Degenerate polygon in overlap_area")
    x0, y0, x1, y1 = cell
    if x1 <= x0 or y1 <= y0:
        raise ValidationError(f"Degenerate cell {cell}")
    rect = box(x0, y0, x1, y1)
    if not polygon.intersects(rect):
        return 0.0
    return float(polygon.intersection(rect).area)


def pairwise_distances(a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """Euclidean distances (km) between rows of planar coordinate arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    return cdist(a, b)


CHOLESKY_JITTER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


def stable_cholesky(matrix: np.ndarray, what: str) -> np.ndarray:
    """Lower Cholesky factor, retrying with growing diagonal jitter (relative to the mean variance)."""
    scale = abs(float(np.mean(np.diag(matrix)))) or 1.0
    for level in CHOLESKY_JITTER:
        jitter = scale * level
        if level:
            logger.warning(f"Cholesky failed for {what}; retrying with jitter {jitter:.1e}")
        try:
            return linalg.cholesky(matrix + jitter * np.eye(len(matrix)), lower=True)
        except linalg.LinAlgError:
            continue
    raise NumericalError(f"Covariance for {what} is not positive definite")


def exceedance_runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    """Maximal runs of True as (start, length) pairs."""
    labels, n_runs = ndimage.label(np.asarray(mask, dtype=bool))
    if n_runs == 0:
        return []
    runs = []
    for sl in ndimage.find_objects(labels):
        start, stop = sl[0].start, sl[0].stop
        runs.append((start, stop - start))
    return runs


# ---------------------------------------------------------------------------
# Altitude standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AltitudeScaler:
    """z-score transform fitted on station altitudes, reused at prediction sites."""

    mean: float
    sd: float

    def transform(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.sd


def standardize_altitude(values) -> Tuple[np.ndarray, AltitudeScaler]:
    """Standardize to mean 0 and sample standard deviation 1."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2 or np.unique(arr).size < 2:
        raise ValidationError("standardize_altitude needs at least two distinct values")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("Altitudes must be finite")
    scaler = AltitudeScaler(float(arr.mean()), float(arr.std(ddof=1)))
    return scaler.transform(arr), scaler


# ---------------------------------------------------------------------------
# Registries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StationSeries:
    """Daily maximum temperature record of one station (NaN = missing)."""

    id: str
    x: float
    y: float
    altitude: float
    values: pd.Series

    def __post_init__(self):
        if not math.isfinite(self.altitude):
            raise ValidationError(f"Station {self.id} has non-finite altitude")
        if not isinstance(self.values.index, pd.DatetimeIndex):
            raise ValidationError(f"Station {self.id} values must be indexed by date")

    @property
    def location(self) -> Tuple[float, float]:
        return (self.x, self.y)

    def season(self, year: int, season: SeasonWindow) -> pd.Series:
        """Values over one season window, reindexed so missing days are NaN."""
        return self.values.reindex(season.index([year]))

    def with_values(self, values: pd.Series) -> "StationSeries":
        return StationSeries(self.id, self.x, self.y, self.altitude, values)


@dataclass(frozen=True)
class Municipality:
    id: str
    geometry: BaseGeometry
    altitude: float

    @property
    def area(self) -> float:
        return float(self.geometry.area)

    @property
    def centroid(self) -> Tuple[float, float]:
        c = self.geometry.centroid
        return (float(c.x), float(c.y))


@dataclass(frozen=True)
class MunicipalityMap:
    """Municipality polygons in planar km coordinates, keyed by id."""

    municipalities: Dict[str, Municipality]
    projection: Optional[LocalProjection] = None

    def __post_init__(self):
        for m in self.municipalities.values():
            if m.geometry.is_empty or not m.geometry.is_valid or m.area <= 0:
                raise ValidationError(f"Municipality {m.id} has an invalid polygon")

    @property
    def ids(self) -> List[str]:
        return sorted(self.municipalities)

    def __getitem__(self, key: str) -> Municipality:
        return self.municipalities[key]

    def __len__(self) -> int:
        return len(self.municipalities)

    @cached_property
    def region(self) -> BaseGeometry:
        return unary_union([self.municipalities[k].geometry for k in self.ids])

    def altitudes(self) -> np.ndarray:
        return np.array([self.municipalities[k].altitude for k in self.ids])

    def centroids(self) -> np.ndarray:
        return np.array([self.municipalities[k].centroid for k in self.ids])


@dataclass(frozen=True)
class ExposureSurface:
    """Municipality x day matrix of daily maximum temperature for one method."""

    method: str
    values: pd.DataFrame
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.values.columns, pd.DatetimeIndex):
            raise ValidationError("ExposureSurface columns must be dates")
        arr = self.values.to_numpy(dtype=float)
        if arr.size == 0:
            raise DataError(f"Empty exposure surface for {self.method}")
        if not np.all(np.isfinite(arr)):
            raise DataError(f"Exposure surface {self.method} has missing or non-finite entries")

    @property
    def municipality_ids(self) -> List[str]:
        return list(self.values.index)

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.values.columns

    def series(self, municipality: str) -> pd.Series:
        if municipality not in self.values.index:
            raise DataError(f"Municipality {municipality} missing from surface {self.method}")
        return self.values.loc[municipality]

    def to_long(self) -> pd.DataFrame:
        long = self.values.stack().rename("tmax").reset_index()
        long.columns = ["municipality_id", "date", "tmax"]
        long["method"] = self.method
        return long.sort_values(["municipality_id", "date"], kind="mergesort").reset_index(drop=True)

    @classmethod
    def from_long(cls, frame: pd.DataFrame, method: str, provenance: Optional[dict] = None) -> "ExposureSurface":
        sub = frame[frame["method"] == method] if "method" in frame.columns else frame
        wide = sub.pivot(index="municipality_id", columns="date", values="tmax")
        wide.columns = pd.DatetimeIndex(wide.columns)
        wide.index = wide.index.astype(str)
        return cls(method, wide.sort_index(), dict(provenance or {}))


def concat_dates(parts: Iterable[pd.DataFrame]) -> pd.DataFrame:
    """Column-wise concatenation of per-year municipality x day blocks."""
    wide = pd.concat(list(parts), axis=1)
    return wide.reindex(sorted(wide.columns), axis=1)
