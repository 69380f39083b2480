"""
Data Loader Service

Reads the study inputs from local files (GeoJSON polygons, station, reanalysis
and mortality CSVs) and projects every coordinate into one planar frame.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import shapely
from shapely.geometry import shape

from services.casecrossover import HolidayCalendar
from services.domain import (
    ExposureSurface,
    LocalProjection,
    Municipality,
    MunicipalityMap,
    SeasonWindow,
    StationSeries,
)
from services.errors import DataError, ValidationError
from services.ingest import ReanalysisGrid, daily_max_from_hourly

logger = logging.getLogger(__name__)

STATION_COLUMNS = ("station_id", "lon", "lat", "alt_m", "date", "tmax")
CELL_COLUMNS = ("cell_id", "lon_min", "lat_min", "lon_max", "lat_max", "date")
MORTALITY_COLUMNS = ("id", "date", "municipality_id", "age", "sex", "icd10")

# Parsed inputs keyed by (kind, path, mtime, size); a file edit invalidates its entry
_cache: Dict[Tuple[str, str, int, int], object] = {}


def clear_cache() -> None:
    _cache.clear()


def _key(kind: str, path: Path) -> Tuple[str, str, int, int]:
    stat = path.stat()
    return (kind, str(path.resolve()), stat.st_mtime_ns, stat.st_size)


def _read_csv(path: Path, required: Iterable[str], what: str) -> pd.DataFrame:
    if not path.exists():
        raise DataError(f"{what} file not found: {path}")
    frame = pd.read_csv(path, dtype={"station_id": str, "cell_id": str, "municipality_id": str, "id": str})
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f"{what} file {path.name} lacks columns {missing}")
    if "date" in frame.columns:
        frame["date"] = pd.to_datetime(frame["date"])
    return frame


class DataLoader:
    """
    Local-file client for the study inputs.

    Parsed files are cached in-process; pass force_refresh to re-read.
    """

    def __init__(self, projection: Optional[LocalProjection] = None):
        self.projection = projection

    def _cached(self, kind: str, path: Path, force_refresh: bool, reader):
        key = _key(kind, path)
        if not force_refresh and key in _cache:
            logger.debug(f"Returning cached {kind} for {path.name}")
            return _cache[key]
        value = reader()
        _cache[key] = value
        return value

    def _require_projection(self) -> LocalProjection:
        if self.projection is None:
            raise ValidationError("Load the municipality polygons first to fix the projection")
        return self.projection

    def _project_geometry(self, geometry):
        proj = self._require_projection()
        return shapely.transform(geometry, lambda c: np.column_stack(proj.project(c[:, 0], c[:, 1])))

    def load_municipalities(self, path, force_refresh: bool = False) -> MunicipalityMap:
        """
        Municipality polygons from a GeoJSON FeatureCollection with `id` and `alt_m` properties.

        The projection is centred on the bounding box of the whole layer
        unless one was given to the loader.
        """
        path = Path(path)
        if not path.exists():
            raise DataError(f"Polygon file not found: {path}")

        def read() -> MunicipalityMap:
            try:
                doc = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise DataError(f"Malformed GeoJSON {path.name}: {e}") from e
            features = doc.get("features") or []
            if not features:
                raise DataError(f"No features in {path.name}")

            raw = []
            for feat in features:
                props = feat.get("properties") or {}
                if "id" not in props or "alt_m" not in props:
                    raise DataError(f"Feature without id/alt_m in {path.name}")
                geom = shape(feat["geometry"])
                if not geom.is_valid:
                    raise DataError(f"Municipality {props['id']} has an invalid polygon: {shapely.is_valid_reason(geom)}")
                if geom.geom_type not in ("Polygon", "MultiPolygon") or geom.is_empty or geom.area <= 0:
                    raise DataError(f"Municipality {props['id']} has a degenerate geometry ({geom.geom_type})")
                raw.append((str(props["id"]), geom, float(props["alt_m"])))

            if self.projection is None:
                minx, miny, maxx, maxy = shapely.total_bounds([g for _, g, _ in raw])
                self.projection = LocalProjection((minx + maxx) / 2, (miny + maxy) / 2)

            municipalities = {}
            for mid, geom, alt in raw:
                if mid in municipalities:
                    raise DataError(f"Duplicate municipality id {mid}")
                municipalities[mid] = Municipality(mid, self._project_geometry(geom), alt)
            logger.info(f"Loaded {len(municipalities)} municipalities from {path.name} ({self.projection.describe()})")
            return MunicipalityMap(municipalities, self.projection)

        kind = f"polygons:{self.projection.describe()}" if self.projection else "polygons:auto"
        result = self._cached(kind, path, force_refresh, read)
        self.projection = result.projection
        return result

    def load_stations(self, path, force_refresh: bool = False) -> List[StationSeries]:
        """Station daily maxima; blank tmax cells are missing days."""
        path = Path(path)
        proj = self._require_projection()

        def read() -> List[StationSeries]:
            frame = _read_csv(path, STATION_COLUMNS, "Station")
            stations = []
            for sid, group in frame.groupby("station_id", sort=True):
                meta = group[["lon", "lat", "alt_m"]].drop_duplicates()
                if len(meta) != 1:
                    raise DataError(f"Station {sid} has inconsistent coordinates or altitude")
                if group["date"].duplicated().any():
                    raise DataError(f"Station {sid} has duplicate dates")
                x, y = proj.project(meta["lon"].iloc[0], meta["lat"].iloc[0])
                values = pd.Series(
                    group["tmax"].to_numpy(dtype=float),
                    index=pd.DatetimeIndex(group["date"]),
                    name=sid,
                ).sort_index()
                stations.append(StationSeries(sid, float(x), float(y), float(meta["alt_m"].iloc[0]), values))
            logger.info(f"Loaded {len(stations)} stations from {path.name}")
            return stations

        return self._cached(f"stations:{proj.describe()}", path, force_refresh, read)

    def load_reanalysis(self, path, pre_aggregated: bool = False, force_refresh: bool = False) -> ReanalysisGrid:
        """
        Reanalysis cells with daily maxima.

        Hourly input (`hour`, `temp` columns) is reduced to daily maxima; with
        pre_aggregated the file already carries a `tmax` column.
        """
        path = Path(path)
        proj = self._require_projection()

        def read() -> ReanalysisGrid:
            value_cols = ("tmax",) if pre_aggregated else ("hour", "temp")
            frame = _read_csv(path, CELL_COLUMNS + value_cols, "Reanalysis")
            cells = frame[["cell_id", "lon_min", "lat_min", "lon_max", "lat_max"]].drop_duplicates()
            if cells["cell_id"].duplicated().any():
                raise DataError("Reanalysis cells with inconsistent bounds")
            x0, y0 = proj.project(cells["lon_min"], cells["lat_min"])
            x1, y1 = proj.project(cells["lon_max"], cells["lat_max"])
            registry = pd.DataFrame({"x0": x0, "y0": y0, "x1": x1, "y1": y1}, index=cells["cell_id"].to_numpy())

            daily = frame[["cell_id", "date", "tmax"]] if pre_aggregated else daily_max_from_hourly(frame)
            if daily.duplicated(["cell_id", "date"]).any():
                raise DataError("Duplicate (cell, date) rows in reanalysis input")
            values = daily.pivot(index="cell_id", columns="date", values="tmax")
            values.columns = pd.DatetimeIndex(values.columns)
            metadata = {"source": path.name, "pre_aggregated": pre_aggregated}
            logger.info(f"Loaded {len(values)} reanalysis cells x {values.shape[1]} days from {path.name}")
            return ReanalysisGrid(registry.loc[values.index], values, metadata)

        return self._cached(f"reanalysis:{pre_aggregated}:{proj.describe()}", path, force_refresh, read)

    def load_mortality(self, path, force_refresh: bool = False) -> pd.DataFrame:
        path = Path(path)

        def read() -> pd.DataFrame:
            frame = _read_csv(path, MORTALITY_COLUMNS, "Mortality")
            if frame["id"].duplicated().any():
                raise DataError("Duplicate mortality record ids")
            frame["age"] = pd.to_numeric(frame["age"], errors="coerce")
            bad = frame["age"].isna() | frame["date"].isna()
            if bad.any():
                logger.warning(f"Dropping {int(bad.sum())} mortality records with missing age or date")
                frame = frame[~bad].copy()
            frame["sex"] = frame["sex"].astype(str).str.lower()
            logger.info(f"Loaded {len(frame)} mortality records from {path.name}")
            return frame.reset_index(drop=True)

        return self._cached("mortality", path, force_refresh, read).copy()

    def load_holidays(self, path) -> HolidayCalendar:
        frame = _read_csv(Path(path), ("date",), "Holiday")
        return HolidayCalendar.from_dates(frame["date"])


def load_surface(path, method: Optional[str] = None) -> ExposureSurface:
    """Exposure surface from its long CSV (municipality_id, date, tmax, method)."""
    frame = _read_csv(Path(path), ("municipality_id", "date", "tmax"), "Surface")
    if method is None:
        methods = frame["method"].unique() if "method" in frame.columns else []
        if len(methods) != 1:
            raise DataError(f"Surface file {Path(path).name} needs exactly one method, found {list(methods)}")
        method = str(methods[0])
    return ExposureSurface.from_long(frame, method)


def station_table(stations: Sequence[StationSeries], season: SeasonWindow, years: Sequence[int]) -> pd.DataFrame:
    """Season days of the given years as a long table in planar coordinates."""
    frames = []
    for st in stations:
        values = pd.concat([st.season(year, season) for year in years])
        frames.append(pd.DataFrame({
            "station_id": st.id,
            "x": st.x,
            "y": st.y,
            "alt_m": st.altitude,
            "date": values.index,
            "tmax": values.to_numpy(dtype=float),
        }))
    return pd.concat(frames, ignore_index=True)


def stations_from_table(frame: pd.DataFrame) -> List[StationSeries]:
    """Inverse of station_table."""
    stations = []
    for sid, group in frame.groupby("station_id", sort=True):
        first = group.iloc[0]
        values = pd.Series(group["tmax"].to_numpy(dtype=float), index=pd.DatetimeIndex(pd.to_datetime(group["date"])))
        stations.append(StationSeries(str(sid), float(first["x"]), float(first["y"]), float(first["alt_m"]), values.sort_index()))
    return stations


def load_station_table(path) -> List[StationSeries]:
    return stations_from_table(_read_csv(Path(path), ("station_id", "x", "y", "alt_m", "date", "tmax"), "Station table"))
