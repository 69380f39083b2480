"""
Heatwave Service

Thresholds per municipality and run-based heatwave-day flags.
"""

import logging
from dataclasses import dataclass, field
from datetime import timedelta
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from services.domain import SUMMER, ExposureSurface, SeasonWindow, as_date, exceedance_runs
from services.errors import DataError, ValidationError

logger = logging.getLogger(__name__)

QUANTILE_LEVELS = (0.90, 0.925, 0.95)
FIXED_THRESHOLD = 35.0
MIN_SUMMER_DAYS = 30
LINK_WINDOW = 3


@dataclass(frozen=True)
class DurationPreset:
    name: str
    min_run: int
    exclude_first: int

    def __post_init__(self):
        if self.min_run < 1 or self.exclude_first < 0 or self.exclude_first >= self.min_run:
            raise ValidationError(f"Invalid duration preset {self.name}: need min_run >= 1 and 0 <= exclude_first < min_run")


PRESETS: Dict[str, DurationPreset] = {
    "base": DurationPreset("base", 1, 0),
    "1daylag": DurationPreset("1daylag", 2, 1),
    "2dayslag": DurationPreset("2dayslag", 3, 2),
}


@dataclass(frozen=True)
class HeatwaveSpec:
    """Threshold rule (empirical quantile or fixed degrees C) with a duration preset."""

    preset: DurationPreset
    quantile: Optional[float] = None
    fixed: Optional[float] = None

    def __post_init__(self):
        if (self.quantile is None) == (self.fixed is None):
            raise ValidationError("A heatwave spec needs exactly one of quantile or fixed")
        if self.quantile is not None and not 0 < self.quantile < 1:
            raise ValidationError("Heatwave quantile must lie in (0, 1)")

    @property
    def spec_id(self) -> str:
        threshold = f"q{self.quantile:g}" if self.quantile is not None else f"fixed{self.fixed:g}"
        return f"{threshold}_{self.preset.name}"

    @classmethod
    def parse(cls, spec_id: str) -> "HeatwaveSpec":
        """Inverse of spec_id, e.g. 'q0.925_1daylag' or 'fixed35_base'."""
        try:
            threshold, preset = spec_id.split("_", 1)
            duration = PRESETS[preset]
        except (ValueError, KeyError) as e:
            raise ValidationError(f"Unknown heatwave spec '{spec_id}'") from e
        if threshold.startswith("q"):
            return cls(duration, quantile=float(threshold[1:]))
        if threshold.startswith("fixed"):
            return cls(duration, fixed=float(threshold[5:]))
        raise ValidationError(f"Unknown heatwave threshold '{threshold}'")


def default_specs() -> List[HeatwaveSpec]:
    specs = []
    for preset in PRESETS.values():
        specs.extend(HeatwaveSpec(preset, quantile=q) for q in QUANTILE_LEVELS)
        specs.append(HeatwaveSpec(preset, fixed=FIXED_THRESHOLD))
    return specs


def _summer_values(series: pd.Series, season: SeasonWindow) -> np.ndarray:
    idx = pd.DatetimeIndex(series.index)
    inside = np.array([season.contains(d.date()) for d in idx], dtype=bool)
    return series.to_numpy(dtype=float)[inside]


def threshold_for(surface: ExposureSurface, municipality: str, spec: HeatwaveSpec, season: SeasonWindow = SUMMER) -> float:
    """Fixed threshold, or the linear-interpolation quantile of the pooled summer series."""
    if spec.fixed is not None:
        return float(spec.fixed)
    values = _summer_values(surface.series(municipality), season)
    if values.size < MIN_SUMMER_DAYS:
        raise DataError(f"Municipality {municipality} has {values.size} summer days; need {MIN_SUMMER_DAYS}")
    return float(np.quantile(values, spec.quantile))


def detect(series, threshold: float, preset: DurationPreset) -> np.ndarray:
    """
    Flag heatwave days in a complete series.

    Exceedance is strict (value > threshold). Runs shorter than min_run are
    dropped and the first exclude_first days of each kept run are unflagged.
    """
    values = np.asarray(series, dtype=float)
    if not np.all(np.isfinite(values)):
        raise DataError("Heatwave detection needs a complete series")
    flags = np.zeros(values.shape, dtype=bool)
    for start, length in exceedance_runs(values > threshold):
        if length >= preset.min_run:
            flags[start + preset.exclude_first:start + length] = True
    return flags


def _segments(dates: pd.DatetimeIndex) -> List[slice]:
    """Contiguous daily blocks; runs never cross a gap."""
    breaks = np.flatnonzero(np.diff(dates.values).astype("timedelta64[D]").astype(int) != 1) + 1
    edges = [0, *breaks.tolist(), len(dates)]
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _detect_municipality(values: np.ndarray, segments: List[slice], threshold: float, preset: DurationPreset) -> np.ndarray:
    flags = np.zeros(values.shape, dtype=bool)
    for seg in segments:
        flags[seg] = detect(values[seg], threshold, preset)
    return flags


@dataclass(frozen=True)
class HeatwaveCalendar:
    """Municipality x date heatwave flags for one method and spec."""

    method: str
    spec: HeatwaveSpec
    flags: pd.DataFrame
    thresholds: pd.Series = field(default_factory=lambda: pd.Series(dtype=float))

    @property
    def spec_id(self) -> str:
        return self.spec.spec_id

    def prevalence(self) -> float:
        return float(self.flags.to_numpy().mean())

    def to_long(self) -> pd.DataFrame:
        long = self.flags.stack().rename("heatwave").reset_index()
        long.columns = ["municipality_id", "date", "heatwave"]
        long["heatwave"] = long["heatwave"].astype(int)
        long["spec_id"] = self.spec_id
        long["method"] = self.method
        return long.sort_values(["municipality_id", "date"], kind="mergesort").reset_index(drop=True)

    @classmethod
    def from_long(cls, frame: pd.DataFrame, method: str, spec_id: str) -> "HeatwaveCalendar":
        sub = frame[(frame["spec_id"] == spec_id) & (frame["method"] == method)]
        if sub.empty:
            raise DataError(f"No heatwave calendar for {method}/{spec_id}")
        wide = sub.pivot(index="municipality_id", columns="date", values="heatwave").astype(bool)
        wide.columns = pd.DatetimeIndex(wide.columns)
        wide.index = wide.index.astype(str)
        return cls(method, HeatwaveSpec.parse(spec_id), wide.sort_index())


def build_calendar(
    surface: ExposureSurface,
    spec: HeatwaveSpec,
    season: SeasonWindow = SUMMER,
    n_jobs: int = 1,
) -> HeatwaveCalendar:
    ids = surface.municipality_ids
    dates = surface.dates
    segments = _segments(dates)
    thresholds = [threshold_for(surface, m, spec, season) for m in ids]
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_detect_municipality)(surface.values.loc[m].to_numpy(dtype=float), segments, thr, spec.preset)
        for m, thr in zip(ids, thresholds)
    )
    flags = pd.DataFrame(np.vstack(rows), index=ids, columns=dates)
    calendar = HeatwaveCalendar(surface.method, spec, flags, pd.Series(thresholds, index=ids))
    logger.info(f"Heatwave calendar {surface.method}/{spec.spec_id}: prevalence {calendar.prevalence():.4f}")
    return calendar


def link_exposure(calendar: HeatwaveCalendar, municipality: str, event_date, window: int = LINK_WINDOW) -> bool:
    """True when a heatwave day falls on the event date or one of the `window` preceding dates."""
    event = as_date(event_date)
    if municipality not in calendar.flags.index:
        raise DataError(f"Municipality {municipality} missing from heatwave calendar {calendar.spec_id}")
    days = pd.DatetimeIndex([event - timedelta(days=k) for k in range(window, -1, -1)])
    missing = days.difference(calendar.flags.columns)
    if len(missing):
        raise DataError(f"Heatwave calendar {calendar.spec_id} does not cover {missing[0].date().isoformat()}")
    return bool(calendar.flags.loc[municipality, days].any())
