"""
Case-Crossover Service

Time-stratified case-crossover dataset: record filters, matched control
days, lagged continuous exposure, heatwave links and holiday flags.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from services.domain import SUMMER, ExposureSurface, SeasonWindow, as_date, controls_for
from services.errors import DataError, ValidationError
from services.heatwave import LINK_WINDOW, HeatwaveCalendar

logger = logging.getLogger(__name__)

OUTCOME_MAIN = "main"
OUTCOME_NEGATIVE_CONTROL = "negative-control"
CAUSE_RANGES: Dict[str, Tuple[Tuple[str, str], ...]] = {
    OUTCOME_MAIN: (("I00", "I99"), ("J00", "J99")),
    OUTCOME_NEGATIVE_CONTROL: (("C00", "C97"),),
}
AGE_BANDS: Dict[str, Tuple[float, float]] = {
    "18-64": (18, 65),
    "65-79": (65, 80),
    "80+": (80, np.inf),
    "18+": (18, np.inf),
}
SEXES = ("female", "male")
EXPOSURE_WINDOW = 3


@dataclass(frozen=True)
class MortalityRecord:
    id: str
    date: date
    municipality_id: str
    age: float
    sex: str
    icd10: str


def cause_matches(icd10: str, ranges: Iterable[Tuple[str, str]]) -> bool:
    """Three-character ICD-10 category within any inclusive (lo, hi) range."""
    code = str(icd10).strip().upper().replace(".", "")[:3]
    if len(code) < 3:
        return False
    return any(lo <= code <= hi for lo, hi in ranges)


@dataclass(frozen=True)
class RecordFilter:
    """Inclusion rule for mortality records."""

    outcome: str = OUTCOME_MAIN
    min_age: float = 18
    season: SeasonWindow = SUMMER
    sex: Optional[str] = None
    age_band: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.outcome not in CAUSE_RANGES:
            raise ValidationError(f"Unknown outcome '{self.outcome}'")
        if self.sex is not None and self.sex not in SEXES:
            raise ValidationError(f"Unknown sex '{self.sex}'")

    def mask(self, records: pd.DataFrame) -> pd.Series:
        dates = pd.to_datetime(records["date"])
        keep = records["age"] >= self.min_age
        keep &= records["icd10"].map(lambda c: cause_matches(c, CAUSE_RANGES[self.outcome]))
        keep &= pd.Series([self.season.contains(d.date()) for d in dates], index=records.index)
        if self.sex is not None:
            keep &= records["sex"] == self.sex
        if self.age_band is not None:
            lo, hi = self.age_band
            keep &= (records["age"] >= lo) & (records["age"] < hi)
        return keep


@dataclass(frozen=True)
class HolidayCalendar:
    dates: FrozenSet[date] = field(default_factory=frozenset)

    @classmethod
    def national_summer(cls, years: Sequence[int]) -> "HolidayCalendar":
        """June 2 and August 15 in each year."""
        return cls(frozenset(d for y in years for d in (date(y, 6, 2), date(y, 8, 15))))

    @classmethod
    def from_dates(cls, values: Iterable) -> "HolidayCalendar":
        return cls(frozenset(as_date(v) for v in values))

    def __contains__(self, day) -> bool:
        return as_date(day) in self.dates


def lagged_exposure(
    surface: ExposureSurface,
    municipality: str,
    event_date,
    window: int = EXPOSURE_WINDOW,
    include_event: bool = False,
) -> float:
    """Mean daily maximum over the `window` days before the event (ending on it with include_event)."""
    if window < 1:
        raise ValidationError("Exposure window must be >= 1")
    event = as_date(event_date)
    end = 0 if include_event else 1
    days = pd.DatetimeIndex([event - timedelta(days=k) for k in range(window - 1 + end, end - 1, -1)])
    series = surface.series(municipality)
    missing = days.difference(series.index)
    if len(missing):
        raise DataError(f"Surface {surface.method} does not cover {missing[0].date().isoformat()} for {municipality}")
    return float(series.loc[days].mean())


def lagged_table(surface: ExposureSurface, window: int, include_event: bool) -> pd.DataFrame:
    """Lagged means for every (municipality, date); NaN when a lag day is not covered."""
    full = pd.date_range(surface.dates.min(), surface.dates.max() + pd.Timedelta(days=1), freq="D")
    frame = surface.values.reindex(columns=full).T
    lagged = frame.rolling(window, min_periods=window).mean()
    if not include_event:
        lagged = lagged.shift(1)
    return lagged.T


def linked_flags(calendar: HeatwaveCalendar, window: int) -> pd.DataFrame:
    """1.0 where a heatwave day falls in [d - window, d], NaN where that span is not covered."""
    flags = calendar.flags
    full = pd.date_range(flags.columns.min(), flags.columns.max(), freq="D")
    frame = flags.astype(float).reindex(columns=full).T
    return frame.rolling(window + 1, min_periods=window + 1).max().T


def _lookup(table: pd.DataFrame, municipalities: np.ndarray, dates: pd.DatetimeIndex) -> np.ndarray:
    rows = table.index.get_indexer(municipalities)
    cols = table.columns.get_indexer(dates)
    out = np.full(len(rows), np.nan)
    ok = (rows >= 0) & (cols >= 0)
    out[ok] = table.to_numpy()[rows[ok], cols[ok]]
    return out


def filter_records(records: pd.DataFrame, rule: RecordFilter) -> pd.DataFrame:
    kept = records[rule.mask(records)].copy()
    logger.info(f"Records kept by filter ({rule.outcome}, sex={rule.sex}, band={rule.age_band}): {len(kept)}/{len(records)}")
    return kept


def build_strata(
    records: pd.DataFrame,
    surfaces: Dict[str, ExposureSurface],
    calendars: Sequence[HeatwaveCalendar],
    holidays: HolidayCalendar,
    rule: RecordFilter = RecordFilter(),
    window: int = EXPOSURE_WINDOW,
    include_event: bool = False,
    link_window: int = LINK_WINDOW,
) -> pd.DataFrame:
    """
    One stratum per retained record: the event day plus same-weekday controls.

    Records whose municipality or lag days are not covered by every surface
    and calendar are dropped with a logged reason. Strata are numbered in
    (event date, record id) order and rows within a stratum are in date order.
    """
    kept = filter_records(records, rule)
    if kept.empty:
        raise DataError("No mortality records pass the inclusion filter")

    kept["date"] = pd.to_datetime(kept["date"])
    kept["id"] = kept["id"].astype(str)
    kept["municipality_id"] = kept["municipality_id"].astype(str)
    kept = kept.sort_values(["date", "id"], kind="mergesort").reset_index(drop=True)

    rows = []
    for pos, rec in enumerate(kept.itertuples(index=False)):
        event = rec.date.date()
        for day in sorted([event, *controls_for(event)]):
            rows.append((pos, int(day == event), pd.Timestamp(day), rec.municipality_id, rec.id, rec.age, rec.sex))
    long = pd.DataFrame(rows, columns=["record", "case", "date", "municipality_id", "record_id", "age", "sex"])

    dates = pd.DatetimeIndex(long["date"])
    munis = long["municipality_id"].to_numpy()
    reasons: Counter = Counter()
    bad = np.zeros(len(long), dtype=bool)

    for method in sorted(surfaces):
        values = _lookup(lagged_table(surfaces[method], window, include_event), munis, dates)
        long[f"exposure_{method}"] = values
        missing = np.isnan(values)
        reasons.update(f"no {method} exposure" for _ in long.loc[missing & ~bad, "record"].unique())
        bad |= missing

    for calendar in sorted(calendars, key=lambda c: (c.method, c.spec_id)):
        values = _lookup(linked_flags(calendar, link_window), munis, dates)
        col = f"hw_{calendar.method}_{calendar.spec_id}"
        long[col] = values
        missing = np.isnan(values)
        reasons.update(f"no {calendar.method} heatwave coverage" for _ in long.loc[missing & ~bad, "record"].unique())
        bad |= missing

    long["holiday"] = np.array([d.date() in holidays for d in dates], dtype=int)

    dropped = long.loc[bad, "record"].unique()
    if len(dropped):
        for reason, n in sorted(reasons.items()):
            logger.warning(f"Dropped {n} records: {reason}")
    long = long[~long["record"].isin(dropped)].copy()
    if long.empty:
        raise DataError("Every record was dropped during exposure linkage")

    for col in long.columns:
        if col.startswith("hw_"):
            long[col] = long[col].astype(int)
    long["stratum"] = pd.factorize(long["record"])[0] + 1
    long = long.drop(columns="record")
    ordered = ["stratum", "case", "date", "municipality_id", "record_id", "age", "sex"]
    long = long[ordered + [c for c in long.columns if c not in ordered]].reset_index(drop=True)

    n_strata = long["stratum"].nunique()
    n_controls = int((long["case"] == 0).sum())
    logger.info(f"Case-crossover dataset: {n_strata} strata, {n_controls} controls ({n_controls / n_strata:.3f} per case)")
    return long


def stratum_summary(dataset: pd.DataFrame) -> Dict[str, float]:
    sizes = dataset.groupby("stratum").size()
    return {
        "strata": int(len(sizes)),
        "controls": int((dataset["case"] == 0).sum()),
        "controls_per_case": float((sizes - 1).mean()),
    }


def exposure_columns(dataset: pd.DataFrame) -> List[str]:
    return [c for c in dataset.columns if c.startswith("exposure_")]


def heatwave_columns(dataset: pd.DataFrame, method: Optional[str] = None) -> List[str]:
    prefix = "hw_" if method is None else f"hw_{method}_"
    return [c for c in dataset.columns if c.startswith(prefix)]
