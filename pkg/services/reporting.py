"""
Reporting Service

Summary tables reported alongside the models: summer temperature by year,
heatwave-day counts, MMTs and the holiday effect.
"""

import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from services.domain import SUMMER, ExposureSurface, SeasonWindow
from services.epi import RiskCurve
from services.errors import DataError
from services.heatwave import HeatwaveCalendar

logger = logging.getLogger(__name__)

RR_PERCENTILES = (0.50, 0.75, 0.90, 0.95, 0.99)


def _summer_columns(columns: pd.DatetimeIndex, season: SeasonWindow) -> np.ndarray:
    return np.array([season.contains(d.date()) for d in columns], dtype=bool)


def yearly_summary(
    surfaces: Iterable[ExposureSurface],
    groups: Optional[Mapping[str, str]] = None,
    season: SeasonWindow = SUMMER,
) -> pd.DataFrame:
    """
    Mean summer daily maximum per method and year.

    With `groups` (municipality id -> group label) one extra row per group is
    emitted next to the region-wide 'all' row.
    """
    rows = []
    for surface in surfaces:
        inside = _summer_columns(surface.dates, season)
        values = surface.values.loc[:, inside]
        if values.empty:
            raise DataError(f"Surface {surface.method} has no summer days")
        years = values.columns.year
        labels = {"all": list(values.index)}
        if groups:
            for mid, label in groups.items():
                if mid in values.index:
                    labels.setdefault(str(label), []).append(mid)
        for year in sorted(set(years)):
            block = values.loc[:, years == year]
            for label, members in labels.items():
                rows.append({
                    "method": surface.method,
                    "year": int(year),
                    "group": label,
                    "mean_tmax": float(block.loc[members].to_numpy().mean()),
                })
    return pd.DataFrame(rows).sort_values(["method", "group", "year"], kind="mergesort").reset_index(drop=True)


def heatwave_day_counts(calendars: Iterable[HeatwaveCalendar], season: SeasonWindow = SUMMER) -> pd.DataFrame:
    """Average number of summer heatwave days per municipality, per method, spec and year."""
    rows = []
    for cal in calendars:
        inside = _summer_columns(cal.flags.columns, season)
        flags = cal.flags.loc[:, inside]
        years = flags.columns.year
        for year in sorted(set(years)):
            per_muni = flags.loc[:, years == year].sum(axis=1)
            rows.append({
                "method": cal.method,
                "spec_id": cal.spec_id,
                "year": int(year),
                "mean_days": float(per_muni.mean()),
                "max_days": int(per_muni.max()),
            })
    return pd.DataFrame(rows).sort_values(["method", "spec_id", "year"], kind="mergesort").reset_index(drop=True)


def mmt_table(curves: Mapping[str, RiskCurve]) -> pd.DataFrame:
    """MMT per labelled curve; labels are e.g. 'reanalysis', 'ggpm', 'gqrm:0.9'."""
    rows = []
    for label in sorted(curves):
        curve = curves[label]
        method, _, tau = label.partition(":")
        rows.append({"model": label, "method": method, "tau": float(tau) if tau else np.nan, "mmt": curve.mmt})
    return pd.DataFrame(rows)


def holiday_effect(summary: pd.DataFrame, parameter: str = "beta1_holiday") -> Dict[str, float]:
    """Percent change in mortality on holidays, (exp(beta1) - 1) * 100 with its interval."""
    row = summary[summary["parameter"] == parameter]
    if row.empty:
        raise DataError(f"Coefficient summary has no {parameter}")
    row = row.iloc[0]
    return {
        "percent": _percent_change(row["median"]),
        "percent_q025": _percent_change(row["q025"]),
        "percent_q975": _percent_change(row["q975"]),
    }


def _percent_change(log_rr: float) -> float:
    return float((np.exp(log_rr) - 1.0) * 100.0)


def rr_table(curve: RiskCurve, exposures: Sequence[float], percentiles: Sequence[float] = RR_PERCENTILES) -> List[Dict[str, float]]:
    """Relative risk (vs the MMT) at percentiles of the observed exposure."""
    values = np.quantile(np.asarray(exposures, dtype=float), percentiles)
    out = []
    for p, x in zip(percentiles, values):
        out.append({
            "percentile": float(p),
            "exposure": float(x),
            "rr": float(np.exp(np.interp(x, curve.bin_mid, curve.logrr_med))),
            "rr_q025": float(np.exp(np.interp(x, curve.bin_mid, curve.logrr_lo))),
            "rr_q975": float(np.exp(np.interp(x, curve.bin_mid, curve.logrr_hi))),
        })
    return out
