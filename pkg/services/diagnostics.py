"""
Diagnostics Service

Quantile-quantile comparison of station records against the nearest
reanalysis cell.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from services.domain import StationSeries, pairwise_distances
from services.errors import DataError
from services.ingest import ReanalysisGrid

logger = logging.getLogger(__name__)

QQ_LEVELS = tuple(round(0.01 * i, 2) for i in range(1, 100))
UPPER_TAIL = 0.9


def nearest_cells(stations: Sequence[StationSeries], grid: ReanalysisGrid) -> pd.DataFrame:
    """Nearest cell centre to each station, with the distance in km."""
    xy = np.array([st.location for st in stations], dtype=float)
    d = pairwise_distances(xy, grid.centers)
    idx = np.argmin(d, axis=1)
    return pd.DataFrame({
        "station_id": [st.id for st in stations],
        "cell_id": np.asarray(grid.values.index)[idx],
        "distance_km": d[np.arange(len(stations)), idx],
    })


def diagnose_qq(
    stations: Sequence[StationSeries],
    grid: ReanalysisGrid,
    levels: Sequence[float] = QQ_LEVELS,
    min_days: int = 30,
) -> pd.DataFrame:
    """
    Matched empirical quantiles of station and nearest-cell daily maxima.

    Quantiles are taken over the dates both sources cover. Stations with
    fewer than min_days common dates are skipped; if none remain, DataError.
    """
    pairs = nearest_cells(stations, grid)
    by_id = {st.id: st for st in stations}
    q = np.asarray(levels, dtype=float)
    frames: List[pd.DataFrame] = []
    for row in pairs.itertuples(index=False):
        station = by_id[row.station_id].values.dropna()
        cell = grid.values.loc[row.cell_id]
        common = station.index.intersection(pd.DatetimeIndex(cell.index))
        if len(common) < min_days:
            logger.warning(f"Station {row.station_id}: {len(common)} days overlap cell {row.cell_id}, skipped")
            continue
        sq = np.quantile(station.loc[common].to_numpy(dtype=float), q)
        cq = np.quantile(cell.loc[common].to_numpy(dtype=float), q)
        frames.append(pd.DataFrame({
            "station_id": row.station_id,
            "cell_id": row.cell_id,
            "distance_km": row.distance_km,
            "n_days": len(common),
            "level": q,
            "station_q": sq,
            "cell_q": cq,
            "diff": cq - sq,
        }))

    if not frames:
        raise DataError("Stations and reanalysis cells share no common period")
    table = pd.concat(frames, ignore_index=True)
    logger.info(f"QQ table for {table['station_id'].nunique()} stations over {len(q)} levels")
    return table


def qq_summary(table: pd.DataFrame, upper: float = UPPER_TAIL) -> pd.DataFrame:
    """Per-station mean cell-minus-station difference overall and in the upper tail."""
    tail = table[table["level"] >= upper]
    out = pd.DataFrame({
        "mean_diff": table.groupby("station_id")["diff"].mean(),
        "upper_tail_diff": tail.groupby("station_id")["diff"].mean(),
    })
    return out.reset_index()


def underestimates_upper_tail(table: pd.DataFrame, upper: float = UPPER_TAIL, tolerance: Optional[float] = 0.0) -> bool:
    """True when the reanalysis sits below the stations on average above `upper`."""
    tail = table[table["level"] >= upper]
    return bool(tail["diff"].mean() < -abs(tolerance or 0.0))
