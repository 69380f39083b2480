"""Shared fixtures: small planar regions, station records and a fast config."""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from shapely.geometry import box

from services.domain import LocalProjection, Municipality, MunicipalityMap, StationSeries


def box_map(n_cols: int = 3, n_rows: int = 2, size: float = 10.0) -> MunicipalityMap:
    """Municipalities as size x size km boxes; ids 'm<row><col>'."""
    municipalities = {}
    for r in range(n_rows):
        for c in range(n_cols):
            mid = f"m{r}{c}"
            municipalities[mid] = Municipality(mid, box(c * size, r * size, (c + 1) * size, (r + 1) * size), 100.0 * (r + c))
    return MunicipalityMap(municipalities, LocalProjection(11.0, 46.0))


def make_station(sid: str, values, start: str = "2019-05-01", x: float = 0.0, y: float = 0.0, altitude: float = 100.0) -> StationSeries:
    index = pd.date_range(start, periods=len(values), freq="D")
    return StationSeries(sid, x, y, altitude, pd.Series(np.asarray(values, dtype=float), index=index))


@pytest.fixture
def municipalities() -> MunicipalityMap:
    return box_map()


@pytest.fixture
def small_config() -> dict:
    """Pipeline settings small enough for an end-to-end run."""
    return {
        "seed": 11,
        "gqrm": {"taus": [0.5, 0.9], "n_burn": 60, "n_keep": 60, "checkpoint_every": 0},
        "surface": {"gqrm_extra_points": 20, "ggpm_extra_points": 10},
        "ggpm": {"max_iter": 200},
        "heatwave": {"specs": ["q0.9_base", "q0.9_1daylag"]},
        "epi": {"n_bins": 15, "tau_grid_size": 4, "stratified": False},
        "synthetic": {"n_cols": 3, "n_rows": 2, "n_stations": 6, "years": [2019, 2020], "population": 400_000},
    }


@pytest.fixture
def config_file(tmp_path: Path, small_config: dict) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(small_config), encoding="utf-8")
    return path
