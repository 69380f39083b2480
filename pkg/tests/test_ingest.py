import numpy as np
import pandas as pd
import pytest
from shapely.geometry import box

from conftest import box_map, make_station
from services.domain import Municipality, MunicipalityMap, SeasonWindow
from services.errors import DataError, ValidationError
from services.ingest import (
    MAX_CONSECUTIVE_MISSING,
    MAX_MISSING_FRACTION,
    ReanalysisGrid,
    SelectionRule,
    aggregate_cells,
    daily_max_from_hourly,
    impute_spline,
    select_stations,
)

SEASON = SeasonWindow()


def _season_station(sid: str, missing_days):
    values = np.full(SEASON.length(2019), 25.0)
    values[list(missing_days)] = np.nan
    return make_station(sid, values)


def _grid(cells: dict, values: dict) -> ReanalysisGrid:
    frame = pd.DataFrame.from_dict(cells, orient="index", columns=["x0", "y0", "x1", "y1"])
    dates = pd.DatetimeIndex(["2019-06-01", "2019-06-02"])
    return ReanalysisGrid(frame, pd.DataFrame.from_dict(values, orient="index", columns=dates))


def test_consecutive_rule_rejects_eight_day_gap():
    rule = SelectionRule(MAX_CONSECUTIVE_MISSING, 7)
    seven = _season_station("ok", range(40, 47))
    eight = _season_station("gap", range(40, 48))
    selected = select_stations([seven, eight], rule, SEASON, [2019])
    assert [s.id for s in selected] == ["ok"]


def test_fraction_rule_is_strict():
    rule = SelectionRule(MAX_MISSING_FRACTION, 0.20)
    below = _season_station("below", range(0, 153, 5)[:29])  # 29/153 = 19%
    above = _season_station("above", range(0, 153, 4)[:31])  # 31/153 = 20.3%
    selected = select_stations([below, above], rule, SEASON, [2019])
    assert [s.id for s in selected] == ["below"]


def test_selection_counts_days_outside_the_record_as_missing():
    short = make_station("short", np.full(100, 25.0))
    with pytest.raises(DataError):
        select_stations([short], SelectionRule(MAX_CONSECUTIVE_MISSING, 7), SEASON, [2019])


def test_selection_rule_validation():
    with pytest.raises(ValidationError):
        SelectionRule("max-gap", 3)
    with pytest.raises(ValidationError):
        SelectionRule(MAX_MISSING_FRACTION, 1.5)


def test_impute_spline_fills_only_missing_days():
    ell = np.arange(1, SEASON.length(2019) + 1)
    truth = 20.0 + 0.05 * ell
    values = truth.copy()
    gaps = [10, 11, 12, 80, 120]
    values[gaps] = np.nan
    station = make_station("s", values)
    filled = impute_spline(station, SEASON, [2019]).values.to_numpy()
    assert not np.isnan(filled).any()
    observed = np.setdiff1d(np.arange(len(values)), gaps)
    np.testing.assert_array_equal(filled[observed], values[observed])
    np.testing.assert_allclose(filled[gaps], truth[gaps], atol=1e-3)


def test_impute_spline_needs_four_observations():
    values = np.full(SEASON.length(2019), np.nan)
    values[:3] = 20.0
    with pytest.raises(DataError):
        impute_spline(make_station("s", values), SEASON, [2019])


def test_daily_max_from_hourly():
    day = pd.Timestamp("2019-07-01")
    hours = np.arange(24)
    temps = 15.0 + 10.0 * np.sin(np.pi * hours / 23.0)
    hourly = pd.DataFrame({"cell_id": "c1", "date": day, "hour": hours, "temp": temps})
    daily = daily_max_from_hourly(hourly)
    assert len(daily) == 1
    assert daily["tmax"].iloc[0] == pytest.approx(temps.max())

    with pytest.raises(DataError, match="Missing hourly values"):
        daily_max_from_hourly(hourly.iloc[:-1])


def test_area_weighting_quarter_overlap():
    munis = MunicipalityMap({"m": Municipality("m", box(0, 0, 10, 10), 0.0)})
    grid = _grid(
        {"a": (0.0, 0.0, 2.5, 10.0), "b": (2.5, 0.0, 10.0, 10.0), "far": (20.0, 0.0, 30.0, 10.0)},
        {"a": [20.0, 10.0], "b": [24.0, 30.0], "far": [99.0, 99.0]},
    )
    surface = aggregate_cells(grid, munis)
    np.testing.assert_allclose(surface.values.loc["m"].to_numpy(), [23.0, 25.0])
    assert surface.method == "reanalysis"


def test_area_weighting_ignores_cell_order():
    munis = box_map()
    cells = {f"c{i}{j}": (i * 7.5, j * 10.0, (i + 1) * 7.5, (j + 1) * 10.0) for i in range(4) for j in range(2)}
    rng = np.random.default_rng(0)
    values = {k: list(rng.normal(25, 3, size=2)) for k in cells}
    forward = aggregate_cells(_grid(cells, values), munis).values
    reversed_cells = dict(reversed(list(cells.items())))
    backward = aggregate_cells(_grid(reversed_cells, values), munis).values
    pd.testing.assert_frame_equal(forward, backward)


def test_constant_field_is_preserved():
    munis = box_map()
    cells = {f"c{i}{j}": (i * 7.5, j * 10.0, (i + 1) * 7.5, (j + 1) * 10.0) for i in range(4) for j in range(2)}
    surface = aggregate_cells(_grid(cells, {k: [31.0, 31.0] for k in cells}), munis)
    np.testing.assert_allclose(surface.values.to_numpy(), 31.0)


def test_municipality_without_overlap_fails():
    munis = box_map()
    grid = _grid({"a": (0.0, 0.0, 10.0, 10.0)}, {"a": [20.0, 21.0]})
    with pytest.raises(DataError):
        aggregate_cells(grid, munis)


def test_overlapping_cells_are_rejected():
    with pytest.raises(ValidationError):
        _grid({"a": (0.0, 0.0, 10.0, 10.0), "b": (5.0, 5.0, 15.0, 15.0)}, {"a": [1.0, 1.0], "b": [1.0, 1.0]})
