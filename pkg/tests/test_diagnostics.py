import numpy as np
import pandas as pd
import pytest

from conftest import make_station
from services.diagnostics import diagnose_qq, nearest_cells, qq_summary, underestimates_upper_tail
from services.errors import DataError
from services.ingest import ReanalysisGrid

DATES = pd.date_range("2019-05-01", "2019-09-30")


def _grid(values: np.ndarray, start=DATES[0]) -> ReanalysisGrid:
    cells = pd.DataFrame(
        {"x0": [0.0, 10.0], "y0": [0.0, 0.0], "x1": [10.0, 20.0], "y1": [10.0, 10.0]}, index=["c1", "c2"]
    )
    dates = pd.date_range(start, periods=values.shape[1])
    return ReanalysisGrid(cells, pd.DataFrame(values, index=cells.index, columns=dates))


@pytest.fixture
def station_values() -> np.ndarray:
    return np.random.default_rng(0).normal(28.0, 4.0, size=(2, len(DATES)))


@pytest.fixture
def stations(station_values):
    return [
        make_station("a", station_values[0], x=4.0, y=6.0),
        make_station("b", station_values[1], x=16.0, y=2.0),
    ]


def test_nearest_cells(stations):
    pairs = nearest_cells(stations, _grid(np.zeros((2, 5))))
    assert pairs["cell_id"].tolist() == ["c1", "c2"]
    np.testing.assert_allclose(pairs["distance_km"], [1.0, 3.0])


def test_identical_sources_have_zero_difference(stations, station_values):
    table = diagnose_qq(stations, _grid(station_values))
    assert table["level"].nunique() == 99
    np.testing.assert_allclose(table["diff"], 0.0, atol=1e-12)
    assert not underestimates_upper_tail(table)


def test_constant_shift(stations, station_values):
    table = diagnose_qq(stations, _grid(station_values - 2.0))
    np.testing.assert_allclose(table["diff"], -2.0)
    summary = qq_summary(table)
    assert summary["station_id"].tolist() == ["a", "b"]
    np.testing.assert_allclose(summary["mean_diff"], -2.0)
    np.testing.assert_allclose(summary["upper_tail_diff"], -2.0)


def test_compressed_upper_tail_is_flagged(stations, station_values):
    q90 = np.quantile(station_values, 0.9, axis=1, keepdims=True)
    compressed = np.where(station_values > q90, q90 + 0.3 * (station_values - q90), station_values)
    table = diagnose_qq(stations, _grid(compressed))
    summary = qq_summary(table)
    assert np.all(summary["upper_tail_diff"] < 0)
    assert np.all(summary["upper_tail_diff"] < summary["mean_diff"])
    assert underestimates_upper_tail(table)


def test_missing_station_days_use_the_common_period(station_values):
    values = station_values[0].copy()
    values[:30] = np.nan
    table = diagnose_qq([make_station("a", values, x=4.0, y=6.0)], _grid(station_values))
    assert table["n_days"].unique().tolist() == [len(DATES) - 30]
    np.testing.assert_allclose(table["diff"], 0.0, atol=1e-12)


def test_no_common_period(stations, station_values):
    with pytest.raises(DataError, match="no common period"):
        diagnose_qq(stations, _grid(station_values, start="2021-05-01"))
