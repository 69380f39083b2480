import numpy as np
import pandas as pd
import pytest

from services.domain import SUMMER, ExposureSurface
from services.errors import DataError, ValidationError
from services.heatwave import (
    PRESETS,
    HeatwaveCalendar,
    HeatwaveSpec,
    build_calendar,
    default_specs,
    detect,
    link_exposure,
    threshold_for,
)


def _brute_force(values, threshold, min_run, exclude_first):
    n = len(values)
    flags = [False] * n
    i = 0
    while i < n:
        if values[i] > threshold:
            j = i
            while j < n and values[j] > threshold:
                j += 1
            if j - i >= min_run:
                for k in range(i + exclude_first, j):
                    flags[k] = True
            i = j
        else:
            i += 1
    return np.array(flags)


def _surface(values_by_id: dict, dates) -> ExposureSurface:
    frame = pd.DataFrame(values_by_id, index=pd.DatetimeIndex(dates)).T
    return ExposureSurface("reanalysis", frame)


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_detect_matches_brute_force(preset):
    rng = np.random.default_rng(PRESETS[preset].min_run)
    p = PRESETS[preset]
    for _ in range(50):
        values = rng.normal(30.0, 3.0, size=92)
        np.testing.assert_array_equal(detect(values, 32.0, p), _brute_force(values, 32.0, p.min_run, p.exclude_first))


def test_detect_examples():
    values = [30, 36, 36, 36, 30, 36, 30, 36, 36]
    assert detect(values, 35.0, PRESETS["base"]).astype(int).tolist() == [0, 1, 1, 1, 0, 1, 0, 1, 1]
    assert detect(values, 35.0, PRESETS["1daylag"]).astype(int).tolist() == [0, 0, 1, 1, 0, 0, 0, 0, 1]
    assert detect(values, 35.0, PRESETS["2dayslag"]).astype(int).tolist() == [0, 0, 0, 1, 0, 0, 0, 0, 0]


def test_exceedance_is_strict():
    assert not detect([35.0, 35.0, 35.0], 35.0, PRESETS["base"]).any()


def test_detect_rejects_missing_values():
    with pytest.raises(DataError):
        detect([30.0, np.nan], 25.0, PRESETS["base"])


def test_presets_are_nested():
    rng = np.random.default_rng(8)
    values = rng.normal(30.0, 4.0, size=200)
    base = detect(values, 33.0, PRESETS["base"])
    one = detect(values, 33.0, PRESETS["1daylag"])
    two = detect(values, 33.0, PRESETS["2dayslag"])
    assert np.all(one <= base) and np.all(two <= one)


def test_spec_ids_round_trip():
    specs = default_specs()
    assert len(specs) == 12
    for spec in specs:
        assert HeatwaveSpec.parse(spec.spec_id) == spec
    assert HeatwaveSpec.parse("q0.925_1daylag").quantile == 0.925
    assert HeatwaveSpec.parse("fixed35_2dayslag").fixed == 35.0
    with pytest.raises(ValidationError):
        HeatwaveSpec.parse("q0.9_3dayslag")
    with pytest.raises(ValidationError):
        HeatwaveSpec(PRESETS["base"], quantile=0.9, fixed=35.0)


def test_quantile_threshold_uses_summer_days_only():
    dates = pd.date_range("2019-05-01", "2019-09-30")
    values = np.where((dates.month >= 6) & (dates.month <= 8), np.arange(len(dates)) % 92, 100.0)
    surface = _surface({"m": values}, dates)
    summer = values[(dates.month >= 6) & (dates.month <= 8)]
    expected = np.quantile(summer, 0.9)
    assert threshold_for(surface, "m", HeatwaveSpec(PRESETS["base"], quantile=0.9)) == pytest.approx(expected)
    assert threshold_for(surface, "m", HeatwaveSpec(PRESETS["base"], fixed=35.0)) == 35.0


def test_threshold_needs_enough_summer_days():
    dates = pd.date_range("2019-06-01", periods=20)
    surface = _surface({"m": np.full(20, 30.0)}, dates)
    with pytest.raises(DataError):
        threshold_for(surface, "m", HeatwaveSpec(PRESETS["base"], quantile=0.9))


def test_runs_do_not_cross_the_winter_gap():
    dates = SUMMER.index([2019, 2020])
    values = np.full(len(dates), 25.0)
    values[dates.get_loc(pd.Timestamp("2019-08-31"))] = 40.0
    values[dates.get_loc(pd.Timestamp("2019-08-30"))] = 40.0
    values[dates.get_loc(pd.Timestamp("2020-06-01"))] = 40.0
    surface = _surface({"m": values}, dates)
    calendar = build_calendar(surface, HeatwaveSpec(PRESETS["1daylag"], fixed=35.0))
    flags = calendar.flags.loc["m"]
    assert flags[pd.Timestamp("2019-08-31")]
    assert not flags[pd.Timestamp("2019-08-30")]
    assert not flags[pd.Timestamp("2020-06-01")]
    assert calendar.flags.to_numpy().sum() == 1


def test_calendar_prevalence_and_long_format():
    dates = SUMMER.index([2019])
    rng = np.random.default_rng(1)
    surface = _surface({"a": rng.normal(28, 3, len(dates)), "b": rng.normal(30, 3, len(dates))}, dates)
    calendar = build_calendar(surface, HeatwaveSpec(PRESETS["base"], quantile=0.9))
    assert calendar.spec_id == "q0.9_base"
    assert 0.08 < calendar.prevalence() < 0.12

    long = calendar.to_long()
    assert list(long.columns) == ["municipality_id", "date", "heatwave", "spec_id", "method"]
    back = HeatwaveCalendar.from_long(long, "reanalysis", "q0.9_base")
    pd.testing.assert_frame_equal(back.flags, calendar.flags, check_names=False, check_freq=False)


def test_link_window_looks_back_three_days():
    dates = SUMMER.index([2019])
    values = np.full(len(dates), 25.0)
    values[dates.get_loc(pd.Timestamp("2019-07-10"))] = 40.0
    calendar = build_calendar(_surface({"a": values}, dates), HeatwaveSpec(PRESETS["base"], fixed=35.0))
    assert link_exposure(calendar, "a", "2019-07-10", window=3)
    assert link_exposure(calendar, "a", "2019-07-13", window=3)
    assert not link_exposure(calendar, "a", "2019-07-14", window=3)
    assert not link_exposure(calendar, "a", "2019-07-09", window=3)
    with pytest.raises(DataError):
        link_exposure(calendar, "a", "2019-06-02", window=3)
