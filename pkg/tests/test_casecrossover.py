import numpy as np
import pandas as pd
import pytest

from services.casecrossover import (
    OUTCOME_MAIN,
    OUTCOME_NEGATIVE_CONTROL,
    HolidayCalendar,
    RecordFilter,
    build_strata,
    cause_matches,
    exposure_columns,
    heatwave_columns,
    lagged_exposure,
    stratum_summary,
)
from services.domain import SUMMER, ExposureSurface, SeasonWindow
from services.errors import DataError, ValidationError
from services.heatwave import PRESETS, HeatwaveSpec, build_calendar

IDS = ["m00", "m01", "m10"]


@pytest.fixture
def surface() -> ExposureSurface:
    dates = SeasonWindow().index([2019])
    values = np.array([[20.0 + i + 0.1 * k for k in range(len(dates))] for i in range(len(IDS))])
    return ExposureSurface("reanalysis", pd.DataFrame(values, index=IDS, columns=dates))


def _records(days, municipality="m00", icd10="I21", age=75.0, sex="female"):
    return pd.DataFrame({
        "id": [f"r{i:04d}" for i in range(len(days))],
        "date": pd.to_datetime(list(days)),
        "municipality_id": municipality,
        "age": age,
        "sex": sex,
        "icd10": icd10,
    })


def test_cause_ranges():
    assert cause_matches("I21.0", [("I00", "I99")])
    assert cause_matches("j189", [("J00", "J99")])
    assert not cause_matches("K70", [("I00", "I99"), ("J00", "J99")])
    assert not cause_matches("J9", [("J00", "J99")])
    assert cause_matches("C97", [("C00", "C97")])
    assert not cause_matches("D00", [("C00", "C97")])


def test_record_filter():
    records = pd.DataFrame({
        "id": ["a", "b", "c", "d", "e", "f"],
        "date": pd.to_datetime(["2019-07-01", "2019-07-01", "2019-05-20", "2019-07-01", "2019-08-31", "2019-07-01"]),
        "municipality_id": "m00",
        "age": [70, 17, 70, 70, 90, 50],
        "sex": ["female", "female", "male", "male", "male", "female"],
        "icd10": ["I21", "I21", "I21", "C50", "J18", "I50"],
    })
    assert records[RecordFilter().mask(records)]["id"].tolist() == ["a", "e", "f"]
    assert records[RecordFilter(outcome=OUTCOME_NEGATIVE_CONTROL).mask(records)]["id"].tolist() == ["d"]
    assert records[RecordFilter(sex="male").mask(records)]["id"].tolist() == ["e"]
    assert records[RecordFilter(age_band=(65, 80)).mask(records)]["id"].tolist() == ["a"]
    with pytest.raises(ValidationError):
        RecordFilter(outcome="injury")


def test_national_summer_holidays():
    holidays = HolidayCalendar.national_summer([2019, 2020])
    assert "2019-06-02" in holidays and "2020-08-15" in holidays
    assert "2019-06-03" not in holidays


def test_lagged_exposure_excludes_event_day(surface):
    # day index of 2019-07-10 in a May 1 season is 70
    expected = 20.0 + 0.1 * np.mean([67, 68, 69])
    assert lagged_exposure(surface, "m00", "2019-07-10", window=3) == pytest.approx(expected)
    with_event = 20.0 + 0.1 * np.mean([68, 69, 70])
    assert lagged_exposure(surface, "m00", "2019-07-10", window=3, include_event=True) == pytest.approx(with_event)
    with pytest.raises(DataError):
        lagged_exposure(surface, "m00", "2019-05-02", window=3)


def test_every_summer_day_as_event(surface):
    days = SUMMER.index([2019])
    dataset = build_strata(_records(days), {"reanalysis": surface}, [], HolidayCalendar.national_summer([2019]))
    summary = stratum_summary(dataset)
    assert summary["strata"] == 92
    assert 3.3 <= summary["controls_per_case"] <= 3.5

    for _, stratum in dataset.groupby("stratum"):
        assert stratum["case"].sum() == 1
        assert 4 <= len(stratum) <= 5
        dates = pd.DatetimeIndex(stratum["date"])
        assert dates.is_monotonic_increasing
        assert dates.month.nunique() == 1
        assert dates.dayofweek.nunique() == 1


def test_exposure_and_holiday_columns(surface):
    calendar = build_calendar(surface, HeatwaveSpec(PRESETS["base"], fixed=25.0))
    dataset = build_strata(
        _records(["2019-06-09", "2019-08-15"], municipality="m01"),
        {"reanalysis": surface},
        [calendar],
        HolidayCalendar.national_summer([2019]),
    )
    assert exposure_columns(dataset) == ["exposure_reanalysis"]
    assert heatwave_columns(dataset, "reanalysis") == ["hw_reanalysis_fixed25_base"]
    assert list(dataset.columns[:7]) == ["stratum", "case", "date", "municipality_id", "record_id", "age", "sex"]

    first = dataset[dataset["stratum"] == 1]
    assert first["date"].dt.day.tolist() == [2, 9, 16, 23, 30]
    assert first["holiday"].tolist() == [1, 0, 0, 0, 0]
    for _, row in first.iterrows():
        assert row["exposure_reanalysis"] == pytest.approx(lagged_exposure(surface, "m01", row["date"], 3))

    second = dataset[dataset["stratum"] == 2]
    assert second.loc[second["case"] == 1, "holiday"].item() == 1
    # m01 exceeds 25 from the 41st season day on
    assert dataset.loc[dataset["date"] >= "2019-08-01", "hw_reanalysis_fixed25_base"].eq(1).all()


def test_uncovered_records_are_dropped(surface):
    records = pd.concat([_records(["2019-07-10"]), _records(["2019-07-11"], municipality="elsewhere")], ignore_index=True)
    records["id"] = ["keep", "drop"]
    dataset = build_strata(records, {"reanalysis": surface}, [], HolidayCalendar())
    assert dataset["record_id"].unique().tolist() == ["keep"]

    with pytest.raises(DataError):
        build_strata(_records(["2019-07-10"], icd10="K70"), {"reanalysis": surface}, [], HolidayCalendar())


def test_outcomes_share_the_pipeline(surface):
    records = pd.concat(
        [_records(["2019-07-10"], icd10="I21"), _records(["2019-07-11"], icd10="C18")], ignore_index=True
    )
    records["id"] = ["cv", "cancer"]
    main = build_strata(records, {"reanalysis": surface}, [], HolidayCalendar(), RecordFilter(outcome=OUTCOME_MAIN))
    nc = build_strata(records, {"reanalysis": surface}, [], HolidayCalendar(), RecordFilter(outcome=OUTCOME_NEGATIVE_CONTROL))
    assert main["record_id"].unique().tolist() == ["cv"]
    assert nc["record_id"].unique().tolist() == ["cancer"]
