import numpy as np
import pandas as pd
import pytest

from services.domain import ExposureSurface, SeasonWindow
from services.epi import RiskCurve
from services.errors import DataError
from services.heatwave import PRESETS, HeatwaveCalendar, HeatwaveSpec
from services.reporting import heatwave_day_counts, holiday_effect, mmt_table, rr_table, yearly_summary

DATES = SeasonWindow().index([2019, 2020])
SUMMER_MASK = (DATES.month >= 6) & (DATES.month <= 8)


def _surface(method: str = "reanalysis") -> ExposureSurface:
    values = np.where(SUMMER_MASK, 25.0, 100.0) + np.where(DATES.year == 2020, 1.0, 0.0)
    frame = pd.DataFrame([values, values + 2.0], index=["m1", "m2"], columns=DATES)
    return ExposureSurface(method, frame)


def _curve() -> RiskCurve:
    return RiskCurve(
        bin_mid=np.array([20.0, 25.0, 30.0, 35.0]),
        logrr_med=np.array([0.1, 0.0, 0.2, 0.6]),
        logrr_lo=np.array([0.0, 0.0, 0.1, 0.4]),
        logrr_hi=np.array([0.2, 0.0, 0.3, 0.8]),
        mmt=25.0,
    )


def test_yearly_summary_uses_summer_only():
    table = yearly_summary([_surface()], groups={"m2": "alpine"})
    overall = table[table["group"] == "all"].set_index("year")["mean_tmax"]
    assert overall[2019] == pytest.approx(26.0)
    assert overall[2020] == pytest.approx(27.0)
    alpine = table[table["group"] == "alpine"].set_index("year")["mean_tmax"]
    assert alpine[2019] == pytest.approx(27.0)
    assert set(table.columns) == {"method", "year", "group", "mean_tmax"}


def test_yearly_summary_needs_summer_days():
    may = DATES[DATES.month == 5]
    surface = ExposureSurface("ggpm", pd.DataFrame([np.full(len(may), 20.0)], index=["m1"], columns=may))
    with pytest.raises(DataError):
        yearly_summary([surface])


def test_heatwave_day_counts():
    flags = pd.DataFrame(False, index=["m1", "m2"], columns=DATES)
    flags.loc["m1", pd.Timestamp("2019-07-01"):pd.Timestamp("2019-07-04")] = True
    flags.loc["m2", pd.Timestamp("2019-07-02"):pd.Timestamp("2019-07-03")] = True
    flags.loc["m2", pd.Timestamp("2019-05-10")] = True
    calendar = HeatwaveCalendar("reanalysis", HeatwaveSpec(PRESETS["base"], quantile=0.9), flags)
    table = heatwave_day_counts([calendar]).set_index("year")
    assert table.loc[2019, "mean_days"] == pytest.approx(3.0)
    assert table.loc[2019, "max_days"] == 4
    assert table.loc[2020, "mean_days"] == 0.0
    assert table["spec_id"].unique().tolist() == ["q0.9_base"]


def test_mmt_table_labels():
    table = mmt_table({"reanalysis": _curve(), "gqrm:0.9": _curve()})
    assert table["model"].tolist() == ["gqrm:0.9", "reanalysis"]
    assert table["method"].tolist() == ["gqrm", "reanalysis"]
    assert table["tau"].iloc[0] == 0.9
    assert np.isnan(table["tau"].iloc[1])
    assert table["mmt"].tolist() == [25.0, 25.0]


def test_holiday_effect_percent():
    summary = pd.DataFrame([{"parameter": "beta1_holiday", "median": np.log(0.89), "q025": np.log(0.8), "q975": 0.0}])
    effect = holiday_effect(summary)
    assert effect["percent"] == pytest.approx(-11.0)
    assert effect["percent_q025"] == pytest.approx(-20.0)
    assert effect["percent_q975"] == 0.0
    with pytest.raises(DataError):
        holiday_effect(summary, parameter="beta2_heatwave")


def test_rr_table_interpolates_the_curve():
    rows = rr_table(_curve(), exposures=[30.0] * 10, percentiles=(0.5,))
    assert rows[0]["exposure"] == 30.0
    assert rows[0]["rr"] == pytest.approx(np.exp(0.2))
    assert rows[0]["rr_q025"] == pytest.approx(np.exp(0.1))

    rows = rr_table(_curve(), exposures=np.linspace(20.0, 35.0, 101))
    assert [r["percentile"] for r in rows] == [0.5, 0.75, 0.9, 0.95, 0.99]
    assert rows[0]["exposure"] == pytest.approx(27.5)
    assert rows[0]["rr"] == pytest.approx(np.exp(0.1))
    assert all(r["rr_q025"] <= r["rr"] <= r["rr_q975"] for r in rows)
