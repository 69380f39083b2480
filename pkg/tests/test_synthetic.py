import json

import numpy as np
import pandas as pd
import pytest

from schemas import SyntheticScenario
from services.artifacts import read_json, sha256_file
from services.casecrossover import HolidayCalendar
from services.data_loader import DataLoader, load_surface
from services.errors import DataError
from services.synthetic import injected_log_rr, make_synthetic, simulate_case_crossover

SCENARIO = SyntheticScenario(n_cols=3, n_rows=2, n_stations=6, years=[2019], population=200_000)


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    return make_synthetic(SCENARIO, seed=5, out_dir=tmp_path_factory.mktemp("bundle"))


def test_injected_log_rr_is_flat_below_the_knot():
    np.testing.assert_allclose(injected_log_rr([20.0, 28.0, 30.0], 0.05, 28.0), [0.0, 0.0, 0.1])


def test_bundle_files_and_truths(bundle):
    for key in ("polygons", "stations", "reanalysis", "mortality", "holidays", "truth_surface", "truths"):
        assert bundle[key].exists()
    truths = read_json(bundle["truths"])
    assert truths["seed"] == 5
    assert truths["ggpm"]["a"] == 0.6
    assert truths["epi"]["holiday_logrr"] == pytest.approx(np.log(0.89))
    assert truths["counts"]["main"] > 0
    assert truths["counts"]["main"] == pytest.approx(truths["counts"]["expected_main"], rel=0.15)
    assert len(truths["municipalities"]) == 6


def test_bundle_loads_back(bundle):
    loader = DataLoader()
    munis = loader.load_municipalities(bundle["polygons"])
    assert len(munis.ids) == 6
    stations = loader.load_stations(bundle["stations"])
    assert len(stations) == 6
    grid = loader.load_reanalysis(bundle["reanalysis"])
    assert grid.values.shape[1] == 153
    mortality = loader.load_mortality(bundle["mortality"])
    summer = pd.to_datetime(mortality["date"]).dt.month.between(6, 8)
    assert summer.all()
    assert set(mortality["municipality_id"]) <= set(munis.ids)
    truth = load_surface(bundle["truth_surface"])
    assert truth.method == "truth"
    assert sorted(truth.municipality_ids) == sorted(munis.ids)
    holidays = loader.load_holidays(bundle["holidays"])
    assert "2019-08-15" in holidays


def test_reanalysis_underestimates_the_hot_tail(bundle):
    loader = DataLoader()
    loader.load_municipalities(bundle["polygons"])
    grid = loader.load_reanalysis(bundle["reanalysis"])
    truth = load_surface(bundle["truth_surface"]).values
    assert np.quantile(grid.values.to_numpy(), 0.99) < np.quantile(truth.to_numpy(), 0.99)


def test_bundle_is_reproducible(bundle, tmp_path):
    again = make_synthetic(SCENARIO, seed=5, out_dir=tmp_path)
    for key, path in bundle.items():
        assert sha256_file(path) == sha256_file(again[key]), key
    other = make_synthetic(SCENARIO, seed=6, out_dir=tmp_path / "other")
    assert sha256_file(other["stations"]) != sha256_file(bundle["stations"])


def test_pre_aggregated_reanalysis(tmp_path):
    paths = make_synthetic(SCENARIO, seed=5, out_dir=tmp_path, pre_aggregated=True)
    loader = DataLoader()
    loader.load_municipalities(paths["polygons"])
    grid = loader.load_reanalysis(paths["reanalysis"], pre_aggregated=True)
    assert grid.metadata["pre_aggregated"] is True
    assert read_json(paths["truths"])["reanalysis"]["pre_aggregated"] is True


def test_simulated_case_crossover_strata():
    data = simulate_case_crossover(n_strata=50, seed=1, heatwave_rr=2.0, holidays=HolidayCalendar())
    assert data["stratum"].nunique() == 50
    assert data.groupby("stratum")["case"].sum().eq(1).all()
    assert data["holiday"].eq(0).all()
    assert {"exposure_reanalysis", "hw_reanalysis_q0.9_base"} <= set(data.columns)
    sizes = data.groupby("stratum").size()
    assert sizes.between(4, 5).all()


@pytest.mark.parametrize(
    "geometry, message",
    [
        ({"type": "Polygon", "coordinates": [[[11.0, 46.0], [11.1, 46.1], [11.1, 46.0], [11.0, 46.1], [11.0, 46.0]]]}, "invalid polygon"),
        ({"type": "LineString", "coordinates": [[11.0, 46.0], [11.1, 46.1]]}, "degenerate"),
    ],
)
def test_bad_polygons_are_rejected(tmp_path, geometry, message):
    good = {"type": "Polygon", "coordinates": [[[11.2, 46.0], [11.3, 46.0], [11.3, 46.1], [11.2, 46.1], [11.2, 46.0]]]}
    doc = {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "properties": {"id": "m_ok", "alt_m": 300.0}, "geometry": good},
            {"type": "Feature", "properties": {"id": "m_bad", "alt_m": 500.0}, "geometry": geometry},
        ],
    }
    path = tmp_path / "municipalities.geojson"
    path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(DataError, match=f"m_bad.*{message}"):
        DataLoader().load_municipalities(path)
