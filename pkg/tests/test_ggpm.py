import numpy as np
import pandas as pd
import pytest
from scipy import stats

from conftest import box_map
from services import ggpm
from services.domain import AltitudeScaler, SeasonWindow, StationSeries, pairwise_distances
from services.errors import DataError, ValidationError
from services.surface import build_grid, with_fallbacks

SEASON = SeasonWindow()


def _year_data(y: np.ndarray, coords: np.ndarray, altitude: np.ndarray, year: int = 2019) -> ggpm.YearData:
    n_days = y.shape[1]
    return ggpm.YearData(
        year=year,
        station_ids=[f"s{i}" for i in range(len(coords))],
        coords=coords,
        altitude=altitude,
        scaler=AltitudeScaler(0.0, 1.0),
        y=y,
        dates=pd.date_range(f"{year}-05-01", periods=n_days),
    )


def test_matern_special_cases():
    h = np.array([0.0, 0.5, 1.0, 3.0])
    np.testing.assert_allclose(ggpm.matern(h, 2.0, 0.5), np.exp(-2.0 * h))
    np.testing.assert_allclose(ggpm.matern(h, 2.0, 1.5), (1 + 2.0 * h) * np.exp(-2.0 * h))
    assert ggpm.matern(np.array([1e6]), 1.0, 1.0)[0] == 0.0
    with pytest.raises(ValidationError):
        ggpm.matern(np.array([-1.0]), 1.0, 1.0)


def test_params_validation():
    with pytest.raises(ValidationError):
        ggpm.GgpmParams(0.0, 0.0, 1.0, 1.0, 0.1, 1.0, 0.1)
    p = ggpm.GgpmParams(0.0, 0.0, 0.6, 2.0, 0.1, 1.0, 0.1)
    assert p.stationary_variance == pytest.approx(2.0 / 0.64)


def test_kalman_likelihood_matches_dense_gaussian():
    rng = np.random.default_rng(0)
    coords = np.array([[0.0, 0.0], [10.0, 0.0], [3.0, 8.0]])
    altitude = np.array([-1.0, 0.2, 0.8])
    y = rng.normal(20.0, 2.0, size=(3, 6))
    y[1, 2] = np.nan
    y[0, 4] = np.nan
    data = _year_data(y, coords, altitude)
    settings = ggpm.GgpmSettings(nu=1.0)
    objective = ggpm.YearlyObjective(data, settings)

    theta = np.array([np.arctanh(0.7), np.log(1.5), np.log(0.08), np.log(0.4)])
    beta = np.array([19.0, 0.5])
    p = ggpm.unpack(theta, settings.nu)

    corr = ggpm.matern(pairwise_distances(coords), p.k, p.nu)
    lags = np.abs(np.subtract.outer(np.arange(6), np.arange(6)))
    cov = np.kron(p.stationary_variance * p.a ** lags, corr) + p.sigma2_eps * np.eye(18)
    resid = (y - (beta[0] + beta[1] * altitude)[:, None]).T.ravel()
    keep = np.isfinite(resid)
    expected = stats.multivariate_normal(np.zeros(keep.sum()), cov[np.ix_(keep, keep)]).logpdf(resid[keep])

    assert objective.loglik(theta, beta) == pytest.approx(expected, rel=1e-9)
    assert objective.filter(theta).n_obs == 16


def test_gls_is_the_conditional_mode():
    rng = np.random.default_rng(1)
    coords = rng.uniform(0, 30, size=(4, 2))
    altitude = np.array([-1.2, -0.3, 0.4, 1.1])
    data = _year_data(rng.normal(22.0, 2.0, size=(4, 10)), coords, altitude)
    objective = ggpm.YearlyObjective(data, ggpm.GgpmSettings())
    theta = np.array([0.5, 0.0, np.log(0.05), np.log(0.5)])
    res = objective.filter(theta)
    beta, cov = objective.gls(res)
    grad = objective.loglik_grad_beta(theta, beta, res) - beta / objective.settings.coef_variance
    np.testing.assert_allclose(grad, 0.0, atol=1e-8)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_simulate_is_reproducible():
    params = ggpm.GgpmParams(24.0, -0.8, 0.6, 2.0, 0.05, 1.0, 0.3)
    coords = np.random.default_rng(2).uniform(0, 40, size=(5, 2))
    altitude = np.linspace(-1, 1, 5)
    a = ggpm.simulate(params, coords, altitude, 30, seed=4)
    b = ggpm.simulate(params, coords, altitude, 30, seed=4)
    assert a.y.shape == (5, 30)
    np.testing.assert_array_equal(a.y, b.y)


def test_simulated_field_has_stationary_variance():
    params = ggpm.GgpmParams(0.0, 0.0, 0.5, 1.0, 0.05, 1.0, 0.0)
    coords = np.array([[0.0, 0.0], [100.0, 0.0]])
    field = ggpm.simulate(params, coords, np.zeros(2), 20000, seed=1).xi
    assert np.var(field) == pytest.approx(params.stationary_variance, rel=0.1)
    lag1 = np.corrcoef(field[0, 1:], field[0, :-1])[0, 1]
    assert lag1 == pytest.approx(0.5, abs=0.05)


def test_build_year_needs_three_stations():
    idx = SEASON.index([2019])
    st = [StationSeries(f"s{i}", float(i), 0.0, 100.0 * i, pd.Series(20.0, index=idx)) for i in range(2)]
    with pytest.raises(DataError):
        ggpm.build_year(st, SEASON, 2019)


def test_summary_rows_are_on_natural_scale():
    coords = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    data = _year_data(np.zeros((3, 4)), coords, np.array([-1.0, 0.0, 1.0]))
    fit = ggpm.GgpmFit(
        data, ggpm.GgpmSettings(),
        theta=np.array([np.arctanh(0.6), np.log(2.0), np.log(0.05), np.log(0.3)]),
        theta_cov=np.eye(4) * 0.01,
        beta=np.array([24.0, -0.8]),
        beta_cov=np.eye(2) * 0.04,
        log_posterior=-100.0,
        converged=True,
    )
    rows = {r["parameter"]: r for r in fit.summary()}
    assert rows["a"]["estimate"] == pytest.approx(0.6)
    assert rows["sigma2_omega"]["estimate"] == pytest.approx(2.0)
    assert rows["beta0"]["q025"] == pytest.approx(24.0 - 1.959964 * 0.2, rel=1e-5)
    assert all(r["q025"] <= r["estimate"] <= r["q975"] for r in rows.values())
    assert {r["year"] for r in rows.values()} == {2019}


@pytest.mark.slow
def test_fit_recovers_simulated_parameters():
    truth = ggpm.GgpmParams(24.0, -0.8, 0.6, 2.0, 0.05, 1.0, 0.3)
    rng = np.random.default_rng(7)
    coords = rng.uniform(0, 60, size=(12, 2))
    altitude = rng.normal(size=12)
    altitude = (altitude - altitude.mean()) / altitude.std(ddof=1)
    sim = ggpm.simulate(truth, coords, altitude, 153, seed=7)
    y = sim.y.copy()
    y[rng.uniform(size=y.shape) < 0.05] = np.nan
    data = _year_data(y, coords, altitude)

    fit = ggpm.fit_year(data, ggpm.GgpmSettings(nu=1.0))
    p = fit.params
    assert fit.converged
    assert p.a == pytest.approx(0.6, abs=0.15)
    assert p.beta0 == pytest.approx(24.0, abs=1.0)
    assert p.beta1 == pytest.approx(-0.8, abs=0.5)
    assert p.sigma2_eps == pytest.approx(0.3, rel=0.5)

    pred = ggpm.predict(fit, coords, altitude)
    observed = np.isfinite(y)
    assert np.mean(np.abs(pred.mean.to_numpy()[observed] - y[observed])) < 1.0
    assert np.all(pred.sd.to_numpy() >= np.sqrt(p.sigma2_eps) - 1e-9)


@pytest.mark.slow
def test_predict_surface_covers_every_municipality():
    truth = ggpm.GgpmParams(24.0, -0.8, 0.6, 2.0, 0.05, 1.0, 0.3)
    rng = np.random.default_rng(3)
    coords = rng.uniform(0, 30, size=(6, 2)) * np.array([1.0, 20.0 / 30.0])
    altitude = np.linspace(-1.0, 1.0, 6)
    sim = ggpm.simulate(truth, coords, altitude, 40, seed=3)
    fit = ggpm.fit_year(_year_data(sim.y, coords, altitude), ggpm.GgpmSettings())

    munis = box_map()
    grid = with_fallbacks(build_grid(munis, n_extra=12), munis)
    surface = ggpm.predict_surface(fit, grid, munis.ids)
    assert surface.values.shape == (6, 40)
    assert surface.method == "ggpm"
    assert np.all(np.isfinite(surface.values.to_numpy()))
