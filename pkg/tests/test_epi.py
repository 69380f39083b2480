import numpy as np
import pandas as pd
import pytest
from scipy import optimize
from statsmodels.discrete.conditional_models import ConditionalLogit

from services import epi
from services.errors import DataError, ValidationError
from services.synthetic import simulate_case_crossover

EXPOSURE = "exposure_reanalysis"
HEATWAVE = "hw_reanalysis_q0.9_base"
SMALL_GRID = tuple(np.logspace(0.0, 8.0, 9))


def _holiday_strata(n_strata: int = 400, logrr: float = 0.5, seed: int = 0) -> pd.DataFrame:
    """Four-row strata with a binary holiday flag and one event drawn from the conditional model."""
    rng = np.random.default_rng(seed)
    frames = []
    for k in range(n_strata):
        holiday = (rng.uniform(size=4) < 0.3).astype(int)
        p = np.exp(logrr * holiday)
        case = np.zeros(4, dtype=int)
        case[rng.choice(4, p=p / p.sum())] = 1
        frames.append(pd.DataFrame({"stratum": k, "case": case, "holiday": holiday}))
    return pd.concat(frames, ignore_index=True)


def _small_dataset(seed: int = 0, **kw) -> pd.DataFrame:
    return simulate_case_crossover(n_strata=300, seed=seed, n_municipalities=8, **kw)


def test_pc_prior_rate():
    assert epi.pc_prior_rate(0.1, 0.01) == pytest.approx(46.0517, rel=1e-5)
    with pytest.raises(ValidationError):
        epi.pc_prior_rate(0.0, 0.01)
    with pytest.raises(ValidationError):
        epi.pc_prior_rate(0.1, 1.0)


def test_rw2_penalty():
    assert epi.rw2_penalty(np.arange(6) * 0.7 - 1.0, tau=5.0) == pytest.approx(0.0)
    assert epi.rw2_penalty(np.arange(5.0) ** 2, tau=2.0) == pytest.approx(12.0)
    assert epi.second_differences(5).shape == (3, 5)
    f = np.arange(5.0) ** 2
    expected = 12.0 + 1.5 * (np.log(2.0 * np.pi) - np.log(2.0))
    assert epi.rw2_neg_log_prior(f, tau=2.0) == pytest.approx(expected)


def test_effect_spec_validation():
    with pytest.raises(ValidationError):
        epi.Rw2EffectSpec(n_bins=9)
    with pytest.raises(ValidationError):
        epi.EpiModelSpec(likelihood="logit")
    with pytest.raises(ValidationError):
        epi.EpiModelSpec(tau_grid=())


def test_effect_bins():
    bins = epi.EffectBins.from_values(np.array([0.0, 4.0, 10.0]), 5)
    np.testing.assert_allclose(bins.mids, [1.0, 3.0, 5.0, 7.0, 9.0])
    assert bins.index([0.0, 1.99, 2.0, 10.0, -1.0, 11.0]).tolist() == [0, 0, 1, 4, 0, 4]
    with pytest.raises(DataError):
        epi.EffectBins.from_values(np.full(4, 25.0), 5)
    with pytest.raises(DataError):
        epi.EffectBins.from_values(np.array([1.0, np.nan]), 5)


def test_sum_to_zero_basis_is_orthonormal():
    basis = epi.sum_to_zero_basis(6)
    assert basis.shape == (6, 5)
    np.testing.assert_allclose(basis.sum(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(basis.T @ basis, np.eye(5), atol=1e-12)


def test_strata_need_exactly_one_event():
    data = pd.DataFrame({"stratum": [1, 1, 2, 2], "case": [1, 1, 0, 1], "holiday": [0, 1, 0, 0]})
    with pytest.raises(DataError):
        epi.fit(data, epi.EpiModelSpec())
    with pytest.raises(DataError):
        epi.fit(data.drop(columns="holiday"), epi.EpiModelSpec())


def test_conditional_fit_matches_conditional_logit():
    data = _holiday_strata()
    spec = epi.EpiModelSpec(likelihood=epi.LIKELIHOOD_CONDITIONAL, coef_variance=1e8)
    result = epi.fit(data, spec)
    reference = ConditionalLogit(data["case"], data[["holiday"]], groups=data["stratum"]).fit(disp=0)

    coef = result.coefficient("beta1_holiday")
    assert coef["median"] == pytest.approx(reference.params["holiday"], abs=1e-3)
    half_width = (coef["q975"] - coef["q025"]) / 2
    assert half_width == pytest.approx(1.959964 * reference.bse["holiday"], rel=1e-2)
    assert len(result.tau_grid) == 1


def test_poisson_with_flat_stratum_prior_matches_conditional():
    data = _holiday_strata(n_strata=200, seed=3)
    conditional = epi.fit(data, epi.EpiModelSpec(likelihood=epi.LIKELIHOOD_CONDITIONAL, coef_variance=1e4))
    poisson = epi.fit(data, epi.EpiModelSpec(coef_variance=1e4, stratum_variance=1e6))
    assert "beta0" in poisson.names and "beta0" not in conditional.names
    assert poisson.coefficient("beta1_holiday")["median"] == pytest.approx(
        conditional.coefficient("beta1_holiday")["median"], abs=1e-3
    )
    assert len(poisson.stratum_effects) == 200


@pytest.mark.parametrize("likelihood", [epi.LIKELIHOOD_POISSON, epi.LIKELIHOOD_CONDITIONAL])
def test_gradient_matches_finite_differences(likelihood):
    data = simulate_case_crossover(n_strata=12, seed=2, n_municipalities=3, heatwave_prevalence=0.3)
    spec = epi.EpiModelSpec(
        exposure=EXPOSURE,
        heatwave=HEATWAVE,
        effect=epi.Rw2EffectSpec(n_bins=10),
        likelihood=likelihood,
        stratum_variance=10.0,
    )
    n = 12 + 12 if likelihood == epi.LIKELIHOOD_POISSON else 11
    x = np.random.default_rng(4).normal(scale=0.3, size=n)
    analytic = epi.log_posterior_gradient(data, spec, x, tau=20.0)
    numeric = optimize.approx_fprime(x, lambda v: epi.log_posterior(data, spec, v, 20.0), 1e-6)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-4)


def test_conditional_loglik_of_one_stratum():
    state = epi.EpiModelState(beta0=0.0, beta1=np.log(2.0), beta2=None, f=np.zeros(0), u=np.zeros(0), tau=1.0)
    stratum = pd.DataFrame({"stratum": 1, "case": [1, 0, 0, 0], "holiday": [1, 0, 0, 0]})
    assert epi.conditional_loglik(stratum, state, epi.EpiModelSpec()) == pytest.approx(np.log(2.0 / 5.0))
    stratum["case"] = [0, 0, 0, 1]
    assert epi.conditional_loglik(stratum, state, epi.EpiModelSpec()) == pytest.approx(np.log(1.0 / 5.0))
    stratum["case"] = 0
    with pytest.raises(DataError):
        epi.conditional_loglik(stratum, state, epi.EpiModelSpec())


def test_risk_curve_from_frame_takes_the_minimum():
    frame = pd.DataFrame({
        "bin_mid": [20.0, 25.0, 30.0],
        "logrr_med": [0.2, 0.0, 0.1],
        "logrr_lo": [0.0, 0.0, -0.1],
        "logrr_hi": [0.4, 0.0, 0.3],
    })
    curve = epi.RiskCurve.from_frame(frame)
    assert curve.mmt == 25.0
    np.testing.assert_allclose(curve.to_frame()["rr_norm"], np.exp([0.2, 0.0, 0.1]))


def test_risk_curve_is_centred_at_its_minimum():
    data = _small_dataset(logrr_slope=0.1)
    spec = epi.EpiModelSpec(
        exposure=EXPOSURE,
        effect=epi.Rw2EffectSpec(n_bins=10),
        tau_grid=SMALL_GRID,
        likelihood=epi.LIKELIHOOD_CONDITIONAL,
    )
    result = epi.fit(data, spec)
    assert result.weights.sum() == pytest.approx(1.0)
    curve = epi.risk_curve(result)
    assert curve.logrr_med.min() == pytest.approx(0.0, abs=1e-12)
    assert curve.mmt == curve.bin_mid[int(np.argmin(curve.logrr_med))]
    assert np.all(curve.logrr_lo <= curve.logrr_med + 1e-9)
    assert np.all(curve.logrr_med <= curve.logrr_hi + 1e-9)

    state = result.state()
    assert len(state.f) == 10
    assert state.f.sum() == pytest.approx(0.0, abs=1e-9)


def test_heatwave_models_skip_constant_columns():
    data = _small_dataset(heatwave_prevalence=0.2)
    data["hw_reanalysis_fixed99_base"] = 0
    base = epi.EpiModelSpec(
        exposure=EXPOSURE,
        effect=epi.Rw2EffectSpec(n_bins=10),
        tau_grid=(1.0, 100.0, 1e4),
        likelihood=epi.LIKELIHOOD_CONDITIONAL,
    )
    table = epi.fit_heatwave_models(data, base, [HEATWAVE, "hw_reanalysis_fixed99_base"])
    assert table["heatwave"].unique().tolist() == [HEATWAVE]
    assert sorted(table["with_temperature"].tolist()) == [False, True]
    np.testing.assert_allclose(table["rr"], np.exp(table["beta2"]))
    assert np.all(table["rr_q025"] <= table["rr"]) and np.all(table["rr"] <= table["rr_q975"])


def test_stratum_subsets():
    data = _small_dataset()
    subsets = epi.stratum_subsets(data)
    assert len(subsets) == 12
    assert {"female/65-79", "male/80+", "all/18+", "all/18-64"} <= set(subsets)
    assert (subsets["female/65-79"]["sex"] == "female").all()
    assert subsets["female/65-79"]["age"].between(65, 79).all()
    assert len(subsets["all/18+"]) == int((data["age"] >= 18).sum())


@pytest.mark.slow
def test_null_exposure_curve_covers_zero():
    data = simulate_case_crossover(n_strata=2000, seed=5)
    spec = epi.EpiModelSpec(exposure=EXPOSURE, effect=epi.Rw2EffectSpec(n_bins=20), tau_grid=SMALL_GRID)
    result = epi.fit(data, spec)
    effect = result.effect_summary()
    covered = (effect["logrr_lo"] <= 0.0) & (effect["logrr_hi"] >= 0.0)
    assert covered.mean() >= 0.8
    holiday = result.coefficient("beta1_holiday")
    assert holiday["q025"] < 0.0 < holiday["q975"]


@pytest.mark.slow
def test_injected_effects_are_recovered():
    data = simulate_case_crossover(
        n_strata=4000, seed=6, logrr_slope=0.1, logrr_knot=28.0, heatwave_rr=1.5, heatwave_prevalence=0.1
    )
    spec = epi.EpiModelSpec(
        exposure=EXPOSURE,
        heatwave=HEATWAVE,
        effect=epi.Rw2EffectSpec(n_bins=20),
        tau_grid=SMALL_GRID,
        likelihood=epi.LIKELIHOOD_CONDITIONAL,
    )
    result = epi.fit(data, spec)
    assert result.coefficient("beta2_heatwave")["median"] == pytest.approx(np.log(1.5), abs=0.2)

    curve = epi.risk_curve(result)
    assert curve.mmt < 30.0
    k = int(np.argmin(np.abs(curve.bin_mid - 34.0)))
    assert curve.logrr_med[k] == pytest.approx(0.1 * (curve.bin_mid[k] - 28.0), abs=0.3)


@pytest.mark.slow
def test_recovery_at_study_effect_sizes():
    data = simulate_case_crossover(
        n_strata=20000, seed=9, logrr_slope=0.03, logrr_knot=28.0, holiday_rr=0.89, heatwave_rr=1.05
    )
    spec = epi.EpiModelSpec(
        exposure=EXPOSURE,
        heatwave=HEATWAVE,
        effect=epi.Rw2EffectSpec(n_bins=20),
        tau_grid=SMALL_GRID,
        likelihood=epi.LIKELIHOOD_CONDITIONAL,
    )
    result = epi.fit(data, spec)

    holiday = result.coefficient("beta1_holiday")
    assert holiday["q025"] <= np.log(0.89) <= holiday["q975"]
    heatwave = result.coefficient("beta2_heatwave")
    assert heatwave["q025"] <= np.log(1.05) <= heatwave["q975"]

    curve = epi.risk_curve(result)
    hot = (curve.bin_mid >= 28.0) & (curve.bin_mid <= 34.0)
    assert hot.sum() >= 3
    slope = np.polyfit(curve.bin_mid[hot], curve.logrr_med[hot], 1)[0]
    assert slope == pytest.approx(0.03, abs=0.02)
