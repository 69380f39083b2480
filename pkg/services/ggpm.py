"""
Spatiotemporal Gaussian Process Service

Per-year model Y(s, l) = b0 + b1 X(s) + xi(s, l) + eps with
xi(., l) = a xi(., l-1) + omega(., l), omega Matern-correlated in space.
The latent field is integrated out with a Kalman filter over days, the
regression coefficients are profiled by GLS, and the remaining parameters
are found by MAP with a Laplace approximation for intervals.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, optimize, stats
from scipy.special import gamma, kv
from statsmodels.tools.numdiff import approx_hess3

from services.domain import (
    METHOD_GGPM,
    AltitudeScaler,
    ExposureSurface,
    SeasonWindow,
    StationSeries,
    pairwise_distances,
    stable_cholesky,
    standardize_altitude,
    substream,
)
from services.errors import ConvergenceError, DataError, NumericalError, ValidationError
from services.surface import PredictionGrid, municipality_average

logger = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)
Z975 = stats.norm.ppf(0.975)


def matern(h, k: float, nu: float) -> np.ndarray:
    """Matern correlation (k h)^nu K_nu(k h) / (Gamma(nu) 2^(nu-1)), 1 at h=0."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValidationError("Distances must be non-negative")
    kh = k * h
    out = np.ones_like(kh)
    pos = kh > 0
    out[pos] = kh[pos] ** nu * kv(nu, kh[pos]) / (gamma(nu) * 2.0 ** (nu - 1.0))
    return np.clip(np.nan_to_num(out, nan=0.0), 0.0, 1.0)


@dataclass(frozen=True)
class GgpmParams:
    beta0: float
    beta1: float
    a: float
    sigma2_omega: float
    k: float
    nu: float
    sigma2_eps: float

    def __post_init__(self):
        if not -1 < self.a < 1:
            raise ValidationError("AR coefficient must satisfy |a| < 1")
        if self.sigma2_omega < 0 or self.sigma2_eps < 0 or self.k <= 0 or self.nu <= 0:
            raise ValidationError("Variances must be >= 0 and k, nu positive")

    @property
    def stationary_variance(self) -> float:
        return self.sigma2_omega / (1.0 - self.a ** 2)


@dataclass(frozen=True)
class GgpmSettings:
    """Prior and optimizer settings for one yearly fit."""

    nu: float = 1.0
    log_k_mean: float = float(np.log(0.02))
    log_k_sd: float = 1.0
    field_sd_rate: float = 1.0
    nugget_sd_rate: float = 1.0
    coef_variance: float = 1.0e4
    max_iter: int = 500


@dataclass
class SimulatedField:
    y: np.ndarray
    xi: np.ndarray


def simulate(params: GgpmParams, coords: np.ndarray, altitude: np.ndarray, n_days: int, seed: int) -> SimulatedField:
    """
    Draw one year of observations (sites x days).

    The first day comes from the stationary distribution of the AR(1).
    """
    rng = substream(seed, "ggpm:simulate")
    n = len(coords)
    xi = np.zeros((n, n_days))
    if params.sigma2_omega > 0:
        corr = matern(pairwise_distances(coords), params.k, params.nu)
        chol = stable_cholesky(corr, "innovation covariance")
        sd_w = np.sqrt(params.sigma2_omega)
        xi[:, 0] = np.sqrt(params.stationary_variance) * (chol @ rng.standard_normal(n))
        for day in range(1, n_days):
            xi[:, day] = params.a * xi[:, day - 1] + sd_w * (chol @ rng.standard_normal(n))
    noise = np.sqrt(params.sigma2_eps) * rng.standard_normal((n, n_days))
    mean = params.beta0 + params.beta1 * np.asarray(altitude, dtype=float)
    return SimulatedField(mean[:, None] + xi + noise, xi)


@dataclass(frozen=True)
class YearData:
    """Station observations of one year as (site, day) with NaN for missing."""

    year: int
    station_ids: List[str]
    coords: np.ndarray
    altitude: np.ndarray
    scaler: AltitudeScaler
    y: np.ndarray
    dates: pd.DatetimeIndex


def build_year(stations: Sequence[StationSeries], season: SeasonWindow, year: int) -> YearData:
    if len(stations) < 3:
        raise DataError(f"GGPM needs at least 3 stations, got {len(stations)}")
    y = np.vstack([st.season(year, season).to_numpy(dtype=float) for st in stations])
    if np.all(np.isnan(y)):
        raise DataError(f"No station observations in {year}")
    altitude, scaler = standardize_altitude([st.altitude for st in stations])
    return YearData(
        year=year,
        station_ids=[st.id for st in stations],
        coords=np.array([st.location for st in stations], dtype=float),
        altitude=altitude,
        scaler=scaler,
        y=y,
        dates=season.index([year]),
    )


@dataclass
class FilterResult:
    logdet: float
    n_obs: int
    cross: np.ndarray
    predicted: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    filtered: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def kalman_filter(
    columns: np.ndarray,
    observed: np.ndarray,
    corr: np.ndarray,
    a: float,
    sigma2_omega: float,
    sigma2_eps: float,
    store: bool = False,
) -> FilterResult:
    """
    Filter several response columns through the same state-space model.

    Args:
        columns: (sites, days, c) responses; the filter is linear so each
            column is filtered with the same gains
        observed: (sites, days) mask
        corr: (sites, sites) spatial correlation of the innovations

    Returns:
        FilterResult whose cross matrix is sum_l E_l' F_l^-1 E_l over
        innovation blocks E_l (n_obs x c)
    """
    n, n_days, c = columns.shape
    q = sigma2_omega * corr
    m = np.zeros((n, c))
    p = q / (1.0 - a ** 2)
    logdet = 0.0
    cross = np.zeros((c, c))
    n_obs = 0
    result = FilterResult(0.0, 0, cross)

    for day in range(n_days):
        if day > 0:
            m = a * m
            p = a ** 2 * p + q
        if store:
            result.predicted.append((m.copy(), p.copy()))

        o = np.flatnonzero(observed[:, day])
        if o.size:
            f = p[np.ix_(o, o)] + sigma2_eps * np.eye(o.size)
            try:
                cf = linalg.cho_factor(f, lower=True)
            except linalg.LinAlgError as e:
                raise NumericalError(f"Innovation covariance not positive definite on day {day + 1}") from e
            innov = columns[o, day, :] - m[o]
            solved = linalg.cho_solve(cf, innov)
            logdet += 2.0 * np.sum(np.log(np.diag(cf[0])))
            cross += innov.T @ solved
            n_obs += o.size

            gain_t = linalg.cho_solve(cf, p[o, :])
            m = m + gain_t.T @ innov
            p = p - p[:, o] @ gain_t
            p = 0.5 * (p + p.T)
        if store:
            result.filtered.append((m.copy(), p.copy()))

    result.logdet = logdet
    result.n_obs = n_obs
    result.cross = cross
    return result


def rts_smoother(result: FilterResult, a: float) -> Tuple[np.ndarray, np.ndarray]:
    """Smoothed means (days, sites) and covariances (days, sites, sites) of the first column."""
    n_days = len(result.filtered)
    ms, ps = result.filtered[-1]
    means = [ms[:, 0]]
    covs = [ps]
    for day in range(n_days - 2, -1, -1):
        mf, pf = result.filtered[day]
        mp, pp = result.predicted[day + 1]
        try:
            gain = linalg.solve(pp, a * pf, assume_a="pos").T
        except (linalg.LinAlgError, ValueError):
            gain = a * pf @ linalg.pinvh(pp)
        ms = mf + gain @ (ms - mp)
        ps = pf + gain @ (ps - pp) @ gain.T
        means.append(ms[:, 0])
        covs.append(0.5 * (ps + ps.T))
    return np.array(means[::-1]), np.array(covs[::-1])


def unpack(theta: np.ndarray, nu: float, beta: Tuple[float, float] = (0.0, 0.0)) -> GgpmParams:
    return GgpmParams(
        beta0=float(beta[0]),
        beta1=float(beta[1]),
        a=float(np.tanh(theta[0])),
        sigma2_omega=float(np.exp(theta[1])),
        k=float(np.exp(theta[2])),
        nu=nu,
        sigma2_eps=float(np.exp(theta[3])),
    )


class YearlyObjective:
    """Negative log posterior over theta = (atanh a, log s2w, log k, log s2e) with beta profiled."""

    def __init__(self, data: YearData, settings: GgpmSettings):
        self.data = data
        self.settings = settings
        self.distances = pairwise_distances(data.coords)
        self.observed = np.isfinite(data.y)
        n, n_days = data.y.shape
        design = np.column_stack([np.ones(n), data.altitude])
        self.columns = np.concatenate(
            [np.nan_to_num(data.y)[:, :, None], np.broadcast_to(design[:, None, :], (n, n_days, 2))], axis=2
        )

    def filter(self, theta: np.ndarray, store: bool = False) -> FilterResult:
        p = unpack(theta, self.settings.nu)
        corr = matern(self.distances, p.k, p.nu)
        return kalman_filter(self.columns, self.observed, corr, p.a, p.sigma2_omega, p.sigma2_eps, store)

    def gls(self, res: FilterResult) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior mode and covariance of beta given theta."""
        xx = res.cross[1:, 1:] + np.eye(2) / self.settings.coef_variance
        xy = res.cross[1:, 0]
        cov = linalg.inv(xx)
        return cov @ xy, cov

    def loglik(self, theta: np.ndarray, beta: np.ndarray, res: Optional[FilterResult] = None) -> float:
        res = res or self.filter(theta)
        w = np.concatenate([[1.0], -np.asarray(beta)])
        return float(-0.5 * (res.n_obs * LOG2PI + res.logdet + w @ res.cross @ w))

    def loglik_grad_beta(self, theta: np.ndarray, beta: np.ndarray, res: Optional[FilterResult] = None) -> np.ndarray:
        res = res or self.filter(theta)
        return res.cross[1:, 0] - res.cross[1:, 1:] @ np.asarray(beta)

    def log_prior(self, theta: np.ndarray, beta: np.ndarray) -> float:
        s = self.settings
        lp = stats.norm.logpdf(theta[0])
        lp += stats.norm.logpdf(theta[2], s.log_k_mean, s.log_k_sd)
        for value, rate in ((theta[1], s.field_sd_rate), (theta[3], s.nugget_sd_rate)):
            sd = np.exp(value / 2.0)
            lp += np.log(rate) - rate * sd + np.log(sd / 2.0)
        lp += float(np.sum(stats.norm.logpdf(beta, 0.0, np.sqrt(s.coef_variance))))
        return float(lp)

    def __call__(self, theta: np.ndarray) -> float:
        try:
            res = self.filter(theta)
        except NumericalError:
            return np.inf
        beta, _ = self.gls(res)
        return -(self.loglik(theta, beta, res) + self.log_prior(theta, beta))


BOUNDS = [(-4.0, 4.0), (np.log(1e-6), np.log(1e3)), (np.log(1e-4), np.log(10.0)), (np.log(1e-6), np.log(1e3))]


@dataclass
class GgpmFit:
    data: YearData
    settings: GgpmSettings
    theta: np.ndarray
    theta_cov: np.ndarray
    beta: np.ndarray
    beta_cov: np.ndarray
    log_posterior: float
    converged: bool

    @property
    def params(self) -> GgpmParams:
        return unpack(self.theta, self.settings.nu, tuple(self.beta))

    def summary(self) -> List[Dict[str, object]]:
        """Rows (parameter, estimate, q025, q975) on the natural scale."""
        rows = []
        for i, name in enumerate(("beta0", "beta1")):
            sd = np.sqrt(self.beta_cov[i, i])
            rows.append(_row(name, self.beta[i], self.beta[i] - Z975 * sd, self.beta[i] + Z975 * sd))

        transforms = (("a", np.tanh), ("sigma2_omega", np.exp), ("k", np.exp), ("sigma2_eps", np.exp))
        for i, (name, fn) in enumerate(transforms):
            sd = np.sqrt(max(self.theta_cov[i, i], 0.0))
            rows.append(_row(name, fn(self.theta[i]), fn(self.theta[i] - Z975 * sd), fn(self.theta[i] + Z975 * sd)))
        for row in rows:
            row["year"] = self.data.year
        return rows


def _row(name: str, est: float, lo: float, hi: float) -> Dict[str, object]:
    return {"parameter": name, "estimate": float(est), "q025": float(lo), "q975": float(hi)}


def _initial_theta(data: YearData, settings: GgpmSettings) -> np.ndarray:
    var = float(np.nanvar(data.y)) or 1.0
    d = pairwise_distances(data.coords)
    median_d = float(np.median(d[np.triu_indices_from(d, k=1)])) or 1.0
    k0 = np.clip(1.0 / median_d, 1e-4, 10.0)
    return np.array([np.arctanh(0.5), np.log(0.5 * var * 0.75), np.log(k0), np.log(0.25 * var)])


def fit_year(data: YearData, settings: GgpmSettings = GgpmSettings()) -> GgpmFit:
    """
    MAP fit of one year with a Laplace approximation on theta.

    Raises:
        ConvergenceError: the optimizer stopped without meeting its tolerance
    """
    objective = YearlyObjective(data, settings)
    trace: List[float] = []
    theta0 = _initial_theta(data, settings)

    def minimize(start: np.ndarray):
        return optimize.minimize(
            objective,
            start,
            method="L-BFGS-B",
            bounds=BOUNDS,
            callback=lambda xk: trace.append(float(objective(xk))),
            options={"maxiter": settings.max_iter},
        )

    result = minimize(theta0)
    if not result.success and np.isfinite(result.fun):
        # one warm restart after a stalled line search
        logger.warning(f"GGPM {data.year}: {result.message}; restarting from the last iterate")
        result = minimize(result.x)
    if not np.isfinite(result.fun):
        raise ConvergenceError(f"GGPM fit for {data.year} reached a non-finite objective", trace=trace)
    if not result.success:
        raise ConvergenceError(f"GGPM fit for {data.year} did not converge: {result.message}", trace=trace)

    theta = result.x
    hess = approx_hess3(theta, objective)
    try:
        theta_cov = linalg.inv(hess)
        linalg.cholesky(theta_cov)
    except linalg.LinAlgError:
        logger.warning(f"GGPM {data.year}: Hessian not positive definite, using pseudo-inverse")
        theta_cov = linalg.pinvh(0.5 * (hess + hess.T))

    res = objective.filter(theta)
    beta, beta_cov = objective.gls(res)
    fit = GgpmFit(data, settings, theta, theta_cov, beta, beta_cov, -float(result.fun), bool(result.success))
    p = fit.params
    logger.info(
        f"GGPM {data.year}: a={p.a:.3f} s2w={p.sigma2_omega:.3f} k={p.k:.4f} "
        f"s2e={p.sigma2_eps:.3f} b0={p.beta0:.2f} b1={p.beta1:.2f} ({result.nit} iterations)"
    )
    return fit


@dataclass
class GridPrediction:
    mean: pd.DataFrame
    sd: pd.DataFrame


def predict(fit: GgpmFit, points: np.ndarray, altitude_raw: np.ndarray) -> GridPrediction:
    """
    Posterior predictive mean and sd of Y at new points for every day of the year.

    With a separable covariance the latent value at a new point given all
    station data depends only on the same-day station state, so the station
    state is smoothed and then kriged to the points.
    """
    p = fit.params
    data = fit.data
    corr_ss = matern(pairwise_distances(data.coords), p.k, p.nu)
    resid = data.y - (p.beta0 + p.beta1 * data.altitude)[:, None]
    observed = np.isfinite(resid)
    res = kalman_filter(
        np.nan_to_num(resid)[:, :, None], observed, corr_ss, p.a, p.sigma2_omega, p.sigma2_eps, store=True
    )
    state_mean, state_cov = rts_smoother(res, p.a)

    corr_gs = matern(pairwise_distances(points, data.coords), p.k, p.nu)
    chol = stable_cholesky(corr_ss, "station correlation")
    weights = linalg.cho_solve((chol, True), corr_gs.T).T
    residual_var = p.stationary_variance * np.clip(1.0 - np.sum(weights * corr_gs, axis=1), 0.0, None)

    x = data.scaler.transform(altitude_raw)
    trend = p.beta0 + p.beta1 * x
    mean = trend[:, None] + weights @ state_mean.T
    latent_var = np.einsum("ij,djk,ik->id", weights, state_cov, weights)
    sd = np.sqrt(np.clip(latent_var, 0.0, None) + residual_var[:, None] + p.sigma2_eps)

    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(sd))):
        raise NumericalError(f"Non-finite GGPM predictions for {data.year}")
    return GridPrediction(
        pd.DataFrame(mean, columns=data.dates),
        pd.DataFrame(sd, columns=data.dates),
    )


def predict_surface(fit: GgpmFit, grid: PredictionGrid, ids: List[str]) -> ExposureSurface:
    """Grid predictions averaged to municipalities for one year."""
    pred = predict(fit, grid.points, grid.altitude)
    rows = [municipality_average(pred.mean[day].to_numpy(), grid, ids) for day in pred.mean.columns]
    values = pd.DataFrame(np.column_stack(rows), index=ids, columns=pred.mean.columns)
    return ExposureSurface(
        METHOD_GGPM,
        values,
        {"method": METHOD_GGPM, "year": fit.data.year, "nu": fit.settings.nu, "grid_size": len(grid)},
    )
