"""
Geospatial Quantile Regression Service

Bayesian spatial quantile autoregression for daily maximum temperature,
fitted per quantile level by Metropolis-within-Gibbs under an asymmetric
Laplace working likelihood. Gaussian-conditional blocks use the
exponential-mixture representation of the AL; the log-scale and
autoregression fields and the covariance decays use adaptive random-walk
Metropolis.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from services.domain import (
    AltitudeScaler,
    SeasonWindow,
    StationSeries,
    pairwise_distances,
    stable_cholesky,
    standardize_altitude,
    substream,
)
from services.errors import DataError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "heatrisk-gqrm-checkpoint/1"
DEFAULT_LEVELS = (0.05, 0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 0.95)
TARGET_ACCEPTANCE = 0.44
ADAPT_EVERY = 50

GP_FIELDS = ("b0", "a", "s", "r")
VARIANCES = ("b0", "a", "s", "r", "psi", "eta")


@dataclass(frozen=True)
class QuantileLevelSet:
    levels: Tuple[float, ...] = DEFAULT_LEVELS

    def __post_init__(self):
        levels = tuple(float(x) for x in self.levels)
        if not levels or any(not 0 < x < 1 for x in levels):
            raise ValidationError("Quantile levels must lie in (0, 1)")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValidationError("Quantile levels must be strictly increasing")
        object.__setattr__(self, "levels", levels)


def al_checkloss(u, tau: float):
    """Check function u * (tau - 1{u < 0})."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0))


def harmonics(day_of_season) -> Tuple[np.ndarray, np.ndarray]:
    angle = 2.0 * np.pi * np.asarray(day_of_season, dtype=float) / 365.0
    return np.sin(angle), np.cos(angle)


@dataclass
class GqrmParams:
    """
    One parameter state of the quantile autoregression.

    site_altitude and year_offset are design constants carried with the
    state so a draw can be evaluated on its own: the trend uses t - year_offset.
    """

    beta0: float
    alpha: float
    beta1: float
    beta2: float
    beta3: float
    site_beta0: np.ndarray
    site_alpha: np.ndarray
    psi: np.ndarray
    eta: np.ndarray
    log_sigma: np.ndarray
    z_rho: np.ndarray
    mean_log_sigma: float = 0.0
    mean_z_rho: float = 0.0
    variances: Dict[str, float] = field(default_factory=lambda: {k: 1.0 for k in VARIANCES})
    decays: Dict[str, float] = field(default_factory=lambda: {k: 1.0 for k in GP_FIELDS})
    site_altitude: np.ndarray = field(default_factory=lambda: np.zeros(0))
    year_offset: float = 0.0

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def rho(self) -> np.ndarray:
        return np.tanh(np.asarray(self.z_rho) / 2.0)

    def validate(self) -> None:
        if np.any(np.abs(self.rho) >= 1) or np.any(self.sigma <= 0):
            raise ValidationError("rho must lie in (-1, 1) and sigma must be positive")
        if any(v <= 0 for v in self.variances.values()) or any(v <= 0 for v in self.decays.values()):
            raise ValidationError("Variances and decays must be positive")

    def q(self, s, t, ell) -> np.ndarray:
        """Fixed plus random effects q_{t,ell}(s); t is the 1-based year index."""
        s = np.asarray(s)
        t = np.asarray(t)
        tc = t - self.year_offset
        h1, h2 = harmonics(ell)
        return (
            self.beta0
            + self.alpha * tc
            + self.beta1 * h1
            + self.beta2 * h2
            + self.beta3 * self.site_altitude[s]
            + self.site_beta0[s]
            + self.site_alpha[s] * tc
            + self.psi[t - 1]
            + self.eta[s, t - 1]
        )


def conditional_quantile(params: GqrmParams, s: int, t: int, ell: int, y_prev: float) -> float:
    """Conditional tau-quantile of Y_{t,ell}(s) given the previous day's value."""
    if ell < 2:
        raise ValidationError("The first season day only conditions; ell must be >= 2")
    q_now = params.q(s, t, ell)
    q_prev = params.q(s, t, ell - 1)
    return float(q_now + params.rho[s] * (y_prev - q_prev))


@dataclass(frozen=True)
class GqrmPriors:
    """Prior settings; decay bounds default to 3/d_max .. 3/d_min."""

    coef_variance: float = 1.0e4
    ig_shape: float = 2.0
    ig_rate: float = 1.0
    psi_variance: Optional[float] = None
    eta_variance: Optional[float] = None
    decay_bounds: Optional[Tuple[float, float]] = None


@dataclass(frozen=True)
class McmcConfig:
    n_burn: int = 5000
    n_keep: int = 5000
    thin: int = 1
    initial_scale: float = 0.3
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if self.n_keep < 1 or self.n_burn < 0 or self.thin < 1:
            raise ValidationError("MCMC sizes must be n_keep >= 1, n_burn >= 0, thin >= 1")


@dataclass(frozen=True)
class GqrmDesign:
    """Gap-free station data arranged as (site, year, day)."""

    station_ids: List[str]
    years: List[int]
    y: np.ndarray
    altitude: np.ndarray
    scaler: AltitudeScaler
    distances: np.ndarray
    dates: np.ndarray

    @property
    def n_sites(self) -> int:
        return self.y.shape[0]

    @property
    def n_years(self) -> int:
        return self.y.shape[1]

    @property
    def n_days(self) -> int:
        return self.y.shape[2]

    @property
    def year_offset(self) -> float:
        return (self.n_years + 1) / 2.0


def build_design(stations: Sequence[StationSeries], season: SeasonWindow, years: Sequence[int]) -> GqrmDesign:
    """Arrange imputed station series for the sampler."""
    if len(stations) < 3:
        raise DataError(f"GQRM needs at least 3 stations, got {len(stations)}")
    if len(years) < 2:
        raise DataError(f"GQRM needs at least 2 years, got {len(years)}")

    lengths = {season.length(y) for y in years}
    if len(lengths) != 1:
        raise ValidationError("Season windows must have equal length across years")

    y = np.stack([
        np.stack([st.season(year, season).to_numpy(dtype=float) for year in years])
        for st in stations
    ])
    if not np.all(np.isfinite(y)):
        raise DataError("GQRM requires imputed, gap-free series")

    altitude, scaler = standardize_altitude([st.altitude for st in stations])
    coords = np.array([st.location for st in stations])
    dates = np.array([season.index([year]) for year in years])
    return GqrmDesign(
        station_ids=[st.id for st in stations],
        years=list(years),
        y=y,
        altitude=altitude,
        scaler=scaler,
        distances=pairwise_distances(coords),
        dates=dates,
    )


def decay_bounds(distances: np.ndarray) -> Tuple[float, float]:
    off = distances[np.triu_indices_from(distances, k=1)]
    off = off[off > 0]
    if off.size == 0:
        raise DataError("Stations must have distinct locations")
    return 3.0 / off.max(), 3.0 / off.min()


class _ExpCorrelation:
    """Exponential correlation exp(-phi d) with cached factorization."""

    def __init__(self, distances: np.ndarray, phi: float, name: str):
        self.distances = distances
        self.phi = phi
        self.name = name
        corr = np.exp(-phi * distances)
        self.chol = stable_cholesky(corr, f"{name} correlation")
        self.inverse = linalg.cho_solve((self.chol, True), np.eye(len(distances)))
        self.logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))

    def quad(self, x: np.ndarray) -> float:
        z = linalg.solve_triangular(self.chol, x, lower=True)
        return float(z @ z)

    def log_density(self, x: np.ndarray, variance: float) -> float:
        n = len(x)
        return -0.5 * (n * np.log(variance) + self.logdet + self.quad(x) / variance)


def _draw_gaussian(rng: np.random.Generator, precision: np.ndarray, linear: np.ndarray, what: str) -> np.ndarray:
    chol = stable_cholesky(precision, what)
    mean = linalg.cho_solve((chol, True), linear)
    return mean + linalg.solve_triangular(chol.T, rng.standard_normal(len(linear)), lower=False)


def _inv_gamma(rng: np.random.Generator, shape: float, rate: float) -> float:
    return float(1.0 / rng.gamma(shape, 1.0 / rate))


@dataclass
class QuantileFit:
    """Posterior chain of one quantile level plus the design it was fitted on."""

    tau: float
    design: GqrmDesign
    chain: Dict[str, np.ndarray]
    diagnostics: Dict[str, object] = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return len(self.chain["beta"])

    def params_at(self, i: int) -> GqrmParams:
        return _params_from(self.chain, lambda a: a[i], self.design)

    def posterior_median(self) -> GqrmParams:
        return _params_from(self.chain, lambda a: np.median(a, axis=0), self.design)


def _params_from(chain: Dict[str, np.ndarray], reduce, design: GqrmDesign) -> GqrmParams:
    beta = reduce(chain["beta"])
    return GqrmParams(
        beta0=float(beta[0]),
        alpha=float(beta[1]),
        beta1=float(beta[2]),
        beta2=float(beta[3]),
        beta3=float(beta[4]),
        site_beta0=np.asarray(reduce(chain["site_beta0"])),
        site_alpha=np.asarray(reduce(chain["site_alpha"])),
        psi=np.asarray(reduce(chain["psi"])),
        eta=np.asarray(reduce(chain["eta"])),
        log_sigma=np.asarray(reduce(chain["log_sigma"])),
        z_rho=np.asarray(reduce(chain["z_rho"])),
        mean_log_sigma=float(reduce(chain["mean_log_sigma"])),
        mean_z_rho=float(reduce(chain["mean_z_rho"])),
        variances={k: float(reduce(chain[f"var_{k}"])) for k in VARIANCES},
        decays={k: float(reduce(chain[f"phi_{k}"])) for k in GP_FIELDS},
        site_altitude=design.altitude,
        year_offset=design.year_offset,
    )


class GqrmSampler:
    """
    Metropolis-within-Gibbs sampler for one quantile level.

    One chain is strictly sequential; reproducible given the seed.
    """

    def __init__(self, design: GqrmDesign, tau: float, config: McmcConfig, priors: GqrmPriors, seed: int):
        if not 0 < tau < 1:
            raise ValidationError(f"tau must lie in (0, 1), got {tau}")
        self.design = design
        self.tau = tau
        self.config = config
        self.priors = priors
        self.seed = seed
        self.rng = substream(seed, f"gqrm:{tau:.4f}")

        self.theta = (1.0 - 2.0 * tau) / (tau * (1.0 - tau))
        self.kappa2 = 2.0 / (tau * (1.0 - tau))
        self.bounds = priors.decay_bounds or decay_bounds(design.distances)

        y = design.y
        self.resp = y[:, :, 1:]
        self.prev = y[:, :, :-1]
        ell = np.arange(1, design.n_days + 1)
        self.h1, self.h2 = harmonics(ell)
        self.tc = np.arange(1, design.n_years + 1) - design.year_offset

        self.iteration = 0
        self.state = self._initial_state()
        self.corr = {k: _ExpCorrelation(design.distances, self.state.decays[k], k) for k in GP_FIELDS}
        self.log_scale = {
            "z_rho": np.full(design.n_sites, np.log(config.initial_scale)),
            "log_sigma": np.full(design.n_sites, np.log(config.initial_scale)),
            "phi": {k: np.log(config.initial_scale) for k in GP_FIELDS},
        }
        self._reset_counters()
        self.accepted_total = {"z_rho": 0, "log_sigma": 0, "phi": 0}
        self.proposed_total = {"z_rho": 0, "log_sigma": 0, "phi": 0}
        self.v = np.ones_like(self.resp)
        self.draws: Dict[str, List[np.ndarray]] = {}

    # -- setup -------------------------------------------------------------

    def _initial_state(self) -> GqrmParams:
        d = self.design
        beta0 = float(np.quantile(self.resp, self.tau))
        sigma0 = max(float(np.mean(al_checkloss(self.resp - beta0, self.tau))), 1e-3)
        phi0 = float(np.sqrt(self.bounds[0] * self.bounds[1]))
        variances = {k: 1.0 for k in VARIANCES}
        if self.priors.psi_variance is not None:
            variances["psi"] = self.priors.psi_variance
        if self.priors.eta_variance is not None:
            variances["eta"] = self.priors.eta_variance
        return GqrmParams(
            beta0=beta0, alpha=0.0, beta1=0.0, beta2=0.0, beta3=0.0,
            site_beta0=np.zeros(d.n_sites),
            site_alpha=np.zeros(d.n_sites),
            psi=np.zeros(d.n_years),
            eta=np.zeros((d.n_sites, d.n_years)),
            log_sigma=np.full(d.n_sites, np.log(sigma0)),
            z_rho=np.zeros(d.n_sites),
            mean_log_sigma=float(np.log(sigma0)),
            mean_z_rho=0.0,
            variances=variances,
            decays={k: phi0 for k in GP_FIELDS},
            site_altitude=d.altitude,
            year_offset=d.year_offset,
        )

    def _reset_counters(self):
        n = self.design.n_sites
        self.batch_accept = {"z_rho": np.zeros(n), "log_sigma": np.zeros(n), "phi": {k: 0 for k in GP_FIELDS}}
        self.batch_count = 0
        self.batch_index = getattr(self, "batch_index", 0)

    # -- model pieces ------------------------------------------------------

    def _q(self) -> np.ndarray:
        st = self.state
        glob = (
            st.beta0
            + st.alpha * self.tc[None, :, None]
            + st.beta1 * self.h1[None, None, :]
            + st.beta2 * self.h2[None, None, :]
            + st.beta3 * self.design.altitude[:, None, None]
        )
        return glob + self._g()[:, :, None]

    def _g(self) -> np.ndarray:
        st = self.state
        return st.site_beta0[:, None] + st.site_alpha[:, None] * self.tc[None, :] + st.psi[None, :] + st.eta

    def _site_loglik(self, s: int, q: np.ndarray, rho_s: float, log_sigma_s: float) -> float:
        mu = q[s, :, 1:] + rho_s * (self.prev[s] - q[s, :, :-1])
        sigma = np.exp(log_sigma_s)
        r = (self.resp[s] - mu) / sigma
        return float(-r.size * log_sigma_s - np.sum(al_checkloss(r, self.tau)))

    def _conditional_prior(self, name: str, values: np.ndarray, mean: float, s: int) -> Tuple[float, float]:
        prec = self.corr[name].inverse / self.state.variances[name]
        dev = values - mean
        cond_mean = mean - (prec[s] @ dev - prec[s, s] * dev[s]) / prec[s, s]
        return cond_mean, 1.0 / prec[s, s]

    # -- Metropolis blocks -------------------------------------------------

    def _update_site_field(self, key: str, gp_name: str, q: np.ndarray):
        st = self.state
        values = getattr(st, key)
        mean = st.mean_z_rho if key == "z_rho" else st.mean_log_sigma
        for s in range(self.design.n_sites):
            current = values[s]
            proposal = current + np.exp(self.log_scale[key][s]) * self.rng.standard_normal()
            cond_mean, cond_var = self._conditional_prior(gp_name, values, mean, s)

            if key == "z_rho":
                ll_old = self._site_loglik(s, q, np.tanh(current / 2), st.log_sigma[s])
                ll_new = self._site_loglik(s, q, np.tanh(proposal / 2), st.log_sigma[s])
            else:
                rho_s = np.tanh(st.z_rho[s] / 2)
                ll_old = self._site_loglik(s, q, rho_s, current)
                ll_new = self._site_loglik(s, q, rho_s, proposal)

            log_ratio = (ll_new - ll_old) - 0.5 * ((proposal - cond_mean) ** 2 - (current - cond_mean) ** 2) / cond_var
            if np.log(self.rng.uniform()) < log_ratio:
                values[s] = proposal
                self.batch_accept[key][s] += 1
                self.accepted_total[key] += 1
            self.proposed_total[key] += 1

    def _field_values(self, name: str) -> Tuple[np.ndarray, float]:
        st = self.state
        return {
            "b0": (st.site_beta0, 0.0),
            "a": (st.site_alpha, 0.0),
            "s": (st.log_sigma, st.mean_log_sigma),
            "r": (st.z_rho, st.mean_z_rho),
        }[name]

    def _update_decays(self):
        lo, hi = self.bounds
        for name in GP_FIELDS:
            values, mean = self._field_values(name)
            variance = self.state.variances[name]
            current = self.corr[name]
            log_phi = np.log(current.phi)
            proposal_log = log_phi + np.exp(self.log_scale["phi"][name]) * self.rng.standard_normal()
            u = np.log(self.rng.uniform())
            self.proposed_total["phi"] += 1
            phi_new = float(np.exp(proposal_log))
            if not lo <= phi_new <= hi:
                continue
            candidate = _ExpCorrelation(self.design.distances, phi_new, name)
            log_ratio = (
                candidate.log_density(values - mean, variance) + proposal_log
                - current.log_density(values - mean, variance) - log_phi
            )
            if u < log_ratio:
                self.corr[name] = candidate
                self.state.decays[name] = phi_new
                self.batch_accept["phi"][name] += 1
                self.accepted_total["phi"] += 1

    # -- Gibbs blocks ------------------------------------------------------

    def _update_mixture(self, q: np.ndarray):
        st = self.state
        rho = st.rho[:, None, None]
        sigma = st.sigma[:, None, None]
        mu = q[:, :, 1:] + rho * (self.prev - q[:, :, :-1])
        r = self.resp - mu
        chi = np.maximum(r ** 2 / (self.kappa2 * sigma), 1e-12)
        psi = np.broadcast_to(self.theta ** 2 / (self.kappa2 * sigma) + 2.0 / sigma, chi.shape)
        self.v = 1.0 / self.rng.wald(np.sqrt(psi / chi), psi)

    def _update_gaussian_blocks(self):
        st = self.state
        d = self.design
        rho = st.rho
        a = (1.0 - rho)[:, None, None]
        w = 1.0 / (self.kappa2 * st.sigma[:, None, None] * self.v)
        base = self.resp - rho[:, None, None] * self.prev - self.theta * self.v

        # global coefficients
        shape = self.resp.shape
        h1c, h1p = self.h1[1:], self.h1[:-1]
        h2c, h2p = self.h2[1:], self.h2[:-1]
        cols = [
            np.broadcast_to(a, shape),
            np.broadcast_to(a * self.tc[None, :, None], shape),
            np.broadcast_to(h1c[None, None, :] - rho[:, None, None] * h1p[None, None, :], shape),
            np.broadcast_to(h2c[None, None, :] - rho[:, None, None] * h2p[None, None, :], shape),
            np.broadcast_to(a * d.altitude[:, None, None], shape),
        ]
        design = np.stack([c.ravel() for c in cols], axis=1)
        target = (base - a * self._g()[:, :, None]).ravel()
        wf = w.ravel()
        precision = design.T @ (design * wf[:, None]) + np.eye(5) / self.priors.coef_variance
        beta = _draw_gaussian(self.rng, precision, design.T @ (wf * target), "global coefficients")
        st.beta0, st.alpha, st.beta1, st.beta2, st.beta3 = (float(b) for b in beta)

        fitted_global = (design @ beta).reshape(shape)
        resid = base - fitted_global
        tc = self.tc[None, :]

        # local spatial intercept
        other = (st.site_alpha[:, None] * tc + st.psi[None, :] + st.eta)[:, :, None]
        e = resid - a * other
        diag = (a[:, 0, 0] ** 2) * w.sum(axis=(1, 2))
        lin = a[:, 0, 0] * (w * e).sum(axis=(1, 2))
        prec = np.diag(diag) + self.corr["b0"].inverse / st.variances["b0"]
        st.site_beta0 = _draw_gaussian(self.rng, prec, lin, "site intercept field")

        # local spatial trend
        other = (st.site_beta0[:, None] + st.psi[None, :] + st.eta)[:, :, None]
        e = resid - a * other
        tcw = self.tc[None, :, None]
        diag = (a[:, 0, 0] ** 2) * (w * tcw ** 2).sum(axis=(1, 2))
        lin = a[:, 0, 0] * (w * tcw * e).sum(axis=(1, 2))
        prec = np.diag(diag) + self.corr["a"].inverse / st.variances["a"]
        st.site_alpha = _draw_gaussian(self.rng, prec, lin, "site trend field")

        # global annual intercepts
        other = (st.site_beta0[:, None] + st.site_alpha[:, None] * tc + st.eta)[:, :, None]
        e = resid - a * other
        diag = (w * a ** 2).sum(axis=(0, 2)) + 1.0 / st.variances["psi"]
        lin = (w * a * e).sum(axis=(0, 2))
        st.psi = lin / diag + self.rng.standard_normal(d.n_years) / np.sqrt(diag)

        # local annual intercepts
        other = (st.site_beta0[:, None] + st.site_alpha[:, None] * tc + st.psi[None, :])[:, :, None]
        e = resid - a * other
        diag = (w * a ** 2).sum(axis=2) + 1.0 / st.variances["eta"]
        lin = (w * a * e).sum(axis=2)
        st.eta = lin / diag + self.rng.standard_normal(lin.shape) / np.sqrt(diag)

    def _update_hyper(self):
        st = self.state
        p = self.priors
        for name in GP_FIELDS:
            values, mean = self._field_values(name)
            quad = self.corr[name].quad(values - mean)
            st.variances[name] = _inv_gamma(self.rng, p.ig_shape + len(values) / 2.0, p.ig_rate + quad / 2.0)

        if p.psi_variance is None:
            st.variances["psi"] = _inv_gamma(self.rng, p.ig_shape + st.psi.size / 2.0, p.ig_rate + st.psi @ st.psi / 2.0)
        if p.eta_variance is None:
            st.variances["eta"] = _inv_gamma(
                self.rng, p.ig_shape + st.eta.size / 2.0, p.ig_rate + float(np.sum(st.eta ** 2)) / 2.0
            )

        ones = np.ones(self.design.n_sites)
        for name, attr in (("s", "mean_log_sigma"), ("r", "mean_z_rho")):
            values, _ = self._field_values(name)
            rinv = self.corr[name].inverse
            prec = ones @ rinv @ ones / st.variances[name] + 1.0 / p.coef_variance
            mean = (ones @ rinv @ values / st.variances[name]) / prec
            setattr(st, attr, float(mean + self.rng.standard_normal() / np.sqrt(prec)))

    # -- driver ------------------------------------------------------------

    def step(self):
        q = self._q()
        self._update_site_field("z_rho", "r", q)
        self._update_site_field("log_sigma", "s", q)
        self._update_mixture(q)
        self._update_gaussian_blocks()
        self._update_hyper()
        self._update_decays()
        self.iteration += 1
        self.batch_count += 1

        if not (np.isfinite(self.state.beta0) and np.all(np.isfinite(self.state.eta))
                and np.all(np.isfinite(self.state.log_sigma)) and np.all(np.isfinite(self.state.z_rho))):
            raise NumericalError(f"Non-finite parameter state at iteration {self.iteration}")

        if self.iteration <= self.config.n_burn and self.batch_count == ADAPT_EVERY:
            self._adapt()

    def _adapt(self):
        self.batch_index += 1
        delta = min(0.1, 1.0 / np.sqrt(self.batch_index))
        for key in ("z_rho", "log_sigma"):
            rate = self.batch_accept[key] / self.batch_count
            self.log_scale[key] += np.where(rate > TARGET_ACCEPTANCE, delta, -delta)
        for name in GP_FIELDS:
            rate = self.batch_accept["phi"][name] / self.batch_count
            self.log_scale["phi"][name] += delta if rate > TARGET_ACCEPTANCE else -delta
        self._reset_counters()

    def _record(self):
        st = self.state
        snapshot = {
            "beta": np.array([st.beta0, st.alpha, st.beta1, st.beta2, st.beta3]),
            "site_beta0": st.site_beta0.copy(),
            "site_alpha": st.site_alpha.copy(),
            "psi": st.psi.copy(),
            "eta": st.eta.copy(),
            "log_sigma": st.log_sigma.copy(),
            "z_rho": st.z_rho.copy(),
            "mean_log_sigma": np.array(st.mean_log_sigma),
            "mean_z_rho": np.array(st.mean_z_rho),
        }
        snapshot.update({f"var_{k}": np.array(v) for k, v in st.variances.items()})
        snapshot.update({f"phi_{k}": np.array(v) for k, v in st.decays.items()})
        for key, value in snapshot.items():
            self.draws.setdefault(key, []).append(value)

    @property
    def total_iterations(self) -> int:
        return self.config.n_burn + self.config.n_keep * self.config.thin

    def run(self) -> QuantileFit:
        cfg = self.config
        while self.iteration < self.total_iterations:
            self.step()
            if self.iteration > cfg.n_burn and (self.iteration - cfg.n_burn) % cfg.thin == 0:
                self._record()
            if cfg.checkpoint_every and cfg.checkpoint_path and self.iteration % cfg.checkpoint_every == 0:
                self.save_checkpoint(cfg.checkpoint_path)

        chain = {k: np.stack(v) for k, v in self.draws.items()}
        fit = QuantileFit(self.tau, self.design, chain)
        fit.diagnostics = chain_diagnostics(fit, self.acceptance_rates())
        logger.info(
            f"GQRM tau={self.tau:.3f}: {self.iteration} iterations, "
            f"acceptance z_rho={fit.diagnostics['acceptance']['z_rho']:.2f} "
            f"log_sigma={fit.diagnostics['acceptance']['log_sigma']:.2f}"
        )
        return fit

    def acceptance_rates(self) -> Dict[str, float]:
        return {k: self.accepted_total[k] / max(self.proposed_total[k], 1) for k in self.accepted_total}

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path: str) -> None:
        st = self.state
        arrays = {f"draw_{k}": np.stack(v) for k, v in self.draws.items()}
        meta = {
            "version": CHECKPOINT_VERSION,
            "tau": self.tau,
            "seed": self.seed,
            "iteration": self.iteration,
            "batch_index": self.batch_index,
            "rng": self.rng.bit_generator.state,
            "accepted_total": self.accepted_total,
            "proposed_total": self.proposed_total,
            "scalars": {
                "beta": [st.beta0, st.alpha, st.beta1, st.beta2, st.beta3],
                "mean_log_sigma": st.mean_log_sigma,
                "mean_z_rho": st.mean_z_rho,
                "variances": st.variances,
                "decays": st.decays,
                "phi_log_scale": self.log_scale["phi"],
            },
        }
        tmp = Path(path).with_suffix(".tmp.npz")
        np.savez(
            tmp,
            meta=np.array(json.dumps(meta, default=float)),
            site_beta0=st.site_beta0, site_alpha=st.site_alpha, psi=st.psi, eta=st.eta,
            log_sigma=st.log_sigma, z_rho=st.z_rho, v=self.v,
            scale_z_rho=self.log_scale["z_rho"], scale_log_sigma=self.log_scale["log_sigma"],
            **arrays,
        )
        tmp.replace(path)
        logger.debug(f"Checkpoint written at iteration {self.iteration}: {path}")

    @classmethod
    def from_checkpoint(cls, path: str, design: GqrmDesign, config: McmcConfig, priors: GqrmPriors) -> "GqrmSampler":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValidationError(f"Unsupported checkpoint version {meta.get('version')}")
            sampler = cls(design, meta["tau"], config, priors, meta["seed"])
            st = sampler.state
            sc = meta["scalars"]
            st.beta0, st.alpha, st.beta1, st.beta2, st.beta3 = sc["beta"]
            st.mean_log_sigma = sc["mean_log_sigma"]
            st.mean_z_rho = sc["mean_z_rho"]
            st.variances = {k: float(v) for k, v in sc["variances"].items()}
            st.decays = {k: float(v) for k, v in sc["decays"].items()}
            for key in ("site_beta0", "site_alpha", "psi", "eta", "log_sigma", "z_rho"):
                setattr(st, key, data[key].copy())
            sampler.v = data["v"].copy()
            sampler.log_scale = {
                "z_rho": data["scale_z_rho"].copy(),
                "log_sigma": data["scale_log_sigma"].copy(),
                "phi": {k: float(v) for k, v in sc["phi_log_scale"].items()},
            }
            sampler.draws = {
                k[len("draw_"):]: list(data[k]) for k in data.files if k.startswith("draw_")
            }
        sampler.iteration = meta["iteration"]
        sampler.batch_index = meta["batch_index"]
        sampler.accepted_total = meta["accepted_total"]
        sampler.proposed_total = meta["proposed_total"]
        sampler.rng.bit_generator.state = meta["rng"]
        sampler.corr = {k: _ExpCorrelation(design.distances, st.decays[k], k) for k in GP_FIELDS}
        logger.info(f"Resumed GQRM chain tau={sampler.tau:.3f} at iteration {sampler.iteration}")
        return sampler


def fit(
    design: GqrmDesign,
    tau: float,
    config: McmcConfig = McmcConfig(),
    priors: GqrmPriors = GqrmPriors(),
    seed: int = 0,
    resume: bool = False,
) -> QuantileFit:
    """
    Fit the quantile autoregression at level tau.

    Args:
        design: gap-free station data from build_design
        tau: quantile level in (0, 1)
        config: chain sizes, thinning and checkpointing
        priors: prior settings
        seed: root seed; the chain uses the "gqrm:<tau>" substream
        resume: continue from config.checkpoint_path when it exists

    Returns:
        QuantileFit with the kept draws and diagnostics
    """
    if resume and config.checkpoint_path and Path(config.checkpoint_path).exists():
        sampler = GqrmSampler.from_checkpoint(config.checkpoint_path, design, config, priors)
    else:
        sampler = GqrmSampler(design, tau, config, priors, seed)
    return sampler.run()


def plugin_quantiles(fit: QuantileFit) -> pd.DataFrame:
    """
    Plug-in conditional quantiles Q* from posterior medians.

    Returns a long table (station_id, date, year_index, day_of_season, q_star)
    for every station, year and day >= 2.
    """
    for key, draws in fit.chain.items():
        if not np.all(np.isfinite(draws)):
            raise NumericalError(f"Chain for {key} contains non-finite draws")

    params = fit.posterior_median()
    d = fit.design
    q_star = quantile_array(params, d.y)

    s_idx, t_idx, l_idx = np.meshgrid(
        np.arange(d.n_sites), np.arange(d.n_years), np.arange(1, d.n_days), indexing="ij"
    )
    frame = pd.DataFrame({
        "station_id": np.asarray(d.station_ids)[s_idx.ravel()],
        "date": d.dates[t_idx.ravel(), l_idx.ravel()],
        "year_index": t_idx.ravel() + 1,
        "day_of_season": l_idx.ravel() + 1,
        "q_star": q_star.ravel(),
    })
    if not np.all(np.isfinite(frame["q_star"])):
        raise NumericalError("Non-finite plug-in quantiles")
    return frame


def quantile_array(params: GqrmParams, y: np.ndarray) -> np.ndarray:
    """Q* for all (site, year, day >= 2) given observed series y (site, year, day)."""
    n_sites, n_years, n_days = y.shape
    s = np.arange(n_sites)[:, None, None]
    t = np.arange(1, n_years + 1)[None, :, None]
    ell = np.arange(1, n_days + 1)[None, None, :]
    q = params.q(s, t, ell)
    return q[:, :, 1:] + params.rho[:, None, None] * (y[:, :, :-1] - q[:, :, :-1])


def effective_sample_size(draws: np.ndarray) -> float:
    """ESS from the initial monotone sequence of autocorrelation pair sums."""
    x = np.asarray(draws, dtype=float)
    n = len(x)
    if n < 4 or np.var(x) < 1e-14:
        return float(n)
    z = x - x.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    spectrum = np.abs(np.fft.rfft(z, size)) ** 2
    acov = np.fft.irfft(spectrum, size)[:n]
    rho = acov / acov[0]

    tau_hat = -1.0
    old_pair = np.inf
    for p in range(0, (n - 1) // 2):
        pair = rho[2 * p] + rho[2 * p + 1]
        if pair < 0:
            break
        pair = min(pair, old_pair)
        tau_hat += 2.0 * pair
        old_pair = pair
    return float(n / max(tau_hat, 1e-12))


def chain_diagnostics(fit: QuantileFit, acceptance: Dict[str, float]) -> Dict[str, object]:
    ess = {}
    for key, draws in fit.chain.items():
        flat = draws.reshape(len(draws), -1)
        ess[key] = min(effective_sample_size(flat[:, j]) for j in range(flat.shape[1]))
    finite = all(bool(np.all(np.isfinite(v))) for v in fit.chain.values())
    return {
        "tau": fit.tau,
        "n_draws": fit.n_draws,
        "min_ess": ess,
        "acceptance": acceptance,
        "finite": finite,
    }
