"""
Epidemiological Model Service

Conditional Poisson models for the case-crossover dataset:
log mu = b0 + f(bin(X)) + b1 holiday [+ b2 heatwave] + u_j, with a
second-order random walk on the binned exposure effect, a
penalized-complexity prior on its standard deviation, Gaussian priors on the
fixed and stratum effects, MAP + Laplace per smoothing precision and
numerical integration over a log grid of precisions.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg, optimize, sparse, stats
from scipy.special import logsumexp

from services.casecrossover import AGE_BANDS, SEXES
from services.errors import ConvergenceError, DataError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

LIKELIHOOD_POISSON = "poisson"
LIKELIHOOD_CONDITIONAL = "conditional"
SEPARATION_LIMIT = 10.0
DEFAULT_TAU_GRID = tuple(float(t) for t in np.logspace(0.0, 8.0, 25))


def pc_prior_rate(u: float, alpha: float) -> float:
    """Exponential rate on the standard deviation with P(sd > u) = alpha."""
    if u <= 0 or not 0 < alpha < 1:
        raise ValidationError("PC prior needs u > 0 and alpha in (0, 1)")
    return -np.log(alpha) / u


def second_differences(n: int) -> np.ndarray:
    return np.diff(np.eye(n), n=2, axis=0)


def rw2_penalty(f: np.ndarray, tau: float) -> float:
    """(tau / 2) * sum of squared second differences."""
    d = np.diff(np.asarray(f, dtype=float), n=2)
    return 0.5 * tau * float(d @ d)


def rw2_neg_log_prior(f: np.ndarray, tau: float) -> float:
    """Negative log density of the intrinsic RW2 prior (rank n - 2)."""
    rank = max(len(f) - 2, 0)
    return rw2_penalty(f, tau) + 0.5 * rank * (np.log(2.0 * np.pi) - np.log(tau))


@dataclass(frozen=True)
class Rw2EffectSpec:
    n_bins: int = 100
    u: float = 0.1
    alpha: float = 0.01
    sum_to_zero: bool = True

    def __post_init__(self):
        if self.n_bins < 10:
            raise ValidationError("n_bins must be >= 10")
        pc_prior_rate(self.u, self.alpha)

    @property
    def rate(self) -> float:
        return pc_prior_rate(self.u, self.alpha)


@dataclass(frozen=True)
class EffectBins:
    """Equal-width bins over the pooled exposure range."""

    edges: np.ndarray

    @classmethod
    def from_values(cls, values: np.ndarray, n_bins: int) -> "EffectBins":
        values = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise DataError("Exposure values must be finite")
        lo, hi = float(values.min()), float(values.max())
        if hi <= lo:
            raise DataError("Exposure has no spread; cannot bin")
        return cls(np.linspace(lo, hi, n_bins + 1))

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    @property
    def mids(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def index(self, values) -> np.ndarray:
        idx = np.searchsorted(self.edges, np.asarray(values, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)


@dataclass(frozen=True)
class EpiModelSpec:
    exposure: Optional[str] = None
    heatwave: Optional[str] = None
    effect: Rw2EffectSpec = Rw2EffectSpec()
    tau_grid: Tuple[float, ...] = DEFAULT_TAU_GRID
    coef_variance: float = 1000.0
    stratum_variance: float = 100.0
    likelihood: str = LIKELIHOOD_POISSON
    max_iter: int = 100

    def __post_init__(self):
        if self.likelihood not in (LIKELIHOOD_POISSON, LIKELIHOOD_CONDITIONAL):
            raise ValidationError(f"Unknown likelihood '{self.likelihood}'")
        if not self.tau_grid or any(t <= 0 for t in self.tau_grid):
            raise ValidationError("tau grid must be non-empty and positive")


@dataclass
class EpiModelState:
    beta0: float
    beta1: float
    beta2: Optional[float]
    f: np.ndarray
    u: np.ndarray
    tau: float
    bins: Optional[EffectBins] = None


def sum_to_zero_basis(n: int) -> np.ndarray:
    """Orthonormal basis (n x n-1) of vectors summing to zero."""
    return linalg.null_space(np.ones((1, n)))


class _Design:
    """Column layout shared by both likelihoods."""

    def __init__(self, dataset: pd.DataFrame, spec: EpiModelSpec, bins: Optional[EffectBins] = None):
        required = {"stratum", "case", "holiday"}
        missing = required - set(dataset.columns)
        if missing:
            raise DataError(f"Dataset lacks columns {sorted(missing)}")
        if dataset.empty:
            raise DataError("Empty case-crossover dataset")

        data = dataset.sort_values(["stratum", "date"] if "date" in dataset.columns else ["stratum"], kind="mergesort")
        self.codes, self.strata = pd.factorize(data["stratum"], sort=True)
        sizes = np.bincount(self.codes)
        if sizes.min() < 2:
            raise DataError("Every stratum needs at least 2 rows")
        events = np.bincount(self.codes, weights=data["case"].to_numpy(dtype=float))
        if not np.allclose(events, 1.0):
            raise DataError("Every stratum needs exactly one event row")

        self.y = data["case"].to_numpy(dtype=float)
        self.n_strata = len(self.strata)
        self.spec = spec
        columns: List[np.ndarray] = []
        names: List[str] = []
        prior_prec: List[float] = []
        coef_prec = 1.0 / spec.coef_variance

        self.with_intercept = spec.likelihood == LIKELIHOOD_POISSON and spec.effect.sum_to_zero
        if self.with_intercept:
            columns.append(np.ones((len(data), 1)))
            names.append("beta0")
            prior_prec.append(coef_prec)

        self.bins = None
        self.basis = None
        self.effect_slice = slice(0, 0)
        if spec.exposure is not None:
            x = data[spec.exposure].to_numpy(dtype=float)
            self.bins = bins or EffectBins.from_values(x, spec.effect.n_bins)
            n = self.bins.n_bins
            self.basis = sum_to_zero_basis(n) if spec.effect.sum_to_zero else np.eye(n)
            start = len(names)
            columns.append(self.basis[self.bins.index(x)])
            names.extend(f"g{i}" for i in range(self.basis.shape[1]))
            prior_prec.extend([0.0] * self.basis.shape[1])
            self.effect_slice = slice(start, len(names))

        columns.append(data[["holiday"]].to_numpy(dtype=float))
        names.append("beta1_holiday")
        prior_prec.append(coef_prec)
        if spec.heatwave is not None:
            columns.append(data[[spec.heatwave]].to_numpy(dtype=float))
            names.append("beta2_heatwave")
            prior_prec.append(coef_prec)

        self.A = np.hstack(columns)
        self.names = names
        self.prior_prec = np.array(prior_prec)
        p = len(names)
        self.K = np.zeros((p, p))
        self.rank = 0
        if self.basis is not None and self.basis.shape[0] > 2:
            d = second_differences(self.basis.shape[0]) @ self.basis
            self.K[self.effect_slice, self.effect_slice] = d.T @ d
            self.rank = self.basis.shape[0] - 2
        self.G = sparse.csr_matrix(
            (np.ones(len(self.codes)), (np.arange(len(self.codes)), self.codes)),
            shape=(len(self.codes), self.n_strata),
        )

    @property
    def n_coef(self) -> int:
        return self.A.shape[1]

    def precision(self, tau: float) -> np.ndarray:
        return np.diag(self.prior_prec) + tau * self.K

    def prior_log_norm(self, tau: float) -> float:
        """Normalizing constants of the Gaussian priors on coefficients."""
        proper = self.prior_prec[self.prior_prec > 0]
        out = 0.5 * float(np.sum(np.log(proper))) - 0.5 * len(proper) * np.log(2.0 * np.pi)
        out += 0.5 * self.rank * (np.log(tau) - np.log(2.0 * np.pi))
        return out


class PoissonModel:
    """Poisson likelihood with explicit stratum effects, x = (theta, u)."""

    def __init__(self, design: _Design):
        self.d = design
        self.su2 = design.spec.stratum_variance

    def split(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return x[: self.d.n_coef], x[self.d.n_coef:]

    def initial(self) -> np.ndarray:
        sizes = np.bincount(self.d.codes)
        return np.concatenate([np.zeros(self.d.n_coef), np.log(1.0 / sizes)])

    def eta(self, x: np.ndarray) -> np.ndarray:
        theta, u = self.split(x)
        return self.d.A @ theta + u[self.d.codes]

    def objective(self, x: np.ndarray, tau: float) -> float:
        """Negative log posterior up to constants."""
        theta, u = self.split(x)
        eta = self.eta(x)
        ll = float(self.d.y @ eta - np.sum(np.exp(eta)))
        return -ll + 0.5 * theta @ self.d.precision(tau) @ theta + 0.5 * (u @ u) / self.su2

    def gradient(self, x: np.ndarray, tau: float) -> np.ndarray:
        theta, u = self.split(x)
        r = self.d.y - np.exp(self.eta(x))
        g_theta = self.d.A.T @ r - self.d.precision(tau) @ theta
        g_u = self.d.G.T @ r - u / self.su2
        return -np.concatenate([g_theta, g_u])

    def _blocks(self, x: np.ndarray, tau: float):
        w = np.exp(self.eta(x))
        wa = self.d.A * w[:, None]
        h_tt = self.d.A.T @ wa + self.d.precision(tau)
        h_tu = np.asarray((self.d.G.T @ wa).T)
        h_uu = np.asarray(self.d.G.T @ w).ravel() + 1.0 / self.su2
        schur = h_tt - (h_tu / h_uu) @ h_tu.T
        return h_tu, h_uu, schur

    def newton_step(self, x: np.ndarray, tau: float) -> np.ndarray:
        grad = -self.gradient(x, tau)
        g_t, g_u = self.split(grad)
        h_tu, h_uu, schur = self._blocks(x, tau)
        d_t = linalg.solve(schur, g_t - h_tu @ (g_u / h_uu), assume_a="pos")
        d_u = (g_u - h_tu.T @ d_t) / h_uu
        return np.concatenate([d_t, d_u])

    def laplace(self, x: np.ndarray, tau: float) -> Tuple[float, np.ndarray]:
        """Log marginal likelihood and covariance of theta at the mode."""
        _, h_uu, schur = self._blocks(x, tau)
        chol = linalg.cholesky(schur, lower=True)
        logdet = float(np.sum(np.log(h_uu))) + 2.0 * float(np.sum(np.log(np.diag(chol))))
        n_u = self.d.n_strata
        log_joint = -self.objective(x, tau) + self.d.prior_log_norm(tau)
        log_joint += -0.5 * n_u * np.log(2.0 * np.pi * self.su2)
        log_ml = log_joint + 0.5 * (len(x)) * np.log(2.0 * np.pi) - 0.5 * logdet
        cov = linalg.cho_solve((chol, True), np.eye(len(schur)))
        return log_ml, cov


class ConditionalModel:
    """Multinomial likelihood of the event row within each stratum, x = theta."""

    def __init__(self, design: _Design):
        self.d = design

    def initial(self) -> np.ndarray:
        return np.zeros(self.d.n_coef)

    def _probs(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        eta = self.d.A @ x
        top = np.full(self.d.n_strata, -np.inf)
        np.maximum.at(top, self.d.codes, eta)
        e = np.exp(eta - top[self.d.codes])
        total = np.bincount(self.d.codes, weights=e, minlength=self.d.n_strata)
        return eta, e / total[self.d.codes]

    def loglik(self, x: np.ndarray) -> float:
        eta, p = self._probs(x)
        return float(self.d.y @ np.log(p))

    def objective(self, x: np.ndarray, tau: float) -> float:
        return -self.loglik(x) + 0.5 * x @ self.d.precision(tau) @ x

    def gradient(self, x: np.ndarray, tau: float) -> np.ndarray:
        _, p = self._probs(x)
        return -(self.d.A.T @ (self.d.y - p)) + self.d.precision(tau) @ x

    def hessian(self, x: np.ndarray, tau: float) -> np.ndarray:
        _, p = self._probs(x)
        pa = self.d.A * p[:, None]
        mean = np.asarray(self.d.G.T @ pa)
        return self.d.A.T @ pa - mean.T @ mean + self.d.precision(tau)

    def newton_step(self, x: np.ndarray, tau: float) -> np.ndarray:
        return linalg.solve(self.hessian(x, tau), -self.gradient(x, tau), assume_a="pos")

    def laplace(self, x: np.ndarray, tau: float) -> Tuple[float, np.ndarray]:
        h = self.hessian(x, tau)
        chol = linalg.cholesky(h, lower=True)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        log_ml = -self.objective(x, tau) + self.d.prior_log_norm(tau) + 0.5 * len(x) * np.log(2.0 * np.pi) - 0.5 * logdet
        return log_ml, linalg.cho_solve((chol, True), np.eye(len(h)))


def _mode(model, tau: float, x0: np.ndarray, max_iter: int) -> np.ndarray:
    """Damped Newton iterations with step halving."""
    x = x0.copy()
    obj = model.objective(x, tau)
    trace = [obj]
    for _ in range(max_iter):
        try:
            step = model.newton_step(x, tau)
        except linalg.LinAlgError as e:
            raise NumericalError(f"Singular Hessian at tau={tau:.3g}") from e
        t = 1.0
        while True:
            cand = x + t * step
            val = model.objective(cand, tau)
            if np.isfinite(val) and val <= obj + 1e-10 * max(1.0, abs(obj)):
                break
            t *= 0.5
            if t < 1e-10:
                raise ConvergenceError(f"Line search failed at tau={tau:.3g}", trace=trace)
        x, obj = cand, val
        trace.append(obj)
        if np.max(np.abs(t * step)) < 1e-9:
            return x
    raise ConvergenceError(f"Newton iterations did not converge at tau={tau:.3g}", trace=trace)


def log_posterior(dataset: pd.DataFrame, spec: EpiModelSpec, x: np.ndarray, tau: float) -> float:
    """Penalized log posterior (up to constants) at parameter vector x."""
    model = _model(_Design(dataset, spec))
    return -model.objective(np.asarray(x, dtype=float), tau)


def log_posterior_gradient(dataset: pd.DataFrame, spec: EpiModelSpec, x: np.ndarray, tau: float) -> np.ndarray:
    model = _model(_Design(dataset, spec))
    return -model.gradient(np.asarray(x, dtype=float), tau)


def _model(design: _Design):
    if design.spec.likelihood == LIKELIHOOD_CONDITIONAL:
        return ConditionalModel(design)
    return PoissonModel(design)


def pc_log_prior_log_tau(tau: np.ndarray, rate: float) -> np.ndarray:
    """PC prior on sd = tau^(-1/2) expressed as a density over log(tau)."""
    sd = np.asarray(tau, dtype=float) ** -0.5
    return np.log(rate / 2.0) - rate * sd + np.log(sd)


def _mixture_quantile(means: np.ndarray, sds: np.ndarray, weights: np.ndarray, prob: float) -> float:
    keep = weights > 1e-12
    m, s, w = means[keep], np.maximum(sds[keep], 1e-12), weights[keep] / weights[keep].sum()
    if len(m) == 1:
        return float(m[0] + s[0] * stats.norm.ppf(prob))
    lo = float(np.min(m - 10 * s))
    hi = float(np.max(m + 10 * s))
    return float(optimize.brentq(lambda v: float(w @ stats.norm.cdf((v - m) / s)) - prob, lo, hi, xtol=1e-12))


def _interval(means: np.ndarray, sds: np.ndarray, weights: np.ndarray) -> Tuple[float, float, float]:
    return tuple(_mixture_quantile(means, sds, weights, p) for p in (0.5, 0.025, 0.975))


@dataclass
class EpiFit:
    spec: EpiModelSpec
    names: List[str]
    bins: Optional[EffectBins]
    basis: Optional[np.ndarray]
    effect_slice: slice
    tau_grid: np.ndarray
    weights: np.ndarray
    modes: np.ndarray
    covs: np.ndarray
    stratum_effects: np.ndarray
    n_strata: int
    n_rows: int
    trace: Dict[str, float] = field(default_factory=dict)

    def coefficient_summary(self) -> pd.DataFrame:
        rows = []
        for i, name in enumerate(self.names):
            if name.startswith("g"):
                continue
            sds = np.sqrt(self.covs[:, i, i])
            med, lo, hi = _interval(self.modes[:, i], sds, self.weights)
            rows.append({
                "parameter": name,
                "median": med,
                "q025": lo,
                "q975": hi,
                "separation": bool(abs(med) > SEPARATION_LIMIT),
            })
        return pd.DataFrame(rows)

    def coefficient(self, name: str) -> Dict[str, float]:
        table = self.coefficient_summary().set_index("parameter")
        if name not in table.index:
            raise DataError(f"Model has no coefficient {name}")
        return table.loc[name].to_dict()

    def effect_summary(self) -> pd.DataFrame:
        """Posterior median and 95% interval of the log-RR per exposure bin."""
        if self.bins is None:
            raise DataError("Model has no exposure effect")
        sl = self.effect_slice
        means = self.modes[:, sl] @ self.basis.T
        variances = np.einsum("bj,kji,bi->kb", self.basis, self.covs[:, sl, sl], self.basis)
        rows = []
        for b, mid in enumerate(self.bins.mids):
            med, lo, hi = _interval(means[:, b], np.sqrt(np.clip(variances[:, b], 0.0, None)), self.weights)
            rows.append({"bin_mid": mid, "logrr_med": med, "logrr_lo": lo, "logrr_hi": hi})
        return pd.DataFrame(rows)

    def state(self) -> EpiModelState:
        """Mode at the highest-weight smoothing precision."""
        k = int(np.argmax(self.weights))
        theta = self.modes[k]
        values = dict(zip(self.names, theta))
        f = theta[self.effect_slice] @ self.basis.T if self.basis is not None else np.zeros(0)
        return EpiModelState(
            beta0=float(values.get("beta0", 0.0)),
            beta1=float(values["beta1_holiday"]),
            beta2=float(values["beta2_heatwave"]) if "beta2_heatwave" in values else None,
            f=f,
            u=self.stratum_effects,
            tau=float(self.tau_grid[k]),
            bins=self.bins,
        )


def fit(dataset: pd.DataFrame, spec: EpiModelSpec, bins: Optional[EffectBins] = None) -> EpiFit:
    """
    MAP + Laplace fit on every grid precision, then mixture over the grid.

    Weights are proportional to the Laplace marginal likelihood times the PC
    prior density on log precision (the grid is evenly spaced in log tau).
    """
    design = _Design(dataset, spec, bins)
    model = _model(design)
    taus = np.sort(np.asarray(spec.tau_grid, dtype=float))
    if design.rank == 0:
        taus = taus[:1]

    x = model.initial()
    modes, covs, log_ml, last = [], [], [], None
    for tau in taus:
        x = _mode(model, tau, x, spec.max_iter)
        lml, cov = model.laplace(x, tau)
        modes.append(x[: design.n_coef])
        covs.append(cov)
        log_ml.append(lml)
        last = x

    log_w = np.array(log_ml)
    if design.rank > 0:
        log_w = log_w + pc_log_prior_log_tau(taus, spec.effect.rate)
    weights = np.exp(log_w - logsumexp(log_w))

    stratum_effects = last[design.n_coef:] if spec.likelihood == LIKELIHOOD_POISSON else np.zeros(0)
    result = EpiFit(
        spec=spec,
        names=design.names,
        bins=design.bins,
        basis=design.basis,
        effect_slice=design.effect_slice,
        tau_grid=taus,
        weights=weights,
        modes=np.array(modes),
        covs=np.array(covs),
        stratum_effects=stratum_effects,
        n_strata=design.n_strata,
        n_rows=len(design.y),
    )
    summary = result.coefficient_summary()
    for row in summary[summary["separation"]].itertuples():
        logger.warning(f"Possible separation: |{row.parameter}| = {abs(row.median):.2f}")
    logger.info(
        f"Epi fit ({spec.likelihood}, exposure={spec.exposure}, heatwave={spec.heatwave}): "
        f"{design.n_strata} strata, tau mode {taus[int(np.argmax(weights))]:.3g}"
    )
    return result


def linear_predictor(rows: pd.DataFrame, state: EpiModelState, spec: EpiModelSpec) -> np.ndarray:
    """Exposure, holiday and heatwave part of eta (intercept and stratum effect excluded)."""
    eta = state.beta1 * rows["holiday"].to_numpy(dtype=float)
    if spec.exposure is not None:
        if state.bins is None:
            raise DataError("State has no exposure bins")
        eta = eta + state.f[state.bins.index(rows[spec.exposure].to_numpy(dtype=float))]
    if spec.heatwave is not None and state.beta2 is not None:
        eta = eta + state.beta2 * rows[spec.heatwave].to_numpy(dtype=float)
    return eta


def conditional_loglik(stratum: pd.DataFrame, state: EpiModelState, spec: EpiModelSpec) -> float:
    """log P(event row | one event in the stratum) = eta_event - log sum exp(eta)."""
    cases = stratum["case"].to_numpy()
    if cases.sum() != 1:
        raise DataError("A stratum needs exactly one event row")
    eta = linear_predictor(stratum, state, spec)
    return float(eta[cases == 1][0] - logsumexp(eta))


@dataclass
class RiskCurve:
    bin_mid: np.ndarray
    logrr_med: np.ndarray
    logrr_lo: np.ndarray
    logrr_hi: np.ndarray
    mmt: float

    @property
    def rr_norm(self) -> np.ndarray:
        return np.exp(self.logrr_med)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "bin_mid": self.bin_mid,
            "logrr_med": self.logrr_med,
            "logrr_lo": self.logrr_lo,
            "logrr_hi": self.logrr_hi,
            "rr_norm": self.rr_norm,
        })

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "RiskCurve":
        med = frame["logrr_med"].to_numpy(dtype=float)
        return cls(
            bin_mid=frame["bin_mid"].to_numpy(dtype=float),
            logrr_med=med,
            logrr_lo=frame["logrr_lo"].to_numpy(dtype=float),
            logrr_hi=frame["logrr_hi"].to_numpy(dtype=float),
            mmt=float(frame["bin_mid"].iloc[int(np.argmin(med))]),
        )


def risk_curve(result: EpiFit) -> RiskCurve:
    """Curve re-centred at the bin whose posterior median log-RR is smallest."""
    table = result.effect_summary()
    med = table["logrr_med"].to_numpy()
    k = int(np.argmin(med))
    shift = med[k]
    return RiskCurve(
        bin_mid=table["bin_mid"].to_numpy(),
        logrr_med=med - shift,
        logrr_lo=table["logrr_lo"].to_numpy() - shift,
        logrr_hi=table["logrr_hi"].to_numpy() - shift,
        mmt=float(table["bin_mid"].iloc[k]),
    )


def _heatwave_row(dataset: pd.DataFrame, base: EpiModelSpec, column: str, with_temperature: bool) -> Optional[Dict]:
    spec = replace(base, exposure=base.exposure if with_temperature else None, heatwave=column)
    coef = fit(dataset, spec).coefficient("beta2_heatwave")
    return {
        "heatwave": column,
        "with_temperature": with_temperature,
        "prevalence": float(dataset[column].mean()),
        "beta2": coef["median"],
        "beta2_q025": coef["q025"],
        "beta2_q975": coef["q975"],
        "rr": float(np.exp(coef["median"])),
        "rr_q025": float(np.exp(coef["q025"])),
        "rr_q975": float(np.exp(coef["q975"])),
    }


def fit_heatwave_models(
    dataset: pd.DataFrame,
    base: EpiModelSpec,
    columns: Sequence[str],
    with_temperature: Sequence[bool] = (True, False),
    n_jobs: int = 1,
) -> pd.DataFrame:
    """
    One model per heatwave column (and per with/without temperature).

    Constant heatwave columns are skipped with a warning.
    """
    usable = []
    for column in columns:
        values = dataset[column]
        if values.nunique() < 2:
            logger.warning(f"Heatwave column {column} is constant; skipped")
            continue
        usable.append(column)
    jobs = [(c, w) for c in usable for w in with_temperature if not (w and base.exposure is None)]
    rows = Parallel(n_jobs=n_jobs)(delayed(_heatwave_row)(dataset, base, c, w) for c, w in jobs)
    return pd.DataFrame([r for r in rows if r is not None])


def stratum_subsets(dataset: pd.DataFrame) -> Dict[str, pd.DataFrame]:
    """Sex x age-band subsets of the dataset (half-open age bands)."""
    out = {}
    for sex in (*SEXES, "all"):
        for band, (lo, hi) in AGE_BANDS.items():
            mask = (dataset["age"] >= lo) & (dataset["age"] < hi)
            if sex != "all":
                mask &= dataset["sex"] == sex
            out[f"{sex}/{band}"] = dataset[mask]
    return out


def _stratified_curve(name: str, subset: pd.DataFrame, spec: EpiModelSpec) -> Tuple[str, Optional[RiskCurve], str]:
    if subset["stratum"].nunique() < 2:
        return name, None, "too few strata"
    try:
        return name, risk_curve(fit(subset, spec)), ""
    except (DataError, ConvergenceError, NumericalError) as e:
        return name, None, str(e)


def stratified_fits(dataset: pd.DataFrame, spec: EpiModelSpec, n_jobs: int = 1) -> Dict[str, RiskCurve]:
    """Risk curves for each sex x age-band subset; failed subsets are logged and left out."""
    subsets = stratum_subsets(dataset)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_stratified_curve)(name, subset, spec) for name, subset in subsets.items()
    )
    curves = {}
    for name, curve, reason in results:
        if curve is None:
            logger.warning(f"Stratified fit {name} skipped: {reason}")
        else:
            curves[name] = curve
    return curves
