"""
Pipeline Service

Runs the study stages on the configured inputs, writes versioned artifacts
and keeps the run registry current.
"""

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sqlalchemy.orm import Session

import crud
import models
from schemas import CoefficientRow, EpiReport, PipelineConfig
from services import epi, gqrm
from services.artifacts import Provenance, git_revision, read_json, sha256_file, write_csv, write_json
from services.casecrossover import (
    OUTCOME_MAIN,
    OUTCOME_NEGATIVE_CONTROL,
    HolidayCalendar,
    RecordFilter,
    build_strata,
    heatwave_columns,
    stratum_summary,
)
from services.data_loader import DataLoader, load_station_table, load_surface, station_table
from services.diagnostics import diagnose_qq, qq_summary
from services.domain import (
    METHOD_GGPM,
    METHOD_GQRM,
    METHOD_REANALYSIS,
    ExposureSurface,
    MunicipalityMap,
    SeasonWindow,
    StationSeries,
    concat_dates,
)
from services.errors import HeatriskError, MissingArtifactError, ValidationError
from services.ggpm import GgpmFit, GgpmSettings, build_year, fit_year, predict_surface
from services.heatwave import HeatwaveCalendar, HeatwaveSpec, build_calendar
from services.ingest import SelectionRule, aggregate_cells, impute_spline, select_stations
from services.reporting import heatwave_day_counts, holiday_effect, mmt_table, rr_table, yearly_summary
from services.surface import build_grid, quantile_surface, with_fallbacks
from services.synthetic import make_synthetic

logger = logging.getLogger(__name__)

METHODS = (METHOD_GQRM, METHOD_GGPM, METHOD_REANALYSIS)
OUTCOMES = (OUTCOME_MAIN, OUTCOME_NEGATIVE_CONTROL)

RUNNERS = {
    "prep": "_prep",
    "fit-gqrm": "_fit_gqrm",
    "surface": "_surface",
    "fit-ggpm": "_fit_ggpm",
    "aggregate": "_aggregate",
    "heatwave": "_heatwave",
    "build-cco": "_build_cco",
    "fit-epi": "_fit_epi",
    "report": "_report",
    "simulate": "_simulate",
    "diagnose-qq": "_diagnose_qq",
}

RUN_ALL: Tuple[Tuple[str, Dict[str, object]], ...] = (
    ("prep", {}),
    ("fit-gqrm", {}),
    ("surface", {"method": METHOD_GQRM}),
    ("fit-ggpm", {}),
    ("surface", {"method": METHOD_GGPM}),
    ("aggregate", {}),
    ("heatwave", {}),
    ("build-cco", {"outcome": OUTCOME_MAIN}),
    ("build-cco", {"outcome": OUTCOME_NEGATIVE_CONTROL}),
    ("fit-epi", {"outcome": OUTCOME_MAIN}),
    ("fit-epi", {"outcome": OUTCOME_NEGATIVE_CONTROL}),
    ("report", {}),
)

SURFACE_HINT = "run `heatrisk surface` or `heatrisk aggregate` first"

PRODUCERS = {
    "stations": "run `heatrisk prep` first",
    "quantiles": "run `heatrisk fit-gqrm` first",
    "ggpm_fit": "run `heatrisk fit-ggpm` first",
    "surface": SURFACE_HINT,
    "calendar": "run `heatrisk heatwave` first",
    "cco": "run `heatrisk build-cco` first",
    "epi_curve": "run `heatrisk fit-epi` first",
}


def surface_key(method: str, tau: Optional[float] = None) -> str:
    """Registry key of an exposure surface, e.g. 'gqrm_tau0.5' or 'ggpm'."""
    if method == METHOD_GQRM:
        if tau is None:
            raise ValidationError("A GQRM surface needs a quantile level")
        return f"gqrm_tau{tau:g}"
    return method


def _fit_tau(
    design: gqrm.GqrmDesign,
    tau: float,
    mcmc: gqrm.McmcConfig,
    priors: gqrm.GqrmPriors,
    seed: int,
    resume: bool,
) -> Tuple[float, pd.DataFrame, Dict[str, object]]:
    result = gqrm.fit(design, tau, mcmc, priors, seed, resume)
    table = gqrm.plugin_quantiles(result)
    table.insert(0, "tau", tau)
    return tau, table, result.diagnostics


class PipelineService:
    """
    Stage runner over one output directory.

    Each stage returns (success, message) and records its outcome in the
    registry; failures are kept in `last_error` for the CLI.
    """

    def __init__(self, config: PipelineConfig, db: Session, force: bool = False):
        self.config = config
        self.db = db
        self.force = force
        self.out = Path(config.out)
        self.loader = DataLoader()
        self.last_error: Optional[HeatriskError] = None
        self.stage: Optional[str] = None
        self.provenance = Provenance(config.config_hash(), config.seed, git_revision())
        self._digests: Dict[Tuple[str, int, int], str] = {}

    # -- configuration views ----------------------------------------------

    @property
    def season(self) -> SeasonWindow:
        s = self.config.season
        return SeasonWindow(s.start[0], s.start[1], s.end[0], s.end[1])

    @property
    def summer(self) -> SeasonWindow:
        s = self.config.season
        return SeasonWindow(s.summer_start[0], s.summer_start[1], s.summer_end[0], s.summer_end[1])

    @property
    def workers(self) -> int:
        return self.config.workers

    def _years(self, stations: Sequence[StationSeries]) -> List[int]:
        if self.config.season.years:
            return sorted(self.config.season.years)
        season = self.season
        years = {d.year for st in stations for d in st.values.dropna().index if season.contains(d.date())}
        if not years:
            raise ValidationError("No station data inside the season window")
        return sorted(years)

    def _ggpm_settings(self) -> GgpmSettings:
        g = self.config.ggpm
        return GgpmSettings(
            nu=g.nu,
            log_k_mean=g.log_k_mean,
            log_k_sd=g.log_k_sd,
            field_sd_rate=g.field_sd_rate,
            nugget_sd_rate=g.nugget_sd_rate,
            max_iter=g.max_iter,
        )

    def _epi_spec(self, exposure: Optional[str], heatwave: Optional[str] = None) -> epi.EpiModelSpec:
        e = self.config.epi
        grid = np.logspace(np.log10(e.tau_min), np.log10(e.tau_max), e.tau_grid_size)
        return epi.EpiModelSpec(
            exposure=exposure,
            heatwave=heatwave,
            effect=epi.Rw2EffectSpec(n_bins=e.n_bins, u=e.pc_u, alpha=e.pc_alpha),
            tau_grid=tuple(float(t) for t in grid),
            coef_variance=e.coef_variance,
            stratum_variance=e.stratum_variance,
        )

    # -- registry helpers ---------------------------------------------------

    def _file_digest(self, path: Path) -> Optional[str]:
        if not path.exists():
            return None
        path = path.resolve()
        stat = path.stat()
        cache_key = (str(path), stat.st_mtime_ns, stat.st_size)
        if cache_key not in self._digests:
            self._digests[cache_key] = sha256_file(path)
        return self._digests[cache_key]

    def _input_digest(self, name: str) -> Optional[str]:
        value = getattr(self.config.paths, name)
        return None if value is None else self._file_digest(Path(value))

    def _source_digest(self, source: str) -> Optional[str]:
        """Current sha256 of 'input:<name>' or of the registered '<kind>:<key>'."""
        kind, key = source.split(":", 1)
        if kind == "input":
            return self._input_digest(key)
        artifact = crud.get_artifact(self.db, kind, key)
        return artifact.sha256 if artifact else None

    def _sources(
        self,
        inputs: Sequence[str] = (),
        artifacts: Sequence[Tuple[str, str]] = (),
    ) -> Dict[str, Optional[str]]:
        names = [f"input:{n}" for n in inputs] + [f"{kind}:{key}" for kind, key in artifacts]
        return {name: self._source_digest(name) for name in sorted(names)}

    def is_stale(self, artifact: models.Artifact, upstream: bool = False) -> bool:
        """
        True when an artifact no longer matches what would be built now: other
        config or seed, edited file, or a source whose digest has changed.

        With upstream=True an artifact is also stale when any registered
        artifact it was built from is stale.
        """
        if artifact.config_hash != self.provenance.config_hash or artifact.seed != self.provenance.seed:
            return True
        if self._file_digest(Path(artifact.path)) != artifact.sha256:
            return True
        recorded = json.loads(artifact.sources or "{}")
        if any(self._source_digest(name) != digest for name, digest in recorded.items()):
            return True
        if not upstream:
            return False
        for name in recorded:
            kind, key = name.split(":", 1)
            parent = None if kind == "input" else crud.get_artifact(self.db, kind, key)
            if parent is not None and self.is_stale(parent, upstream=True):
                return True
        return False

    def _fresh(self, kind: str, key: str, sources: Dict[str, Optional[str]]) -> bool:
        """Registered, not stale, and built from exactly these sources."""
        if self.force:
            return False
        artifact = crud.get_artifact(self.db, kind, key)
        if artifact is None or self.is_stale(artifact):
            return False
        return json.loads(artifact.sources or "{}") == sources

    def _require(self, kind: str, key: str) -> Path:
        artifact = crud.get_artifact(self.db, kind, key)
        if artifact is None or not Path(artifact.path).exists():
            raise MissingArtifactError(f"{kind}:{key}", detail=PRODUCERS.get(kind, "run the producing stage first"))
        return Path(artifact.path)

    def _register(
        self,
        kind: str,
        key: str,
        path: Path,
        digest: str,
        sources: Optional[Dict[str, Optional[str]]] = None,
    ) -> Path:
        crud.create_or_update_artifact(self.db, {
            "kind": kind,
            "key": key,
            "path": str(path.resolve()),
            "sha256": digest,
            "config_hash": self.provenance.config_hash,
            "seed": self.provenance.seed,
            "git_revision": self.provenance.git_revision,
            "sources": json.dumps(sources or {}, sort_keys=True),
        })
        logger.debug(f"Registered {kind}:{key} -> {path}")
        return path

    def _write_csv(
        self,
        kind: str,
        key: str,
        frame: pd.DataFrame,
        relative: str,
        sources: Dict[str, Optional[str]],
    ) -> Path:
        path = self.out / relative
        return self._register(kind, key, path, write_csv(frame, path, self._stage_provenance(sources)), sources)

    def _write_json(
        self,
        kind: str,
        key: str,
        payload: Dict[str, object],
        relative: str,
        sources: Dict[str, Optional[str]],
    ) -> Path:
        path = self.out / relative
        return self._register(kind, key, path, write_json(payload, path, self._stage_provenance(sources)), sources)

    def _stage_provenance(self, sources: Dict[str, Optional[str]]) -> Provenance:
        return replace(self.provenance, stage=self.stage, sources=dict(sources))

    def _municipalities(self) -> MunicipalityMap:
        paths = self.config.require_paths("polygons")
        return self.loader.load_municipalities(paths["polygons"])

    # -- stage dispatch -------------------------------------------------------

    def run_stage(self, stage: str, **options) -> Tuple[bool, str]:
        """
        Run one stage.

        Args:
            stage: stage name, e.g. 'prep' or 'fit-epi'
            options: stage options (method, tau, year, outcome, resume)

        Returns:
            Tuple of (success: bool, message: str)
        """
        if stage not in RUNNERS:
            raise ValidationError(f"Unknown stage '{stage}'")
        runner = getattr(self, RUNNERS[stage])
        self.last_error = None
        self.stage = stage
        try:
            logger.info(f"Starting stage {stage}", extra={"stage": stage})
            written, message = runner(**{k: v for k, v in options.items() if v is not None})
            status = "success" if written else "skipped"
            crud.create_or_update_stage_run(
                self.db,
                stage=stage,
                status=status,
                records_written=written,
                config_hash=self.provenance.config_hash,
                seed=self.provenance.seed,
            )
            logger.info(message, extra={"stage": stage, "status": status})
            return True, message

        except HeatriskError as e:
            self.last_error = e
            error_msg = f"Stage {stage} failed: {e.message}"
            logger.error(error_msg, extra={"stage": stage, "code": e.code})
            crud.create_or_update_stage_run(
                self.db,
                stage=stage,
                status="failed",
                error_message=error_msg if e.detail is None else f"{error_msg} ({e.detail})",
                config_hash=self.provenance.config_hash,
                seed=self.provenance.seed,
            )
            return False, error_msg

    def run_all(self) -> List[Tuple[str, bool, str]]:
        """Every stage in order; stops at the first failure."""
        results = []
        for stage, options in RUN_ALL:
            ok, message = self.run_stage(stage, **options)
            results.append((stage, ok, message))
            if not ok:
                break
        return results

    # -- stages ---------------------------------------------------------------

    def _prep(self) -> Tuple[int, str]:
        cfg = self.config
        paths = cfg.require_paths("polygons", "stations")
        sources = self._sources(inputs=("polygons", "stations"))
        if self._fresh("stations", METHOD_GQRM, sources) and self._fresh("stations", METHOD_GGPM, sources):
            return 0, "Station tables are up to date"
        self.loader.load_municipalities(paths["polygons"])
        stations = self.loader.load_stations(paths["stations"])
        years = self._years(stations)
        season = self.season

        gq_rule = SelectionRule(cfg.gqrm.selection.mode, cfg.gqrm.selection.limit)
        gq = [impute_spline(st, season, years) for st in select_stations(stations, gq_rule, season, years)]
        gg_rule = SelectionRule(cfg.ggpm.selection.mode, cfg.ggpm.selection.limit)
        gg = select_stations(stations, gg_rule, season, years)

        self._write_csv("stations", METHOD_GQRM, station_table(gq, season, years), "prep/stations_gqrm.csv", sources)
        self._write_csv("stations", METHOD_GGPM, station_table(gg, season, years), "prep/stations_ggpm.csv", sources)
        return 2, f"Prepared {len(gq)} GQRM and {len(gg)} GGPM stations for {years}"

    def _fit_gqrm(self, tau: Optional[float] = None, resume: bool = False) -> Tuple[int, str]:
        cfg = self.config
        taus = [tau] if tau is not None else list(cfg.gqrm.taus)
        stations_path = self._require("stations", METHOD_GQRM)
        sources = self._sources(artifacts=[("stations", METHOD_GQRM)])
        todo = [t for t in taus if not self._fresh("quantiles", f"{t:g}", sources)]
        if not todo:
            return 0, f"GQRM quantiles up to date for tau in {taus}"

        stations = load_station_table(stations_path)
        design = gqrm.build_design(stations, self.season, self._years(stations))
        priors = gqrm.GqrmPriors(psi_variance=cfg.gqrm.psi_variance, eta_variance=cfg.gqrm.eta_variance)
        (self.out / "gqrm").mkdir(parents=True, exist_ok=True)
        jobs = []
        for t in todo:
            mcmc = gqrm.McmcConfig(
                n_burn=cfg.gqrm.n_burn,
                n_keep=cfg.gqrm.n_keep,
                thin=cfg.gqrm.thin,
                checkpoint_every=cfg.gqrm.checkpoint_every,
                checkpoint_path=str(self.out / "gqrm" / f"checkpoint_tau{t:g}.npz"),
            )
            jobs.append((t, mcmc))

        results = Parallel(n_jobs=min(self.workers, len(jobs)))(
            delayed(_fit_tau)(design, t, mcmc, priors, cfg.seed, resume) for t, mcmc in jobs
        )
        for t, table, diagnostics in results:
            self._write_csv("quantiles", f"{t:g}", table, f"gqrm/quantiles_tau{t:g}.csv", sources)
            self._write_json("gqrm_diagnostics", f"{t:g}", diagnostics, f"gqrm/diagnostics_tau{t:g}.json", sources)
        return 2 * len(results), f"Fitted GQRM at tau in {todo}"

    def _surface(self, method: str = METHOD_GQRM, tau: Optional[float] = None) -> Tuple[int, str]:
        if method == METHOD_GQRM:
            return self._gqrm_surfaces(tau)
        if method == METHOD_GGPM:
            return self._ggpm_surface()
        if method == METHOD_REANALYSIS:
            return self._aggregate()
        raise ValidationError(f"Unknown method '{method}'")

    def _gqrm_surfaces(self, tau: Optional[float]) -> Tuple[int, str]:
        cfg = self.config
        taus = [tau] if tau is not None else list(cfg.gqrm.taus)
        sources = {
            t: self._sources(inputs=("polygons",), artifacts=[("quantiles", f"{t:g}"), ("stations", METHOD_GQRM)])
            for t in taus
        }
        todo = [t for t in taus if not self._fresh("surface", surface_key(METHOD_GQRM, t), sources[t])]
        if not todo:
            return 0, "GQRM surfaces up to date"

        paths = {t: self._require("quantiles", f"{t:g}") for t in todo}
        stations = load_station_table(self._require("stations", METHOD_GQRM))
        municipalities = self._municipalities()
        station_xy = pd.DataFrame({"x": [s.x for s in stations], "y": [s.y for s in stations]}, index=[s.id for s in stations])
        grid = build_grid(municipalities, cfg.surface.gqrm_extra_points, cfg.surface.gqrm_spacing_km)
        grid = with_fallbacks(grid, municipalities)

        for t in todo:
            q_table = pd.read_csv(paths[t], dtype={"station_id": str}, parse_dates=["date"])
            surface = quantile_surface(
                q_table, station_xy, t, grid, municipalities.ids,
                cfg.surface.smoothing, cfg.surface.standardize, n_jobs=self.workers,
            )
            key = surface_key(METHOD_GQRM, t)
            self._write_csv("surface", key, surface.to_long(), f"surfaces/{key}.csv", sources[t])
        return len(todo), f"Interpolated GQRM surfaces for tau in {todo}"

    def _fit_ggpm(self, year: Optional[int] = None) -> Tuple[int, str]:
        stations = load_station_table(self._require("stations", METHOD_GGPM))
        years = [year] if year is not None else self._years(stations)
        sources = self._sources(artifacts=[("stations", METHOD_GGPM)])
        todo = [y for y in years if not self._fresh("ggpm_fit", str(y), sources)]
        if not todo:
            return 0, f"GGPM fits up to date for {years}"

        settings = self._ggpm_settings()
        fits = Parallel(n_jobs=min(self.workers, len(todo)))(
            delayed(fit_year)(build_year(stations, self.season, y), settings) for y in todo
        )
        for fit in fits:
            payload = {
                "year": fit.data.year,
                "stations": fit.data.station_ids,
                "summary": fit.summary(),
                "theta": fit.theta.tolist(),
                "theta_cov": fit.theta_cov.tolist(),
                "beta": fit.beta.tolist(),
                "beta_cov": fit.beta_cov.tolist(),
                "log_posterior": fit.log_posterior,
                "converged": fit.converged,
                "nu": fit.settings.nu,
            }
            self._write_json("ggpm_fit", str(fit.data.year), payload, f"ggpm/fit_{fit.data.year}.json", sources)
        return len(fits), f"Fitted GGPM for {todo}"

    def _load_ggpm_fit(self, payload: Dict[str, object], stations: Sequence[StationSeries]) -> GgpmFit:
        by_id = {st.id: st for st in stations}
        missing = [s for s in payload["stations"] if s not in by_id]
        if missing:
            raise MissingArtifactError(f"stations:{METHOD_GGPM}", detail=f"stations {missing[:5]} are no longer selected")
        data = build_year([by_id[s] for s in payload["stations"]], self.season, int(payload["year"]))
        return GgpmFit(
            data=data,
            settings=self._ggpm_settings(),
            theta=np.asarray(payload["theta"], dtype=float),
            theta_cov=np.asarray(payload["theta_cov"], dtype=float),
            beta=np.asarray(payload["beta"], dtype=float),
            beta_cov=np.asarray(payload["beta_cov"], dtype=float),
            log_posterior=float(payload["log_posterior"]),
            converged=bool(payload["converged"]),
        )

    def _ggpm_surface(self) -> Tuple[int, str]:
        fits = crud.get_artifacts(self.db, "ggpm_fit")
        if not fits:
            raise MissingArtifactError("ggpm_fit:*", detail=PRODUCERS["ggpm_fit"])
        sources = self._sources(
            inputs=("polygons",),
            artifacts=[("stations", METHOD_GGPM)] + [("ggpm_fit", a.key) for a in fits],
        )
        if self._fresh("surface", METHOD_GGPM, sources):
            return 0, "GGPM surface up to date"

        cfg = self.config
        stations = load_station_table(self._require("stations", METHOD_GGPM))
        municipalities = self._municipalities()
        grid = build_grid(municipalities, cfg.surface.ggpm_extra_points, cfg.surface.ggpm_spacing_km)
        grid = with_fallbacks(grid, municipalities)

        parts, years = [], []
        for artifact in fits:
            fit = self._load_ggpm_fit(read_json(self._require("ggpm_fit", artifact.key)), stations)
            parts.append(predict_surface(fit, grid, municipalities.ids).values)
            years.append(fit.data.year)
        surface = ExposureSurface(
            METHOD_GGPM,
            concat_dates(parts),
            {"method": METHOD_GGPM, "years": years, "grid_size": len(grid)},
        )
        self._write_csv("surface", METHOD_GGPM, surface.to_long(), f"surfaces/{METHOD_GGPM}.csv", sources)
        return 1, f"Predicted GGPM surface for {years}"

    def _aggregate(self) -> Tuple[int, str]:
        cfg = self.config
        paths = cfg.require_paths("polygons", "reanalysis")
        sources = self._sources(inputs=("polygons", "reanalysis"))
        if self._fresh("surface", METHOD_REANALYSIS, sources):
            return 0, "Reanalysis surface up to date"
        municipalities = self._municipalities()
        grid = self.loader.load_reanalysis(paths["reanalysis"], cfg.paths.reanalysis_pre_aggregated)
        surface = aggregate_cells(grid, municipalities, n_jobs=self.workers)

        season = self.season
        years = set(cfg.season.years)
        inside = [season.contains(d.date()) and (not years or d.year in years) for d in surface.dates]
        surface = ExposureSurface(METHOD_REANALYSIS, surface.values.loc[:, inside], surface.provenance)
        self._write_csv("surface", METHOD_REANALYSIS, surface.to_long(), f"surfaces/{METHOD_REANALYSIS}.csv", sources)
        return 1, f"Aggregated reanalysis to {len(municipalities)} municipalities"

    def _main_surface_keys(self) -> Dict[str, str]:
        return {
            METHOD_GQRM: surface_key(METHOD_GQRM, self.config.epi.gqrm_tau),
            METHOD_GGPM: METHOD_GGPM,
            METHOD_REANALYSIS: METHOD_REANALYSIS,
        }

    def _heatwave(self, method: Optional[str] = None) -> Tuple[int, str]:
        keys = self._main_surface_keys()
        if method is not None and method not in keys:
            raise ValidationError(f"Unknown method '{method}'")
        methods = [method] if method else [m for m, k in keys.items() if crud.get_artifact(self.db, "surface", k)]
        if not methods:
            raise MissingArtifactError("surface:*", detail=SURFACE_HINT)

        specs = [HeatwaveSpec.parse(s) for s in self.config.heatwave.specs]
        written = []
        for m in methods:
            surface_path = self._require("surface", keys[m])
            sources = self._sources(artifacts=[("surface", keys[m])])
            if self._fresh("calendar", m, sources):
                continue
            surface = load_surface(surface_path, m)
            calendars = [build_calendar(surface, spec, self.summer, n_jobs=self.workers) for spec in specs]
            long = pd.concat([c.to_long() for c in calendars], ignore_index=True)
            thresholds = pd.concat([
                pd.DataFrame({"municipality_id": c.thresholds.index, "spec_id": c.spec_id, "threshold": c.thresholds.to_numpy()})
                for c in calendars
            ], ignore_index=True)
            self._write_csv("calendar", m, long[["municipality_id", "date", "heatwave", "spec_id"]], f"heatwave/calendar_{m}.csv", sources)
            self._write_csv("thresholds", m, thresholds, f"heatwave/thresholds_{m}.csv", sources)
            written.append(m)
        if not written:
            return 0, f"Heatwave calendars up to date for {methods}"
        return 2 * len(written), f"Built {len(specs)} heatwave calendars for {written}"

    def _load_calendars(self, method: str) -> List[HeatwaveCalendar]:
        frame = pd.read_csv(self._require("calendar", method), dtype={"municipality_id": str}, parse_dates=["date"])
        frame["method"] = method
        return [HeatwaveCalendar.from_long(frame, method, spec_id) for spec_id in sorted(frame["spec_id"].unique())]

    def _holidays(self, records: pd.DataFrame) -> HolidayCalendar:
        cfg = self.config
        if cfg.paths.holidays:
            return self.loader.load_holidays(cfg.require_paths("holidays")["holidays"])
        if cfg.casecrossover.holidays:
            return HolidayCalendar.from_dates(cfg.casecrossover.holidays)
        years = sorted(pd.to_datetime(records["date"]).dt.year.unique())
        return HolidayCalendar.national_summer(years)

    def _build_cco(self, outcome: str = OUTCOME_MAIN) -> Tuple[int, str]:
        if outcome not in OUTCOMES:
            raise ValidationError(f"Unknown outcome '{outcome}'")
        cfg = self.config
        mortality_path = cfg.require_paths("mortality")["mortality"]
        surface_rows = crud.get_artifacts(self.db, "surface")
        if not surface_rows:
            raise MissingArtifactError("surface:*", detail=SURFACE_HINT)
        calendar_rows = crud.get_artifacts(self.db, "calendar")
        sources = self._sources(
            inputs=("mortality", "holidays"),
            artifacts=[("surface", a.key) for a in surface_rows] + [("calendar", a.key) for a in calendar_rows],
        )
        if self._fresh("cco", outcome, sources):
            return 0, f"Case-crossover dataset up to date for {outcome}"

        main_gqrm = self._main_surface_keys()[METHOD_GQRM]
        surfaces = {}
        for artifact in surface_rows:
            name = METHOD_GQRM if artifact.key == main_gqrm else artifact.key
            surfaces[name] = load_surface(self._require("surface", artifact.key))
        calendars = [c for a in calendar_rows for c in self._load_calendars(a.key)]

        records = self.loader.load_mortality(mortality_path)
        rule = RecordFilter(outcome=outcome, min_age=cfg.casecrossover.min_age, season=self.summer)
        dataset = build_strata(
            records,
            surfaces,
            calendars,
            self._holidays(records),
            rule,
            window=cfg.casecrossover.exposure_window,
            include_event=cfg.casecrossover.include_event_day,
            link_window=cfg.heatwave.link_window,
        )
        summary = {"outcome": outcome, "surfaces": sorted(surfaces), **stratum_summary(dataset)}
        self._write_csv("cco", outcome, dataset, f"cco/cco_{outcome}.csv", sources)
        self._write_json("cco_summary", outcome, summary, f"cco/summary_{outcome}.json", sources)
        return 2, f"Case-crossover dataset ({outcome}): {summary['strata']} strata, {summary['controls_per_case']:.3f} controls per case"

    def _epi_targets(self, method: Optional[str], tau: Optional[float]) -> List[Tuple[str, str, Optional[str]]]:
        """(label, surface key, heatwave method) for each requested exposure."""
        if method is not None and method not in METHODS:
            raise ValidationError(f"Unknown method '{method}'")
        main = self._main_surface_keys()
        targets = []
        for m in ([method] if method else METHODS):
            if m == METHOD_GQRM:
                taus = [tau] if tau is not None else list(self.config.gqrm.taus)
                for t in taus:
                    key = surface_key(METHOD_GQRM, t)
                    targets.append((f"{METHOD_GQRM}:{t:g}", key, METHOD_GQRM if key == main[METHOD_GQRM] else None))
            else:
                targets.append((m, m, m))
        if method is None:
            targets = [t for t in targets if crud.get_artifact(self.db, "surface", t[1])]
        return targets

    def _fit_epi(self, method: Optional[str] = None, tau: Optional[float] = None, outcome: str = OUTCOME_MAIN) -> Tuple[int, str]:
        if outcome not in OUTCOMES:
            raise ValidationError(f"Unknown outcome '{outcome}'")
        targets = self._epi_targets(method, tau)
        if not targets:
            raise MissingArtifactError("surface:*", detail=SURFACE_HINT)
        for _, key, _ in targets:
            self._require("surface", key)
        cco_path = self._require("cco", outcome)

        sources = self._sources(artifacts=[("cco", outcome)])
        todo = [t for t in targets if not self._fresh("epi", f"{outcome}:{t[0]}", sources)]
        if not todo:
            return 0, f"Epi models up to date for {outcome}"

        dataset = pd.read_csv(cco_path, dtype={"municipality_id": str, "record_id": str}, parse_dates=["date"])
        main_gqrm = self._main_surface_keys()[METHOD_GQRM]
        written = 0
        for label, key, hw_method in todo:
            column = f"exposure_{METHOD_GQRM if key == main_gqrm else key}"
            if column not in dataset.columns:
                raise MissingArtifactError(f"cco:{outcome}", detail=f"dataset lacks {column}; rebuild with `heatrisk build-cco --force`")
            written += self._fit_epi_target(dataset, outcome, label, column, hw_method, sources)
        return written, f"Fitted {len(todo)} epi models for {outcome}"

    def _fit_epi_target(
        self,
        dataset: pd.DataFrame,
        outcome: str,
        label: str,
        column: str,
        hw_method: Optional[str],
        sources: Dict[str, Optional[str]],
    ) -> int:
        spec = self._epi_spec(column)
        result = epi.fit(dataset, spec)
        curve = epi.risk_curve(result)
        tag = label.replace(":", "_tau")
        base = f"epi/{outcome}"

        curve_path = self._write_csv("epi_curve", f"{outcome}:{label}", curve.to_frame(), f"{base}/curve_{tag}.csv", sources)
        coefficients = result.coefficient_summary().to_dict("records")
        report = EpiReport(
            method=label,
            outcome=outcome,
            model={
                "likelihood": spec.likelihood,
                "exposure": column,
                "n_bins": spec.effect.n_bins,
                "pc_u": spec.effect.u,
                "pc_alpha": spec.effect.alpha,
                "tau_grid": [min(spec.tau_grid), max(spec.tau_grid), len(spec.tau_grid)],
                "n_strata": result.n_strata,
                "n_rows": result.n_rows,
            },
            coefficients=[CoefficientRow(**row) for row in coefficients],
            mmt=curve.mmt,
            curve_csv=curve_path.name,
            rr_table=rr_table(curve, dataset.loc[dataset["case"] == 1, column]),
        )
        self._write_json("epi", f"{outcome}:{label}", report.model_dump(mode="json"), f"{base}/report_{tag}.json", sources)
        written = 2

        if hw_method is not None:
            columns = heatwave_columns(dataset, hw_method)
            if columns:
                table = epi.fit_heatwave_models(dataset, spec, columns, n_jobs=self.workers)
                self._write_csv("epi_heatwave", f"{outcome}:{label}", table, f"{base}/heatwave_{tag}.csv", sources)
                written += 1
            if self.config.epi.stratified and outcome == OUTCOME_MAIN:
                curves = epi.stratified_fits(dataset, spec, n_jobs=self.workers)
                frame = pd.concat(
                    [c.to_frame().assign(subset=name, mmt=c.mmt) for name, c in sorted(curves.items())],
                    ignore_index=True,
                ) if curves else pd.DataFrame(columns=["bin_mid", "logrr_med", "logrr_lo", "logrr_hi", "rr_norm", "subset", "mmt"])
                self._write_csv("epi_stratified", f"{outcome}:{label}", frame, f"{base}/stratified_{tag}.csv", sources)
                written += 1
        return written

    def _report(self) -> Tuple[int, str]:
        main = self._main_surface_keys()
        surface_items = [(m, key) for m, key in main.items() if crud.get_artifact(self.db, "surface", key)]
        if not surface_items:
            raise MissingArtifactError("surface:*", detail=SURFACE_HINT)
        surfaces = [load_surface(self._require("surface", key), m) for m, key in surface_items]
        written = 0
        sources = self._sources(artifacts=[("surface", key) for _, key in surface_items])
        self._write_csv("report", "yearly_summary", yearly_summary(surfaces, season=self.summer), "reporting/yearly_summary.csv", sources)
        written += 1

        calendar_rows = crud.get_artifacts(self.db, "calendar")
        calendars = [c for a in calendar_rows for c in self._load_calendars(a.key)]
        if calendars:
            sources = self._sources(artifacts=[("calendar", a.key) for a in calendar_rows])
            self._write_csv("report", "heatwave_days", heatwave_day_counts(calendars, self.summer), "reporting/heatwave_days.csv", sources)
            written += 1

        curves, used = {}, []
        for artifact in crud.get_artifacts(self.db, "epi_curve"):
            outcome, label = artifact.key.split(":", 1)
            if outcome == OUTCOME_MAIN:
                curves[label] = epi.RiskCurve.from_frame(pd.read_csv(artifact.path))
                used.append(("epi_curve", artifact.key))
        if curves:
            self._write_csv("report", "mmt", mmt_table(curves), "reporting/mmt.csv", self._sources(artifacts=used))
            written += 1

        rows, used = [], []
        for artifact in crud.get_artifacts(self.db, "epi"):
            report = read_json(artifact.path)
            effect = holiday_effect(pd.DataFrame(report["coefficients"]))
            rows.append({"model": report["method"], "outcome": report["outcome"], **effect})
            used.append(("epi", artifact.key))
        if rows:
            self._write_csv("report", "holiday_effect", pd.DataFrame(rows), "reporting/holiday_effect.csv", self._sources(artifacts=used))
            written += 1
        return written, f"Wrote {written} summary tables"

    def _simulate(self) -> Tuple[int, str]:
        cfg = self.config
        target = self.out / "input"
        paths = make_synthetic(cfg.synthetic, cfg.seed, target, self.season, cfg.paths.reanalysis_pre_aggregated)
        for name, path in sorted(paths.items()):
            self._register("input", name, path, sha256_file(path))

        config = cfg.model_dump(mode="json")
        config["out"] = str(self.out.resolve())
        config["paths"] = {
            "polygons": paths["polygons"].name,
            "stations": paths["stations"].name,
            "reanalysis": paths["reanalysis"].name,
            "mortality": paths["mortality"].name,
            "holidays": paths["holidays"].name,
            "reanalysis_pre_aggregated": cfg.paths.reanalysis_pre_aggregated,
        }
        config["season"]["years"] = list(cfg.synthetic.years)
        write_json(config, target / "config.json")
        return len(paths) + 1, f"Synthetic bundle written to {target}"

    def _diagnose_qq(self) -> Tuple[int, str]:
        cfg = self.config
        paths = cfg.require_paths("polygons", "stations", "reanalysis")
        sources = self._sources(inputs=("polygons", "stations", "reanalysis"))
        if self._fresh("diagnostics", "qq", sources) and self._fresh("diagnostics", "qq_summary", sources):
            return 0, "QQ diagnostics up to date"
        self.loader.load_municipalities(paths["polygons"])
        stations = self.loader.load_stations(paths["stations"])
        grid = self.loader.load_reanalysis(paths["reanalysis"], cfg.paths.reanalysis_pre_aggregated)
        table = diagnose_qq(stations, grid)
        self._write_csv("diagnostics", "qq", table, "diagnostics/qq.csv", sources)
        self._write_csv("diagnostics", "qq_summary", qq_summary(table), "diagnostics/qq_summary.csv", sources)
        return 2, f"QQ diagnostics for {table['station_id'].nunique()} stations"
