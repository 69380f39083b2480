"""
Pydantic Schemas

Pipeline configuration, synthetic scenario and report models.
"""

import hashlib
import json
import os
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from services.errors import ValidationError


class StrictModel(BaseModel):
    """Base model rejecting unknown keys."""
    model_config = ConfigDict(extra="forbid")


class PathsConfig(StrictModel):
    """Input files; relative paths resolve against the config file directory."""
    stations: Optional[str] = None
    polygons: Optional[str] = None
    reanalysis: Optional[str] = None
    mortality: Optional[str] = None
    holidays: Optional[str] = None
    reanalysis_pre_aggregated: bool = False


class SeasonConfig(StrictModel):
    """Month/day windows: the modelling season and the epidemiological summer."""
    start: Tuple[int, int] = (5, 1)
    end: Tuple[int, int] = (9, 30)
    summer_start: Tuple[int, int] = (6, 1)
    summer_end: Tuple[int, int] = (8, 31)
    years: List[int] = Field(default_factory=list, description="Study years; empty = every year present in the data")


class SelectionConfig(StrictModel):
    mode: str = "max-consecutive-missing"
    limit: float = 7

    @field_validator("mode")
    @classmethod
    def _known_mode(cls, v: str) -> str:
        if v not in ("max-consecutive-missing", "max-missing-fraction"):
            raise ValueError(f"unknown selection mode {v}")
        return v


class GqrmConfig(StrictModel):
    taus: List[float] = Field(default_factory=lambda: [0.05, 0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 0.95])
    selection: SelectionConfig = SelectionConfig(mode="max-consecutive-missing", limit=7)
    n_burn: int = Field(5000, ge=0)
    n_keep: int = Field(5000, ge=1)
    thin: int = Field(1, ge=1)
    checkpoint_every: int = Field(500, ge=0)
    psi_variance: Optional[float] = Field(None, gt=0)
    eta_variance: Optional[float] = Field(None, gt=0)


class SurfaceConfig(StrictModel):
    smoothing: float = Field(0.001, ge=0)
    standardize: bool = True
    gqrm_extra_points: int = Field(1000, ge=0)
    ggpm_extra_points: int = Field(250, ge=0)
    gqrm_spacing_km: Optional[float] = Field(None, gt=0)
    ggpm_spacing_km: Optional[float] = Field(None, gt=0)


class GgpmConfig(StrictModel):
    selection: SelectionConfig = SelectionConfig(mode="max-missing-fraction", limit=0.20)
    nu: float = Field(1.0, gt=0)
    log_k_mean: float = -3.9
    log_k_sd: float = Field(1.0, gt=0)
    field_sd_rate: float = Field(1.0, gt=0)
    nugget_sd_rate: float = Field(1.0, gt=0)
    max_iter: int = Field(500, ge=1)


class HeatwaveConfig(StrictModel):
    specs: List[str] = Field(default_factory=lambda: [
        f"{t}_{p}"
        for p in ("base", "1daylag", "2dayslag")
        for t in ("q0.9", "q0.925", "q0.95", "fixed35")
    ])
    link_window: int = Field(3, ge=0)


class CaseCrossoverConfig(StrictModel):
    exposure_window: int = Field(3, ge=1)
    include_event_day: bool = False
    min_age: float = 18
    holidays: List[str] = Field(default_factory=list, description="ISO dates; empty = Jun 2 and Aug 15 of every year")


class EpiConfig(StrictModel):
    n_bins: int = Field(100, ge=10)
    pc_u: float = Field(0.1, gt=0)
    pc_alpha: float = Field(0.01, gt=0, lt=1)
    tau_grid_size: int = Field(25, ge=1)
    tau_min: float = Field(1.0, gt=0)
    tau_max: float = Field(1e8, gt=0)
    coef_variance: float = Field(1000.0, gt=0)
    stratum_variance: float = Field(100.0, gt=0)
    gqrm_tau: float = Field(0.5, gt=0, lt=1, description="Quantile level whose surface is the GQRM exposure")
    stratified: bool = True


class SyntheticScenario(StrictModel):
    """Synthetic region, truths and effect injections for `simulate`."""
    origin_lon: float = 11.0
    origin_lat: float = 46.0
    n_cols: int = Field(6, ge=1)
    n_rows: int = Field(5, ge=1)
    municipality_km: float = Field(8.0, gt=0)
    n_stations: int = Field(10, ge=3)
    years: List[int] = Field(default_factory=lambda: [2019, 2020])
    beta0: float = 24.0
    beta1: float = -0.8
    a: float = Field(0.6, gt=-1, lt=1)
    sigma2_omega: float = Field(2.0, ge=0)
    k: float = Field(0.05, gt=0)
    nu: float = Field(1.0, gt=0)
    sigma2_eps: float = Field(0.3, ge=0)
    seasonal_amplitude: float = 6.0
    missing_fraction: float = Field(0.02, ge=0, lt=1)
    reanalysis_cell_km: float = Field(12.0, gt=0)
    reanalysis_bias: float = -0.5
    reanalysis_smoothing_km: float = Field(10.0, ge=0)
    reanalysis_tail_compression: float = Field(0.5, gt=0, le=1)
    diurnal_range: float = Field(10.0, ge=0)
    population: int = Field(300_000, ge=0)
    daily_death_rate: float = Field(2.5e-5, ge=0)
    negative_control_fraction: float = Field(0.3, ge=0)
    logrr_slope: float = 0.03
    logrr_knot: float = 28.0
    holiday_rr: float = Field(0.89, gt=0)
    heatwave_rr: float = Field(1.0, gt=0)


class PipelineConfig(StrictModel):
    """Full pipeline configuration; `seed` has no default."""
    seed: int
    out: str = "out"
    workers: int = Field(1, ge=1)
    paths: PathsConfig = PathsConfig()
    season: SeasonConfig = SeasonConfig()
    gqrm: GqrmConfig = GqrmConfig()
    surface: SurfaceConfig = SurfaceConfig()
    ggpm: GgpmConfig = GgpmConfig()
    heatwave: HeatwaveConfig = HeatwaveConfig()
    casecrossover: CaseCrossoverConfig = CaseCrossoverConfig()
    epi: EpiConfig = EpiConfig()
    synthetic: SyntheticScenario = SyntheticScenario()

    @model_validator(mode="after")
    def _tau_grid(self):
        if self.epi.tau_max < self.epi.tau_min:
            raise ValueError("epi.tau_max must be >= epi.tau_min")
        return self

    def config_hash(self) -> str:
        """
        sha256 of the canonical JSON dump.

        Runtime-only fields are excluded and input paths enter by file name,
        so the same study run from another directory hashes identically.
        """
        payload = self.model_dump(mode="json", exclude={"out", "workers"})
        payload["paths"] = {k: (Path(v).name if isinstance(v, str) else v) for k, v in payload["paths"].items()}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()

    def require_paths(self, *names: str) -> Dict[str, Path]:
        """Resolve the named input paths, failing on unset or missing files."""
        resolved = {}
        for name in names:
            value = getattr(self.paths, name)
            if value is None:
                raise ValidationError(f"Config paths.{name} is not set")
            path = Path(value)
            if not path.exists():
                raise ValidationError(f"Input file for paths.{name} does not exist: {path}")
            resolved[name] = path
        return resolved

    @classmethod
    def defaults(cls) -> Dict:
        """Default values as a JSON-ready dict (seed shown as 0)."""
        return cls(seed=0).model_dump(mode="json")


class ErrorResponse(StrictModel):
    """Error payload printed on stderr when a command fails."""
    error: str
    code: str
    detail: Optional[str] = None


class CoefficientRow(StrictModel):
    parameter: str
    median: float
    q025: float
    q975: float
    separation: bool = False


class EpiReport(StrictModel):
    """JSON report of one epidemiological model."""
    method: str
    outcome: str
    model: Dict[str, object]
    coefficients: List[CoefficientRow]
    mmt: Optional[float] = None
    curve_csv: Optional[str] = None
    rr_table: List[Dict[str, float]] = Field(default_factory=list)


class StageResult(StrictModel):
    """Last recorded outcome of one stage."""
    stage: str
    status: str
    last_run_time: Optional[datetime] = None
    last_success_time: Optional[datetime] = None
    records_written: int = 0
    error_message: Optional[str] = None


class ArtifactStatus(StrictModel):
    kind: str
    key: str
    path: str
    sha256: str
    stale: bool
    sources: Dict[str, Optional[str]] = Field(default_factory=dict)


class StatusReport(StrictModel):
    """Payload of `heatrisk status`."""
    stages: List[StageResult]
    artifacts: List[ArtifactStatus]


def load_config(path: Optional[str] = None, **overrides) -> PipelineConfig:
    """
    Build the pipeline config: file values, then environment, then CLI overrides.

    Relative input paths are resolved against the config file's directory.
    Environment variables: HEATRISK_OUT, HEATRISK_WORKERS.
    """
    load_dotenv()
    raw: Dict = {}
    base = Path.cwd()
    if path is not None:
        cfg_path = Path(path)
        if not cfg_path.exists():
            raise ValidationError(f"Config file not found: {cfg_path}")
        try:
            raw = json.loads(cfg_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ValidationError(f"Config file {cfg_path} is not valid JSON", detail=str(e)) from e
        base = cfg_path.resolve().parent

    if os.getenv("HEATRISK_OUT"):
        raw["out"] = os.getenv("HEATRISK_OUT")
    if os.getenv("HEATRISK_WORKERS"):
        raw["workers"] = int(os.getenv("HEATRISK_WORKERS"))
    raw.update({k: v for k, v in overrides.items() if v is not None})

    paths = dict(raw.get("paths") or {})
    for key, value in paths.items():
        if isinstance(value, str) and not Path(value).is_absolute():
            paths[key] = str(base / value)
    if paths:
        raw["paths"] = paths

    try:
        return PipelineConfig.model_validate(raw)
    except PydanticValidationError as e:
        raise ValidationError("Invalid configuration", detail=str(e)) from e
