"""
Synthetic Scenario Service

Builds a complete input bundle (polygons, stations, reanalysis, mortality,
holidays) from known truths so that every downstream stage can be checked
against what was injected.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
from shapely.geometry import box, mapping

from schemas import SyntheticScenario
from services.artifacts import write_csv, write_json
from services.casecrossover import (
    CAUSE_RANGES,
    OUTCOME_MAIN,
    OUTCOME_NEGATIVE_CONTROL,
    HolidayCalendar,
    lagged_table,
    linked_flags,
)
from services.domain import (
    SUMMER,
    ExposureSurface,
    LocalProjection,
    SeasonWindow,
    as_date,
    controls_for,
    pairwise_distances,
    standardize_altitude,
    substream,
)
from services.ggpm import GgpmParams, simulate
from services.heatwave import HeatwaveSpec, build_calendar

logger = logging.getLogger(__name__)

TRUTH_METHOD = "truth"
INJECTED_HEATWAVE = "q0.9_base"
DIURNAL_PEAK_HOUR = 14
AGE_MIX = ((0, 18, 0.03), (18, 65, 0.14), (65, 80, 0.30), (80, 101, 0.53))


@dataclass(frozen=True)
class SyntheticRegion:
    """Planar layout of a synthetic scenario (km, origin at the south-west corner)."""

    projection: LocalProjection
    width: float
    height: float
    municipality_ids: Sequence[str]
    municipality_boxes: np.ndarray
    station_xy: np.ndarray
    cell_boxes: np.ndarray

    def altitude(self, xy: np.ndarray) -> np.ndarray:
        """Smooth terrain rising to the north with an east-west ripple."""
        xy = np.atleast_2d(xy)
        return 150.0 + 1200.0 * (xy[:, 1] / self.height) ** 1.5 + 150.0 * np.sin(2.0 * np.pi * xy[:, 0] / self.width)

    @property
    def municipality_centroids(self) -> np.ndarray:
        b = self.municipality_boxes
        return np.column_stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2])

    @property
    def cell_centers(self) -> np.ndarray:
        b = self.cell_boxes
        return np.column_stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2])


def build_region(scenario: SyntheticScenario, seed: int) -> SyntheticRegion:
    rng = substream(seed, "synthetic:region")
    km = scenario.municipality_km
    width, height = scenario.n_cols * km, scenario.n_rows * km
    boxes, ids = [], []
    for row in range(scenario.n_rows):
        for col in range(scenario.n_cols):
            ids.append(f"m{row * scenario.n_cols + col + 1:03d}")
            boxes.append((col * km, row * km, (col + 1) * km, (row + 1) * km))

    stations = np.column_stack([
        rng.uniform(0.05 * width, 0.95 * width, scenario.n_stations),
        rng.uniform(0.05 * height, 0.95 * height, scenario.n_stations),
    ])

    c = scenario.reanalysis_cell_km
    nx, ny = int(np.ceil(width / c)), int(np.ceil(height / c))
    cells = [(i * c, j * c, (i + 1) * c, (j + 1) * c) for j in range(ny) for i in range(nx)]

    return SyntheticRegion(
        projection=LocalProjection(scenario.origin_lon, scenario.origin_lat),
        width=width,
        height=height,
        municipality_ids=ids,
        municipality_boxes=np.array(boxes, dtype=float),
        station_xy=stations,
        cell_boxes=np.array(cells, dtype=float),
    )


def _seasonal(n_days: int, amplitude: float) -> np.ndarray:
    return amplitude * np.sin(np.pi * np.arange(n_days) / max(n_days - 1, 1))


def simulate_truth(
    scenario: SyntheticScenario,
    region: SyntheticRegion,
    season: SeasonWindow,
    seed: int,
) -> Dict[str, pd.DataFrame]:
    """
    Joint draw of the GGPM field at stations, municipality centroids and cell centres.

    Returns wide (point x date) frames: 'stations' (with nugget), and the
    noise-free 'municipalities' and 'cells'.
    """
    points = np.vstack([region.station_xy, region.municipality_centroids, region.cell_centers])
    n_st, n_mu = len(region.station_xy), len(region.municipality_ids)
    station_alt = region.altitude(region.station_xy)
    _, scaler = standardize_altitude(station_alt)
    alt_std = scaler.transform(region.altitude(points))

    params = GgpmParams(
        beta0=scenario.beta0,
        beta1=scenario.beta1,
        a=scenario.a,
        sigma2_omega=scenario.sigma2_omega,
        k=scenario.k,
        nu=scenario.nu,
        sigma2_eps=scenario.sigma2_eps,
    )
    rng = substream(seed, "synthetic:field")
    blocks = {"stations": [], "municipalities": [], "cells": []}
    for year in scenario.years:
        dates = season.index([year])
        field = simulate(params, points, alt_std, len(dates), int(rng.integers(2 ** 31)))
        seasonal = _seasonal(len(dates), scenario.seasonal_amplitude)[None, :]
        trend = (params.beta0 + params.beta1 * alt_std)[:, None] + seasonal
        latent = trend + field.xi
        observed = field.y + seasonal
        blocks["stations"].append(pd.DataFrame(observed[:n_st], columns=dates))
        blocks["municipalities"].append(pd.DataFrame(latent[n_st:n_st + n_mu], columns=dates))
        blocks["cells"].append(pd.DataFrame(latent[n_st + n_mu:], columns=dates))

    out = {k: pd.concat(v, axis=1) for k, v in blocks.items()}
    out["stations"].index = [f"st{i + 1:02d}" for i in range(n_st)]
    out["municipalities"].index = list(region.municipality_ids)
    out["cells"].index = [f"c{i + 1:03d}" for i in range(len(region.cell_boxes))]
    return out


def degrade_reanalysis(cells: pd.DataFrame, centers: np.ndarray, scenario: SyntheticScenario) -> pd.DataFrame:
    """Spatially smoothed, biased and upper-tail-compressed copy of the cell truth."""
    values = cells.to_numpy(dtype=float)
    if scenario.reanalysis_smoothing_km > 0:
        d = pairwise_distances(centers)
        w = np.exp(-0.5 * (d / scenario.reanalysis_smoothing_km) ** 2)
        w /= w.sum(axis=1, keepdims=True)
        values = w @ values
    values = values + scenario.reanalysis_bias
    q90 = np.quantile(values, 0.9, axis=1, keepdims=True)
    values = np.where(values > q90, q90 + scenario.reanalysis_tail_compression * (values - q90), values)
    return pd.DataFrame(values, index=cells.index, columns=cells.columns)


def hourly_rows(daily: pd.DataFrame, diurnal_range: float) -> pd.DataFrame:
    """Expand daily maxima into 24 hourly values peaking at the daily maximum."""
    hours = np.arange(24)
    profile = 0.5 * diurnal_range * (1.0 - np.cos(2.0 * np.pi * (hours - DIURNAL_PEAK_HOUR) / 24.0))
    long = daily.stack().rename("tmax").reset_index()
    long.columns = ["cell_id", "date", "tmax"]
    rep = long.loc[long.index.repeat(24)].reset_index(drop=True)
    rep["hour"] = np.tile(hours, len(long))
    rep["temp"] = rep["tmax"] - np.tile(profile, len(long))
    return rep.drop(columns="tmax")


def injected_log_rr(x, slope: float, knot: float) -> np.ndarray:
    """Piecewise-linear log relative risk, flat below the knot."""
    return slope * np.maximum(np.asarray(x, dtype=float) - knot, 0.0)


def _draw_ages(rng: np.random.Generator, n: int) -> np.ndarray:
    probs = np.array([p for _, _, p in AGE_MIX])
    band = rng.choice(len(AGE_MIX), size=n, p=probs / probs.sum())
    lo = np.array([a for a, _, _ in AGE_MIX])[band]
    hi = np.array([b for _, b, _ in AGE_MIX])[band]
    return np.floor(rng.uniform(lo, hi)).astype(int)


def _icd_codes(rng: np.random.Generator, n: int, outcome: str) -> np.ndarray:
    ranges = CAUSE_RANGES[outcome]
    pick = rng.integers(0, len(ranges), size=n)
    codes = []
    for k in pick:
        lo, hi = ranges[k]
        number = rng.integers(int(lo[1:]), int(hi[1:]) + 1)
        codes.append(f"{lo[0]}{number:02d}")
    return np.array(codes, dtype=object)


def simulate_mortality(
    truth: pd.DataFrame,
    scenario: SyntheticScenario,
    holidays: HolidayCalendar,
    seed: int,
    season: SeasonWindow = SUMMER,
) -> Dict[str, object]:
    """
    Daily Poisson deaths per municipality with injected temperature, holiday and heatwave effects.

    The temperature driving the main outcome is the 3-day lagged mean of the
    noise-free municipality truth; negative-control deaths ignore all effects.
    """
    rng = substream(seed, "synthetic:mortality")
    surface = ExposureSurface(TRUTH_METHOD, truth)
    lagged = lagged_table(surface, 3, False).reindex(columns=truth.columns)
    calendar = build_calendar(surface, HeatwaveSpec.parse(INJECTED_HEATWAVE), season)
    heat = linked_flags(calendar, 3).reindex(columns=truth.columns).fillna(0.0)

    dates = pd.DatetimeIndex(truth.columns)
    in_summer = np.array([season.contains(d.date()) for d in dates])
    hol = np.array([d.date() in holidays for d in dates], dtype=float)
    pop = scenario.population / len(truth)

    eta = (
        injected_log_rr(lagged.to_numpy(), scenario.logrr_slope, scenario.logrr_knot)
        + np.log(scenario.holiday_rr) * hol[None, :]
        + np.log(scenario.heatwave_rr) * heat.to_numpy()
    )
    rate = pop * scenario.daily_death_rate * np.exp(np.nan_to_num(eta))
    rate[:, ~in_summer] = 0.0
    main = rng.poisson(rate)
    nc_rate = np.where(in_summer[None, :], pop * scenario.daily_death_rate * scenario.negative_control_fraction, 0.0)
    control = rng.poisson(np.broadcast_to(nc_rate, rate.shape))

    rows = []
    for counts, outcome in ((main, OUTCOME_MAIN), (control, OUTCOME_NEGATIVE_CONTROL)):
        mi, di = np.nonzero(counts)
        n = counts[mi, di]
        muni = np.repeat(np.asarray(truth.index)[mi], n)
        day = np.repeat(dates[di], n)
        total = int(n.sum())
        rows.append(pd.DataFrame({
            "date": day,
            "municipality_id": muni,
            "age": _draw_ages(rng, total),
            "sex": rng.choice(["female", "male"], size=total),
            "icd10": _icd_codes(rng, total, outcome),
        }))
    records = pd.concat(rows, ignore_index=True).sort_values(["date", "municipality_id", "icd10"], kind="mergesort")
    records.insert(0, "id", [f"d{i + 1:07d}" for i in range(len(records))])
    return {
        "records": records.reset_index(drop=True),
        "expected_main": float(rate.sum()),
        "expected_negative_control": float(nc_rate.sum() * len(truth)),
        "heatwave_prevalence": float(calendar.prevalence()),
    }


def _geojson(region: SyntheticRegion) -> Dict[str, object]:
    alt = region.altitude(region.municipality_centroids)
    features = []
    for mid, (x0, y0, x1, y1), a in zip(region.municipality_ids, region.municipality_boxes, alt):
        lon0, lat0 = region.projection.unproject(x0, y0)
        lon1, lat1 = region.projection.unproject(x1, y1)
        features.append({
            "type": "Feature",
            "properties": {"id": mid, "alt_m": round(float(a), 1)},
            "geometry": mapping(box(float(lon0), float(lat0), float(lon1), float(lat1))),
        })
    return {"type": "FeatureCollection", "features": features}


def _station_frame(stations: pd.DataFrame, region: SyntheticRegion, missing_fraction: float, seed: int) -> pd.DataFrame:
    rng = substream(seed, "synthetic:missing")
    lon, lat = region.projection.unproject(region.station_xy[:, 0], region.station_xy[:, 1])
    alt = region.altitude(region.station_xy)
    long = stations.stack().rename("tmax").reset_index()
    long.columns = ["station_id", "date", "tmax"]
    meta = pd.DataFrame({"station_id": stations.index, "lon": lon, "lat": lat, "alt_m": np.round(alt, 1)})
    long = long.merge(meta, on="station_id", how="left")
    keep = rng.uniform(size=len(long)) >= missing_fraction
    return long.loc[keep, ["station_id", "lon", "lat", "alt_m", "date", "tmax"]].reset_index(drop=True)


def _cell_frame(cells: pd.DataFrame, region: SyntheticRegion) -> pd.DataFrame:
    b = region.cell_boxes
    lon0, lat0 = region.projection.unproject(b[:, 0], b[:, 1])
    lon1, lat1 = region.projection.unproject(b[:, 2], b[:, 3])
    return pd.DataFrame(
        {"cell_id": cells.index, "lon_min": lon0, "lat_min": lat0, "lon_max": lon1, "lat_max": lat1}
    )


def make_synthetic(
    scenario: SyntheticScenario,
    seed: int,
    out_dir,
    season: SeasonWindow = SeasonWindow(),
    pre_aggregated: bool = False,
) -> Dict[str, Path]:
    """
    Write a full input bundle plus a truths manifest into out_dir.

    Returns the written paths keyed as in the pipeline config's `paths` block,
    with 'truths' and 'truth_surface' added.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    region = build_region(scenario, seed)
    truth = simulate_truth(scenario, region, season, seed)
    holidays = HolidayCalendar.national_summer(scenario.years)

    paths = {
        "polygons": out / "municipalities.geojson",
        "stations": out / "stations.csv",
        "reanalysis": out / "reanalysis.csv",
        "mortality": out / "mortality.csv",
        "holidays": out / "holidays.csv",
        "truth_surface": out / "truth_surface.csv",
        "truths": out / "truths.json",
    }

    paths["polygons"].write_text(json.dumps(_geojson(region), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    write_csv(_station_frame(truth["stations"], region, scenario.missing_fraction, seed), paths["stations"])

    reanalysis = degrade_reanalysis(truth["cells"], region.cell_centers, scenario)
    cells = _cell_frame(reanalysis, region)
    if pre_aggregated:
        daily = reanalysis.stack().rename("tmax").reset_index()
        daily.columns = ["cell_id", "date", "tmax"]
        write_csv(cells.merge(daily, on="cell_id"), paths["reanalysis"])
    else:
        write_csv(cells.merge(hourly_rows(reanalysis, scenario.diurnal_range), on="cell_id"), paths["reanalysis"])

    mortality = simulate_mortality(truth["municipalities"], scenario, holidays, seed)
    write_csv(mortality["records"], paths["mortality"])
    write_csv(pd.DataFrame({"date": sorted(pd.Timestamp(d) for d in holidays.dates)}), paths["holidays"])
    write_csv(ExposureSurface(TRUTH_METHOD, truth["municipalities"]).to_long(), paths["truth_surface"])

    records = mortality["records"]
    truths = {
        "seed": seed,
        "scenario": scenario.model_dump(mode="json"),
        "projection": region.projection.describe(),
        "ggpm": {
            "beta0": scenario.beta0,
            "beta1": scenario.beta1,
            "a": scenario.a,
            "sigma2_omega": scenario.sigma2_omega,
            "k": scenario.k,
            "nu": scenario.nu,
            "sigma2_eps": scenario.sigma2_eps,
            "seasonal_amplitude": scenario.seasonal_amplitude,
        },
        "reanalysis": {
            "bias": scenario.reanalysis_bias,
            "smoothing_km": scenario.reanalysis_smoothing_km,
            "tail_compression": scenario.reanalysis_tail_compression,
            "pre_aggregated": pre_aggregated,
        },
        "epi": {
            "logrr_slope": scenario.logrr_slope,
            "logrr_knot": scenario.logrr_knot,
            "holiday_logrr": float(np.log(scenario.holiday_rr)),
            "heatwave_logrr": float(np.log(scenario.heatwave_rr)),
            "heatwave_spec": INJECTED_HEATWAVE,
            "heatwave_prevalence": mortality["heatwave_prevalence"],
        },
        "counts": {
            "main": int(records["icd10"].str[0].isin(["I", "J"]).sum()),
            "negative_control": int(records["icd10"].str[0].eq("C").sum()),
            "expected_main": mortality["expected_main"],
            "expected_negative_control": mortality["expected_negative_control"],
        },
        "stations": list(truth["stations"].index),
        "municipalities": list(region.municipality_ids),
    }
    write_json(truths, paths["truths"])
    logger.info(
        f"Synthetic bundle in {out}: {len(region.municipality_ids)} municipalities, "
        f"{scenario.n_stations} stations, {len(records)} mortality records"
    )
    return paths


def simulate_case_crossover(
    n_strata: int,
    seed: int,
    method: str = "reanalysis",
    logrr_slope: float = 0.0,
    logrr_knot: float = 28.0,
    holiday_rr: float = 1.0,
    heatwave_rr: float = 1.0,
    heatwave_prevalence: float = 0.1,
    exposure_mean: float = 27.0,
    exposure_sd: float = 3.5,
    years: Sequence[int] = (2019, 2020),
    n_municipalities: int = 20,
    heatwave_spec: str = INJECTED_HEATWAVE,
    holidays: Optional[HolidayCalendar] = None,
) -> pd.DataFrame:
    """
    Case-crossover dataset drawn directly from the conditional model.

    Each stratum is a real time-stratified referent set; the case row is
    drawn within the stratum with probability proportional to exp(eta).
    The heatwave column is independent of the exposure.
    """
    rng = substream(seed, "synthetic:casecrossover")
    if holidays is None:
        holidays = HolidayCalendar.national_summer(years)
    days = SUMMER.index(list(years))
    munis = [f"m{i + 1:03d}" for i in range(n_municipalities)]

    phi = 0.8
    noise = np.zeros((n_municipalities, len(days)))
    noise[:, 0] = rng.standard_normal(n_municipalities)
    for j in range(1, len(days)):
        noise[:, j] = phi * noise[:, j - 1] + np.sqrt(1 - phi ** 2) * rng.standard_normal(n_municipalities)
    doy = np.array([d.dayofyear for d in days])
    seasonal = 2.0 * np.sin(np.pi * (doy - 152) / 92.0)
    exposure = pd.DataFrame(exposure_mean + seasonal + exposure_sd * noise, index=munis, columns=days)
    heat = pd.DataFrame(rng.uniform(size=exposure.shape) < heatwave_prevalence, index=munis, columns=days).astype(int)

    event_days = days[rng.integers(0, len(days), size=n_strata)]
    event_munis = np.asarray(munis)[rng.integers(0, n_municipalities, size=n_strata)]
    ages = _draw_ages(rng, n_strata)
    sexes = rng.choice(["female", "male"], size=n_strata)

    exp_col = f"exposure_{method}"
    hw_col = f"hw_{method}_{heatwave_spec}"
    frames = []
    for k in range(n_strata):
        event = as_date(event_days[k])
        ref = pd.DatetimeIndex(sorted([event, *controls_for(event)]))
        ref = ref[ref.isin(days)]
        x = exposure.loc[event_munis[k], ref].to_numpy()
        hw = heat.loc[event_munis[k], ref].to_numpy()
        hol = np.array([d.date() in holidays for d in ref], dtype=int)
        eta = injected_log_rr(x, logrr_slope, logrr_knot) + np.log(holiday_rr) * hol + np.log(heatwave_rr) * hw
        p = np.exp(eta - eta.max())
        case = np.zeros(len(ref), dtype=int)
        case[rng.choice(len(ref), p=p / p.sum())] = 1
        frames.append(pd.DataFrame({
            "stratum": k + 1,
            "case": case,
            "date": ref,
            "municipality_id": event_munis[k],
            "record_id": f"s{k + 1:06d}",
            "age": ages[k],
            "sex": sexes[k],
            exp_col: x,
            hw_col: hw,
            "holiday": hol,
        }))
    return pd.concat(frames, ignore_index=True)
