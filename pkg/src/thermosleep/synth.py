"""Synthetic data with a known temperature-sleep dose response.

Two generators share the same :class:`Truth`:

* :func:`simulate_panel` draws a person-night table directly (exposures and
  outcomes), fast enough for Monte Carlo replications.
* :func:`synthesize` writes the raw inputs of the full pipeline (minute
  epochs, users, stations, grid, scenario grids). Sleep durations there are
  generated from the exposures the pipeline itself links to each user, so a
  fit on the ingested data targets the truth exactly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .models import SEASONS, default_schemes, season_of
from .weather import LinkConfig, assemble_exposures, heat_index, quantize

FAMILIES = ("linear", "kinked", "binned", "group", "season")
BASE_DURATION = 450.0
BASE_ONSET = 660  # 23:00 as minutes from noon


def _default_steps() -> tuple[float, ...]:
    # one value per bin of the base tmin scheme; [5, 10) is 0
    return (2.5, 2.0, 1.5, 0.5, 0.0, -1.5, -3.5, -5.0, -7.0)


@dataclass(frozen=True)
class Truth:
    """Generating dose response of sleep minutes on nightly tmin.

    Families
    --------
    linear : ``slope * t``
    kinked : ``slope_below * min(t - kink, 0) + slope_above * max(t - kink, 0)``
    binned : step value of the base tmin bin containing ``t``
    group : ``group_slopes[g] * t`` for the user's group ``g``
    season : ``season_slopes[s] * t`` for the night's season ``s``
    """

    family: str = "linear"
    slope: float = -0.30
    kink: float = 10.0
    slope_below: float = 0.0
    slope_above: float = -0.45
    steps: tuple[float, ...] = field(default_factory=_default_steps)
    group_column: str = "age_group"
    group_slopes: dict = field(default_factory=lambda: {"middle": -0.25, "older": -0.5})
    season_slopes: dict = field(default_factory=lambda: {
        "winter": -0.15, "spring": -0.25, "fall": -0.35, "summer": -0.45})

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown truth family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "binned" and len(self.steps) != default_schemes()["tmin"].n_bins:
            raise ValueError("binned truth needs one step per base tmin bin")
        if self.family == "season" and set(self.season_slopes) != set(SEASONS):
            raise ValueError(f"season truth needs slopes for {SEASONS}")

    def effect(self, tmin, group=None, season=None) -> np.ndarray:
        t = np.asarray(tmin, float)
        if self.family == "linear":
            return self.slope * t
        if self.family == "kinked":
            d = t - self.kink
            return self.slope_below * np.minimum(d, 0.0) + self.slope_above * np.maximum(d, 0.0)
        if self.family == "binned":
            scheme = default_schemes()["tmin"]
            idx = np.searchsorted(np.asarray(scheme.edges), t, side="right")
            return np.asarray(self.steps, float)[idx]
        if self.family == "group":
            if group is None:
                raise ValueError("group truth needs group labels")
            s = pd.Series(np.asarray(group)).map(self.group_slopes)
            if s.isna().any():
                raise ValueError("group label without a slope")
            return s.to_numpy(float) * t
        if season is None:
            raise ValueError("season truth needs season labels")
        s = pd.Series(np.asarray(season)).map(self.season_slopes)
        return s.to_numpy(float) * t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["steps"] = list(self.steps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Truth":
        d = dict(d)
        if "steps" in d:
            d["steps"] = tuple(float(v) for v in d["steps"])
        return cls(**d)


def _ar1(rng, shape, rho: float, sd: float) -> np.ndarray:
    """AR(1) along the last axis with stationary standard deviation ``sd``."""
    e = rng.normal(0.0, sd * math.sqrt(1 - rho * rho), shape)
    out = np.empty(shape)
    out[..., 0] = rng.normal(0.0, sd, shape[:-1])
    for k in range(1, shape[-1]):
        out[..., k] = rho * out[..., k - 1] + e[..., k]
    return out


def _seasonal(mean, lat, doy, amplitude):
    """Annual cycle peaking in late July (north) or late January (south)."""
    sign = np.where(np.asarray(lat) < 0, -1.0, 1.0)
    return mean + amplitude * sign * np.cos(2 * np.pi * (np.asarray(doy) - 200) / 365.0)


def simulate_panel(n_users: int = 2000, n_nights: int = 90, truth: Truth = Truth(), seed: int = 0,
                   n_adm1: int = 25, start: str = "2016-06-01", coverage: float = 1.0,
                   sigma: float = 20.0, southern_share: float = 0.0) -> pd.DataFrame:
    """Person-night table with exposures and outcomes drawn from ``truth``.

    Nightly tmin is a regional annual cycle plus a persistent regional
    weather shock, a user microclimate offset and a user-night deviation.
    Duration is ``450 + truth + user + date + admin1-month effects + noise``.
    The table has every column :func:`~thermosleep.models.build_design`
    uses; ``attrs["truth"]`` holds the truth.
    """
    if n_users < 2 or n_nights < 2 or n_adm1 < 2:
        raise ValueError("need at least 2 users, nights and regions")
    if not 0 < coverage <= 1:
        raise ValueError("coverage must be in (0, 1]")
    rng = np.random.default_rng(seed)
    dates = pd.date_range(start, periods=n_nights, freq="D")
    doy = dates.dayofyear.to_numpy()
    south = rng.random(n_adm1) < southern_share
    reg_lat = np.where(south, -rng.uniform(25, 45, n_adm1), rng.uniform(25, 60, n_adm1))
    reg_lon = rng.uniform(-120, 140, n_adm1)
    reg_mean = 24.0 - 0.55 * (np.abs(reg_lat) - 25.0) + rng.normal(0, 2, n_adm1)
    shock = _ar1(rng, (n_adm1, n_nights), 0.7, 3.0)

    adm1 = np.arange(n_users) % n_adm1
    if truth.family == "group":
        labels = np.array(sorted(truth.group_slopes))
    else:
        labels = np.array(["young", "middle", "older"])
    group = labels[rng.integers(0, len(labels), n_users)]
    micro = rng.normal(0, 1.5, n_users)
    amp = 9.0 + rng.normal(0, 1.5, n_users)
    # user-level climate offsets for the control normals
    cn = rng.normal(0, 1, (5, n_users))
    user_fe = rng.normal(0, 30, n_users)
    user_onset = rng.normal(0, 30, n_users)
    date_fe = rng.normal(0, 5, n_nights)

    u = np.repeat(np.arange(n_users), n_nights)
    d = np.tile(np.arange(n_nights), n_users)
    if coverage < 1:
        keep = rng.random(len(u)) < coverage
        u, d = u[keep], d[keep]
    a = adm1[u]
    lat = reg_lat[a]
    normal = _seasonal(reg_mean[a], lat, doy[d], amp[u]) + micro[u]
    tmin = quantize(normal + shock[a, d] + rng.normal(0, 1.0, len(u)))
    normal = quantize(normal)
    dtr = np.clip(9.0 + rng.normal(0, 2.5, len(u)), 0.5, None)
    prcp = np.where(rng.random(len(u)) < 0.6, 0.0, rng.exponential(0.8, len(u)))
    wind = rng.gamma(3.0, 1.5, len(u))
    cloud = rng.uniform(0, 100, len(u))
    rh = np.clip(rng.normal(65, 15, len(u)), 0, 100)

    nights = dates[d]
    season = season_of(nights, lat) if truth.family == "season" else None
    effect = truth.effect(tmin, group=group[u], season=season)
    month = (nights.year * 100 + nights.month).to_numpy()
    am_codes = pd.factorize(a * 1_000_000 + month, sort=True)[0]
    am_fe = rng.normal(0, 3, am_codes.max() + 1)[am_codes]
    duration = BASE_DURATION + effect + user_fe[u] + date_fe[d] + am_fe + rng.normal(0, sigma, len(u))
    onset = BASE_ONSET + user_onset[u] - 0.3 * effect + rng.normal(0, 20, len(u))
    offset = onset + duration

    out = pd.DataFrame({
        "user_id": np.char.add("u", u.astype(str)),
        "night_date": nights,
        "adm1": np.char.add("r", a.astype(str)),
        "lat": lat,
        "lon": reg_lon[a],
        "age_group": group[u],
        "tmin": tmin,
        "tmax": tmin + dtr,
        "dtr": dtr,
        "prcp": prcp,
        "wind": wind,
        "cloud": cloud,
        "rh": rh,
        "tmin_normal": normal,
        "dtr_normal": _seasonal(9.0 + cn[0, u], lat, doy[d], 1.0 + 0.3 * cn[0, u]),
        "prcp_normal": _seasonal(0.32 + 0.05 * cn[1, u], lat, doy[d], 0.1 + 0.02 * cn[1, u]),
        "wind_normal": _seasonal(4.5 + 0.5 * cn[2, u], lat, doy[d], -0.5 + 0.2 * cn[2, u]),
        "cloud_normal": _seasonal(50.0 + 5 * cn[3, u], lat, doy[d], 10.0 + 2 * cn[3, u]),
        "rh_normal": _seasonal(65.0 + 5 * cn[4, u], lat, doy[d], 5.0 + 2 * cn[4, u]),
        "tmin_anomaly": tmin - normal,
        "heat_index": heat_index(tmin, rh),
        "complete": True,
        "duration_min": duration,
        "total24h_min": duration,
        "onset_min": onset,
        "offset_min": offset,
        "midsleep_min": (onset + offset) / 2,
    })
    for k in (7, 6, 5):
        out[f"flag_lt{k}"] = (duration < 60 * k).astype(int)
    out.attrs["truth"] = truth.to_dict()
    return out


# ---------------------------------------------------------------------------
# full pipeline inputs


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 12
    n_days: int = 120
    start: str = "2016-01-01"
    n_adm1: int = 4
    stations_per_adm1: int = 3
    history_years: tuple[int, int] = (1981, 2010)
    coverage: float = 0.9
    sigma: float = 5.0
    gap_prob: float = 0.15
    nap_prob: float = 0.1
    min_nights: int = 28
    southern_share: float = 0.0
    grid_step: float = 2.5
    n_models: int = 3
    scenario_years: tuple[int, ...] = (2010, 2050, 2099)
    scenario_lat_step: float = 20.0
    scenario_lon_step: float = 40.0
    truth: Truth = Truth()

    def __post_init__(self):
        if self.n_users < 1 or self.n_days < 1 or self.n_adm1 < 1 or self.stations_per_adm1 < 1:
            raise ValueError("sizes must be positive")
        if not 0 < self.coverage <= 1:
            raise ValueError("coverage must be in (0, 1]")
        if self.min_nights > self.n_days:
            raise ValueError(f"min_nights={self.min_nights} exceeds the {self.n_days} simulated days")
        if self.history_years[0] > self.history_years[1]:
            raise ValueError("history_years must be ascending")
        if 2010 not in self.scenario_years:
            raise ValueError("scenario_years must include the 2010 baseline")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "truth" in d:
            d["truth"] = Truth.from_dict(d["truth"])
        for k in ("history_years", "scenario_years"):
            if k in d:
                d[k] = tuple(int(v) for v in d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["truth"] = self.truth.to_dict()
        d["history_years"] = list(self.history_years)
        d["scenario_years"] = list(self.scenario_years)
        return d


def _offset_point(rng, lat, lon, max_km, n):
    r = max_km * np.sqrt(rng.random(n))
    theta = rng.uniform(0, 2 * np.pi, n)
    dlat = r * np.cos(theta) / 111.2
    dlon = r * np.sin(theta) / (111.2 * np.cos(np.deg2rad(lat)))
    return np.round(lat + dlat, 4), np.round(lon + dlon, 4)


def _weather_frames(cfg: SynthConfig, rng):
    """Regions, stations (history plus study period) and the reanalysis grid."""
    n_reg = cfg.n_adm1
    south = rng.random(n_reg) < cfg.southern_share
    # regions stay within a few grid cells of each other to keep the grid small
    reg_lat = np.where(south, -rng.uniform(34, 40, n_reg), rng.uniform(40, 47, n_reg))
    reg_lon = rng.uniform(0, 9, n_reg)
    reg_mean = 22.0 - 0.6 * (np.abs(reg_lat) - 28.0) + rng.normal(0, 1.5, n_reg)

    study = pd.date_range(cfg.start, periods=cfg.n_days, freq="D")
    hist = pd.date_range(f"{cfg.history_years[0]}-01-01", f"{cfg.history_years[1]}-12-31", freq="D")
    dates = hist.union(study)
    doy = dates.dayofyear.to_numpy()
    years = dates.year.to_numpy()
    shock = _ar1(rng, (n_reg, len(dates)), 0.7, 3.0)
    trend = 0.02 * (years - 2000)

    rows = []
    n_st = cfg.stations_per_adm1
    for r in range(n_reg):
        slat, slon = _offset_point(rng, reg_lat[r], reg_lon[r], 40.0, n_st)
        base = _seasonal(reg_mean[r], reg_lat[r], doy, 9.0) + trend + shock[r]
        for s in range(n_st):
            tmin = quantize(base + rng.normal(0, 0.8) + rng.normal(0, 1.0, len(dates)))
            dtr = np.clip(9.0 + rng.normal(0, 2.5, len(dates)), 0.5, None)
            tmax = quantize(tmin + dtr)
            wet = rng.random(len(dates)) < 0.4
            prcp = np.where(wet, np.round(rng.exponential(0.8, len(dates)), 2), 0.0)
            rows.append(pd.DataFrame({
                "station_id": f"S{r:02d}{s:02d}", "lat": slat[s], "lon": slon[s], "date": dates,
                "tmin_c": tmin, "tmax_c": tmax, "prcp_cm": prcp,
            }))
    stations = pd.concat(rows, ignore_index=True)

    step = cfg.grid_step
    lat_c = np.arange(np.floor((reg_lat.min() - 1) / step), np.ceil((reg_lat.max() + 1) / step) + 1) * step
    lon_c = np.arange(np.floor((reg_lon.min() - 1) / step), np.ceil((reg_lon.max() + 1) / step) + 1) * step
    cells = [(la, lo) for la in lat_c for lo in lon_c]
    g = []
    for la, lo in cells:
        n = len(dates)
        g.append(pd.DataFrame({
            "lat": la, "lon": lo, "date": dates,
            "tmin_c": quantize(_seasonal(22.0 - 0.6 * (abs(la) - 28.0), la, doy, 9.0) + rng.normal(0, 2, n)),
            "wind_ms": np.round(rng.gamma(3.0, 1.5, n), 2),
            "cloud_pct": np.round(rng.uniform(0, 100, n), 1),
            "rh_pct": np.round(np.clip(_seasonal(65.0, la, doy, -8.0) + rng.normal(0, 12, n), 0, 100), 1),
        }))
    grid = pd.concat(g, ignore_index=True)
    regions = pd.DataFrame({"adm1": [f"R{r:02d}" for r in range(n_reg)], "lat": reg_lat, "lon": reg_lon,
                            "iso3": ["SYA" if la >= 0 else "SYB" for la in reg_lat]})
    return regions, stations, grid, study


def _scenario(cfg: SynthConfig, rng):
    lat = np.arange(-60, 61, cfg.scenario_lat_step)
    lon = np.arange(-180 + cfg.scenario_lon_step / 2, 180, cfg.scenario_lon_step)
    cells = pd.MultiIndex.from_product([lat, lon], names=["lat", "lon"]).to_frame(index=False)
    doy = np.arange(1, 366)
    base = _seasonal(22.0 - 0.5 * np.abs(cells["lat"].to_numpy())[:, None], cells["lat"].to_numpy()[:, None],
                     doy[None, :], 8.0)
    parts = []
    for m in range(cfg.n_models):
        sens = 0.5 + rng.random() * 1.0
        weather = rng.normal(0, 1.0, base.shape)
        for y in cfg.scenario_years:
            warm = sens * max(0, y - 2010) / 30.0
            t = quantize(base + warm + (weather if y == 2010 else rng.normal(0, 1.0, base.shape)))
            parts.append(pd.DataFrame({
                "model": f"M{m + 1:02d}", "year": y,
                "lat": np.repeat(cells["lat"].to_numpy(), 365), "lon": np.repeat(cells["lon"].to_numpy(), 365),
                "doy": np.tile(doy, len(cells)), "tmin_c": t.ravel(),
            }))
    scen = pd.concat(parts, ignore_index=True)
    mask = cells.assign(iso3=np.where(cells["lat"] >= 0, "NTH", "STH"))
    # leave the polar band unassigned
    mask = mask[cells["lat"].abs() < 60]
    return scen, mask


def _epochs(users: pd.DataFrame, nights: pd.DataFrame, rng, cfg: SynthConfig) -> pd.DataFrame:
    """Minute epochs around each simulated night (plus afternoon naps)."""
    tz = users.set_index("user_id")["utc_offset_min"]
    pieces = []
    pad = 10
    for uid, g in nights.groupby("user_id", sort=True):
        starts, states = [], []
        for night, onset, dur, gap_at, gap_len, nap in zip(
                g["night_date"], g["onset"], g["duration"], g["gap_at"], g["gap_len"], g["nap"]):
            noon = (night - pd.Timestamp("1970-01-01")).days * 1440 + 720
            if nap > 0:
                nap_start = noon + 120
                st = np.zeros(nap + 2 * pad, np.int8)
                st[pad:pad + nap] = 1
                starts.append(nap_start - pad)
                states.append(st)
            span = dur + gap_len
            st = np.zeros(span + 2 * pad, np.int8)
            st[pad:pad + span] = 1
            if gap_len:
                st[pad + gap_at:pad + gap_at + gap_len] = 0
            starts.append(noon + onset - pad)
            states.append(st)
        local = np.concatenate([s + np.arange(len(x)) for s, x in zip(starts, states)])
        state = np.concatenate(states)
        off = int(tz[uid])
        sign = "+" if off >= 0 else "-"
        suffix = f"{sign}{abs(off) // 60:02d}:{abs(off) % 60:02d}"
        stamp = np.char.add(np.datetime_as_string(local.astype("datetime64[m]"), unit="m"), suffix)
        pieces.append(pd.DataFrame({"user_id": uid, "timestamp_iso8601_with_offset": stamp, "state": state}))
    return pd.concat(pieces, ignore_index=True)


def synthesize(cfg: SynthConfig, seed: int) -> dict[str, pd.DataFrame | dict]:
    """Generate every raw input of the pipeline plus ``truth``.

    Returns a mapping of file stem to frame: epochs, users, stations, grid,
    scenario_grid, country_mask, and ``truth`` (a dict).
    """
    rng = np.random.default_rng(seed)
    regions, stations, grid, study = _weather_frames(cfg, rng)

    n = cfg.n_users
    reg = np.arange(n) % cfg.n_adm1
    ulat, ulon = _offset_point(rng, regions["lat"].to_numpy()[reg], regions["lon"].to_numpy()[reg], 30.0, n)
    if cfg.truth.family == "group":
        labels = np.array(sorted(cfg.truth.group_slopes))
    else:
        labels = np.array(["young", "middle", "older"])
    users = pd.DataFrame({
        "user_id": [f"U{i:04d}" for i in range(n)],
        "lat": ulat, "lon": ulon,
        "adm1": regions["adm1"].to_numpy()[reg],
        "iso3": regions["iso3"].to_numpy()[reg],
        "age_group": labels[rng.integers(0, len(labels), n)],
        "utc_offset_min": (np.round(ulon / 15.0) * 60).astype(int),
    })

    # nights each user records
    grid_nights = pd.MultiIndex.from_product([users["user_id"], study], names=["user_id", "night_date"])
    nights = grid_nights.to_frame(index=False)
    nights = nights[rng.random(len(nights)) < cfg.coverage].reset_index(drop=True)

    exp = assemble_exposures(nights, users, stations, grid, LinkConfig(normal_years=cfg.history_years))
    if not exp["complete"].all():
        raise ValueError("synthetic weather left person-nights without exposure")
    ulook = users.set_index("user_id")
    lat = ulook["lat"].reindex(nights["user_id"]).to_numpy()
    season = season_of(nights["night_date"], lat) if cfg.truth.family == "season" else None
    group = ulook["age_group"].reindex(nights["user_id"]).to_numpy()
    effect = cfg.truth.effect(exp["tmin"].to_numpy(), group=group, season=season)

    uidx = pd.factorize(nights["user_id"], sort=True)[0]
    didx = pd.factorize(nights["night_date"], sort=True)[0]
    user_fe = rng.normal(0, 25, n)
    date_fe = rng.normal(0, 4, len(study))
    onset_fe = rng.normal(0, 25, n)
    dur = np.rint(BASE_DURATION + effect + user_fe[uidx] + date_fe[didx] + rng.normal(0, cfg.sigma, len(nights)))
    dur = np.clip(dur, 250, 660).astype(int)
    onset = np.rint(BASE_ONSET + onset_fe[uidx] + rng.normal(0, 15, len(nights))).astype(int)
    onset = np.clip(onset, 480, 780)  # 20:00 to 01:00
    has_gap = rng.random(len(nights)) < cfg.gap_prob
    gap_len = np.where(has_gap, rng.integers(5, 45, len(nights)), 0)
    gap_at = rng.integers(60, 200, len(nights))
    nap = np.where(rng.random(len(nights)) < cfg.nap_prob, rng.integers(20, 90, len(nights)), 0)
    nights = nights.assign(onset=onset, duration=dur, gap_len=gap_len, gap_at=gap_at, nap=nap)
    epochs = _epochs(users, nights, rng, cfg)

    scen, mask = _scenario(cfg, rng)
    truth = {
        "seed": seed,
        "config": cfg.to_dict(),
        "truth": cfg.truth.to_dict(),
        "base_duration_min": BASE_DURATION,
        "noise_sd_min": cfg.sigma,
        "user_effect_sd_min": 25.0,
        "date_effect_sd_min": 4.0,
        "weather_date": "night_date",
        "n_person_nights": int(len(nights)),
    }
    stations = stations.assign(date=stations["date"].dt.strftime("%Y-%m-%d"))
    grid = grid.assign(date=grid["date"].dt.strftime("%Y-%m-%d"))
    return {
        "epochs": epochs,
        "users": users.drop(columns="utc_offset_min"),
        "stations": stations,
        "grid": grid,
        "scenario_grid": scen,
        "country_mask": mask,
        "truth": truth,
    }


def write_synth(cfg: SynthConfig, seed: int, out: Path) -> dict[str, Path]:
    from .io import write_csv, write_json

    data = synthesize(cfg, seed)
    out = Path(out)
    paths = {}
    for stem, obj in data.items():
        if isinstance(obj, dict):
            paths[stem] = write_json(obj, out / f"{stem}.json")
        else:
            paths[stem] = write_csv(obj, out / f"{stem}.csv")
    return paths

