"""Station and grid weather linked to person-nights.

Daily station values are combined by inverse great-circle distance within a
search radius; wind, cloud and humidity come from the nearest grid cell.
Climate normals are 1981-2010 means over a +/-7 day calendar window on a
365-day calendar (Feb 29 folds onto Feb 28).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
MIN_DIST_KM = 1.0
NORMAL_YEARS = (1981, 2010)
NORMAL_WINDOW_DAYS = 7
DAYS_PER_YEAR = 365

STATION_VARS = {"tmin": "tmin_c", "tmax": "tmax_c", "prcp": "prcp_cm"}
GRID_VARS = {"tmin": "tmin_c", "wind": "wind_ms", "cloud": "cloud_pct", "rh": "rh_pct"}
CONTROL_VARS = ("prcp", "dtr", "cloud", "rh", "wind")
EXPOSURE_COLUMNS = [
    "user_id", "night_date", "tmin", "tmax", "dtr", "prcp", "wind", "cloud", "rh",
    "tmin_normal", "dtr_normal", "prcp_normal", "wind_normal", "cloud_normal", "rh_normal",
    "tmin_anomaly", "heat_index", "complete",
]


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance on a sphere of radius 6371 km."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def _unit_vectors(lat, lon) -> np.ndarray:
    la, lo = np.radians(np.asarray(lat, float)), np.radians(np.asarray(lon, float))
    return np.column_stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)])


def inverse_distance_weights(dist_km) -> np.ndarray:
    return 1.0 / np.maximum(np.asarray(dist_km, float), MIN_DIST_KM)


class StationIndex:
    """Read-only spatial index over station coordinates."""

    def __init__(self, station_ids, lat, lon):
        self.station_ids = np.asarray(station_ids)
        self.lat = np.asarray(lat, float)
        self.lon = np.asarray(lon, float)
        if np.any(np.abs(self.lat) > 90) or np.any(np.abs(self.lon) > 180):
            raise ValueError("station coordinates out of range")
        self._tree = cKDTree(_unit_vectors(self.lat, self.lon))

    @classmethod
    def from_frame(cls, stations: pd.DataFrame) -> "StationIndex":
        meta = stations.drop_duplicates("station_id").sort_values("station_id", kind="stable")
        return cls(meta["station_id"].to_numpy(), meta["lat"].to_numpy(), meta["lon"].to_numpy())

    def within(self, lat: float, lon: float, radius_km: float) -> tuple[np.ndarray, np.ndarray]:
        """Positions and distances (km) of stations within ``radius_km``, sorted by position."""
        if radius_km <= 0:
            raise ValueError("radius_km must be positive")
        # chord length for the arc, padded; exact cut applied with haversine
        chord = 2 * np.sin(min(radius_km / EARTH_RADIUS_KM, np.pi) / 2) * (1 + 1e-9)
        cand = np.array(sorted(self._tree.query_ball_point(_unit_vectors(lat, lon)[0], chord)), dtype=int)
        if cand.size == 0:
            return cand, np.empty(0)
        d = haversine_km(lat, lon, self.lat[cand], self.lon[cand])
        keep = d <= radius_km
        return cand[keep], d[keep]


def match_stations(point, stations: pd.DataFrame, date, variable: str, radius_km: float = 100.0) -> float:
    """Inverse-distance weighted station value for one point and date.

    ``stations`` has columns station_id, lat, lon, date and ``variable``.
    Stations with a missing value that day are skipped. Returns NaN when no
    station within the radius reports.
    """
    if radius_km <= 0:
        raise ValueError("radius_km must be positive")
    day = stations[pd.to_datetime(stations["date"]) == pd.Timestamp(date)]
    day = day[day[variable].notna()]
    if day.empty:
        return float("nan")
    d = haversine_km(point[0], point[1], day["lat"].to_numpy(float), day["lon"].to_numpy(float))
    ok = d <= radius_km
    if not ok.any():
        return float("nan")
    w = inverse_distance_weights(d[ok])
    v = day[variable].to_numpy(float)[ok]
    return float(np.sum(w * v) / np.sum(w))


def noleap_doy(dates) -> np.ndarray:
    """Day of year on a 365-day calendar; Feb 29 maps to Feb 28 (59)."""
    d = pd.DatetimeIndex(pd.to_datetime(dates))
    doy = d.dayofyear.to_numpy().copy()
    leap = d.is_leap_year
    late = leap & (doy >= 60)
    doy[late] -= 1
    return doy


def window_mask(doy: np.ndarray, calendar_day: int, half_width: int = NORMAL_WINDOW_DAYS) -> np.ndarray:
    diff = np.abs(np.asarray(doy) - calendar_day)
    return np.minimum(diff, DAYS_PER_YEAR - diff) <= half_width


def _window_means(doy: np.ndarray, values: np.ndarray, half_width: int) -> np.ndarray:
    """Mean of all finite values whose day falls in each day's circular window."""
    ok = np.isfinite(values)
    sums = np.bincount(doy[ok] - 1, weights=values[ok], minlength=DAYS_PER_YEAR)
    counts = np.bincount(doy[ok] - 1, minlength=DAYS_PER_YEAR).astype(float)
    k = np.ones(2 * half_width + 1)
    pad = lambda a: np.concatenate([a[-half_width:], a, a[:half_width]])  # noqa: E731
    s = np.convolve(pad(sums), k, mode="valid")
    c = np.convolve(pad(counts), k, mode="valid")
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(c > 0, s / c, np.nan)


def _weighted_daily(frame: pd.DataFrame, positions: np.ndarray, weights: np.ndarray, variable: str) -> pd.Series:
    """Weighted average per date over the given station positions."""
    if positions.size == 0:
        return pd.Series(dtype=float)
    sub = frame[frame["_pos"].isin(positions)]
    wmap = pd.Series(weights, index=positions)
    vals = sub[variable].to_numpy(float)
    w = wmap.reindex(sub["_pos"].to_numpy()).to_numpy()
    ok = np.isfinite(vals)
    tab = pd.DataFrame({"date": sub["date"].to_numpy()[ok], "wv": (w * vals)[ok], "w": w[ok]})
    g = tab.groupby("date", sort=True)[["wv", "w"]].sum()
    return g["wv"] / g["w"]


def climate_normal(point, calendar_day: int, archive: pd.DataFrame, variable: str,
                   radius_km: float = 100.0, half_width: int = NORMAL_WINDOW_DAYS,
                   years: tuple[int, int] = NORMAL_YEARS) -> float:
    """Historical mean of the station-weighted daily value around a calendar day.

    Parameters
    ----------
    point : (lat, lon)
    calendar_day : int
        Day 1-365 on a no-leap calendar.
    archive : DataFrame
        Station-day rows (station_id, lat, lon, date, variable).
    variable : str
        Column to average.

    Returns
    -------
    float
        Mean over every (year, day) in ``years`` within ``half_width`` days of
        ``calendar_day`` of that day's weighted value; NaN if none exist.
    """
    linker = StationLinker(archive, radius_km)
    series = linker.daily(point, variable, years)
    if series.empty:
        return float("nan")
    doy = noleap_doy(series.index)
    sel = window_mask(doy, calendar_day, half_width) & np.isfinite(series.to_numpy())
    return float(series.to_numpy()[sel].mean()) if sel.any() else float("nan")


class StationLinker:
    """Station archive plus spatial index for repeated point lookups."""

    def __init__(self, stations: pd.DataFrame, radius_km: float = 100.0):
        if radius_km <= 0:
            raise ValueError("radius_km must be positive")
        self.radius_km = radius_km
        self.index = StationIndex.from_frame(stations)
        pos = pd.Series(np.arange(len(self.index.station_ids)), index=self.index.station_ids)
        frame = stations.copy()
        frame["date"] = pd.to_datetime(frame["date"])
        frame["_pos"] = pos.reindex(frame["station_id"].to_numpy()).to_numpy()
        self.frame = frame
        self._neighbours: dict = {}

    def neighbours(self, point) -> tuple[np.ndarray, np.ndarray]:
        key = (float(point[0]), float(point[1]))
        if key not in self._neighbours:
            p, d = self.index.within(key[0], key[1], self.radius_km)
            self._neighbours[key] = (p, inverse_distance_weights(d))
        return self._neighbours[key]

    def daily(self, point, variable: str, years: tuple[int, int] | None = None) -> pd.Series:
        pos, w = self.neighbours(point)
        frame = self.frame
        if years is not None:
            yr = frame["date"].dt.year
            frame = frame[(yr >= years[0]) & (yr <= years[1])]
        return _weighted_daily(frame, pos, w, variable)


class GridLinker:
    """Nearest-cell lookup on a regular lat/lon grid."""

    def __init__(self, grid: pd.DataFrame):
        grid = grid.copy()
        grid["date"] = pd.to_datetime(grid["date"])
        for axis in ("lat", "lon"):
            vals = np.unique(grid[axis].to_numpy(float))
            if vals.size > 2:
                step = np.diff(vals)
                if not np.allclose(step, step[0], rtol=1e-6, atol=1e-9):
                    raise ValueError(f"grid {axis} spacing is not uniform")
        cells = grid[["lat", "lon"]].drop_duplicates().sort_values(["lat", "lon"]).to_numpy(float)
        self.cells = cells
        self._tree = cKDTree(_unit_vectors(cells[:, 0], cells[:, 1]))
        self.grid = grid.set_index(["lat", "lon"]).sort_index()

    def has(self, variable: str) -> bool:
        return variable in self.grid.columns and self.grid[variable].notna().any()

    def nearest_cell(self, point) -> tuple[float, float]:
        _, i = self._tree.query(_unit_vectors(point[0], point[1])[0])
        return float(self.cells[i, 0]), float(self.cells[i, 1])

    def daily(self, point, variable: str, years: tuple[int, int] | None = None) -> pd.Series:
        if variable not in self.grid.columns:
            return pd.Series(dtype=float)
        cell = self.grid.loc[self.nearest_cell(point)]
        s = pd.Series(cell[variable].to_numpy(float), index=cell["date"].to_numpy()).sort_index()
        s = s[~s.index.duplicated()]
        if years is not None:
            yr = s.index.year
            s = s[(yr >= years[0]) & (yr <= years[1])]
        return s


# NWS heat index, computed in degrees F
def heat_index(temp_c, rh_percent):
    """National Weather Service heat index in degrees C.

    The simple formula is used unless its average with the air temperature
    reaches 80 F, in which case the Rothfusz regression applies with the
    low-humidity (RH < 13 %, 80-112 F) and high-humidity (RH > 85 %,
    80-87 F) adjustments.
    """
    t = np.asarray(temp_c, float) * 9 / 5 + 32
    rh = np.asarray(rh_percent, float)
    if np.any((rh < 0) | (rh > 100)):
        raise ValueError("relative humidity must be within [0, 100]")
    simple = 0.5 * (t + 61.0 + (t - 68.0) * 1.2 + rh * 0.094)
    full = (
        -42.379 + 2.04901523 * t + 10.14333127 * rh - 0.22475541 * t * rh
        - 0.00683783 * t * t - 0.05481717 * rh * rh + 0.00122874 * t * t * rh
        + 0.00085282 * t * rh * rh - 0.00000199 * t * t * rh * rh
    )
    dry = (rh < 13) & (t >= 80) & (t <= 112)
    with np.errstate(invalid="ignore"):
        full = np.where(dry, full - ((13 - rh) / 4) * np.sqrt(np.clip((17 - np.abs(t - 95)) / 17, 0, None)), full)
    humid = (rh > 85) & (t >= 80) & (t <= 87)
    full = np.where(humid, full + ((rh - 85) / 10) * ((87 - t) / 5), full)
    hi_f = np.where((simple + t) / 2 >= 80, full, simple)
    out = (hi_f - 32) * 5 / 9
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LinkConfig:
    source: str = "station"  # or "grid"
    radius_km: float = 100.0
    normal_window_days: int = NORMAL_WINDOW_DAYS
    normal_years: tuple[int, int] = NORMAL_YEARS

    def __post_init__(self):
        if self.source not in ("station", "grid"):
            raise ValueError("source must be 'station' or 'grid'")


# dyadic step: sums and differences of stored temperatures are exact
TEMP_QUANTUM = 2.0 ** -16


def quantize(x):
    return np.round(np.asarray(x, float) / TEMP_QUANTUM) * TEMP_QUANTUM


def _location_exposure(point, dates: pd.DatetimeIndex, stations: StationLinker, grid: GridLinker,
                       cfg: LinkConfig) -> pd.DataFrame:
    def source(var):
        if var in STATION_VARS:
            col = STATION_VARS[var]
            if cfg.source == "grid" and grid.has(col):
                return grid, col
            return stations, col
        return grid, GRID_VARS[var]

    lo, hi = cfg.normal_years
    out = pd.DataFrame(index=dates)
    hist = {}
    for var in ("tmin", "tmax", "prcp", "wind", "cloud", "rh"):
        src, col = source(var)
        s = src.daily(point, col)
        out[var] = s.reindex(dates).to_numpy(float) if not s.empty else np.nan
        hist[var] = s[(s.index.year >= lo) & (s.index.year <= hi)] if not s.empty else s
    for var in ("tmin", "tmax"):
        out[var] = quantize(out[var])
    out["dtr"] = out["tmax"] - out["tmin"]
    both = pd.concat([hist["tmax"], hist["tmin"]], axis=1, keys=["tmax", "tmin"]).dropna()
    hist["dtr"] = both["tmax"] - both["tmin"]
    doy = noleap_doy(dates)
    for var in ("tmin", "dtr", "prcp", "wind", "cloud", "rh"):
        h = hist[var]
        if h.empty:
            out[f"{var}_normal"] = np.nan
            continue
        means = _window_means(noleap_doy(h.index), h.to_numpy(float), cfg.normal_window_days)
        out[f"{var}_normal"] = means[doy - 1]
    out["tmin_normal"] = quantize(out["tmin_normal"])
    return out


def assemble_exposures(records: pd.DataFrame, users: pd.DataFrame, stations: pd.DataFrame,
                       grid: pd.DataFrame, config: LinkConfig = LinkConfig()) -> pd.DataFrame:
    """Weather exposure for every person-night.

    ``records`` needs user_id and night_date; ``users`` gives each user's
    lat/lon. The exposure date is the night date (the evening's date).
    Rows with any missing core field are kept with ``complete = False``.
    """
    st = StationLinker(stations, config.radius_km)
    gr = GridLinker(grid)
    loc = users.drop_duplicates("user_id").set_index("user_id")[["lat", "lon"]]
    recs = records[["user_id", "night_date"]].copy()
    recs["night_date"] = pd.to_datetime(recs["night_date"])
    missing_users = sorted(set(recs["user_id"]) - set(loc.index))
    if missing_users:
        raise ValueError(f"users without a location: {missing_users[:5]}")
    recs["lat"] = loc["lat"].reindex(recs["user_id"]).to_numpy()
    recs["lon"] = loc["lon"].reindex(recs["user_id"]).to_numpy()
    parts = []
    for (lat, lon), grp in recs.groupby(["lat", "lon"], sort=True):
        dates = pd.DatetimeIndex(np.unique(grp["night_date"].to_numpy()))
        exp = _location_exposure((lat, lon), dates, st, gr, config)
        parts.append(grp.join(exp, on="night_date"))
    out = pd.concat(parts).loc[recs.index]
    out["tmin_anomaly"] = out["tmin"] - out["tmin_normal"]
    ok = (out["tmin"].notna() & out["rh"].notna()).to_numpy()
    hi = np.full(len(out), np.nan)
    hi[ok] = heat_index(out["tmin"].to_numpy()[ok], out["rh"].to_numpy()[ok])
    out["heat_index"] = hi
    core = ["tmin", "dtr", "prcp", "wind", "cloud", "rh",
            "tmin_normal", "dtr_normal", "prcp_normal", "wind_normal", "cloud_normal", "rh_normal"]
    out["complete"] = out[core].notna().all(axis=1)
    n_bad = int((~out["complete"]).sum())
    if n_bad:
        logger.info("%d person-nights lack a core weather field", n_bad)
    return out[EXPOSURE_COLUMNS].reset_index(drop=True)


def _check_rows(path, bad: pd.Series, message: str):
    from .io import SchemaError

    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise SchemaError(f"{path}:{i + 2}: {message}")


def read_stations(path) -> pd.DataFrame:
    from .io import read_table

    df = read_table(path, {"station_id": str, "lat": float, "lon": float, "date": "date",
                           "tmin_c": float, "tmax_c": float, "prcp_cm": float})
    _check_rows(path, df["lat"].abs().gt(90) | df["lon"].abs().gt(180), "coordinates out of range")
    _check_rows(path, df["tmin_c"] > df["tmax_c"], "tmin_c exceeds tmax_c")
    return df


GHCND_ELEMENTS = {"TMIN": "tmin_c", "TMAX": "tmax_c", "PRCP": "prcp_cm"}
GHCND_SCALE = {"TMIN": 0.1, "TMAX": 0.1, "PRCP": 0.01}  # tenths of C; tenths of mm to cm


def ghcnd_to_stations(daily: pd.DataFrame, inventory: pd.DataFrame) -> pd.DataFrame:
    """Convert parsed GHCN-Daily records to the ``stations.csv`` layout.

    Reading the fixed-width ``.dly`` files is left to external tools; this
    takes their long form and does the unit conversion at ingestion.

    Parameters
    ----------
    daily : DataFrame
        Columns ``ID, DATE, ELEMENT, VALUE, QFLAG``. VALUE is in GHCN units
        (tenths of C, tenths of mm); -9999 marks missing values.
    inventory : DataFrame
        Columns ``ID, LATITUDE, LONGITUDE``.

    Returns
    -------
    DataFrame
        station_id, lat, lon, date, tmin_c, tmax_c, prcp_cm. Values with a
        non-blank quality flag are dropped, and so are station-days lacking
        any of the three elements (no imputation).
    """
    d = daily[daily["ELEMENT"].isin(list(GHCND_ELEMENTS)) & (daily["VALUE"] != -9999)]
    d = d[d["QFLAG"].fillna("").astype(str).str.strip() == ""]
    d = d.assign(VALUE=d["VALUE"].astype(float) * d["ELEMENT"].map(GHCND_SCALE))
    wide = d.pivot_table(index=["ID", "DATE"], columns="ELEMENT", values="VALUE", aggfunc="first")
    wide = wide.reindex(columns=list(GHCND_ELEMENTS)).dropna().rename(columns=GHCND_ELEMENTS).reset_index()
    loc = inventory.drop_duplicates("ID").set_index("ID")
    wide = wide[wide["ID"].isin(loc.index)]
    out = pd.DataFrame({
        "station_id": wide["ID"].astype(str),
        "lat": loc["LATITUDE"].reindex(wide["ID"]).to_numpy(float),
        "lon": loc["LONGITUDE"].reindex(wide["ID"]).to_numpy(float),
        "date": pd.to_datetime(wide["DATE"]).dt.normalize(),
        "tmin_c": wide["tmin_c"].round(1),
        "tmax_c": wide["tmax_c"].round(1),
        "prcp_cm": wide["prcp_cm"].round(2),
    })
    return out.sort_values(["station_id", "date"], kind="mergesort").reset_index(drop=True)


def read_grid(path) -> pd.DataFrame:
    from .io import read_table

    df = read_table(path, {"lat": float, "lon": float, "date": "date", "tmin_c": float},
                    optional={"wind_ms": float, "cloud_pct": float, "rh_pct": float,
                              "tmax_c": float, "prcp_cm": float})
    _check_rows(path, df["lat"].abs().gt(90) | df["lon"].abs().gt(180), "coordinates out of range")
    for c in ("cloud_pct", "rh_pct"):
        if c in df:
            _check_rows(path, (df[c] < 0) | (df[c] > 100), f"{c} outside [0, 100]")
    return df
