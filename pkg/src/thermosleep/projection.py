"""Linear-spline dose response and annual sleep-loss projections.

A fitted :class:`SplineModel` maps nightly minimum temperature to a change
in sleep minutes. Applied day by day to a scenario year and its baseline on
the same grid cell, the summed difference gives hours of sleep lost per
person per year (positive = lost).
"""
from __future__ import annotations

import calendar
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .models import SPLINE_KNOTS, spline_basis
from .panel import FitResult

logger = logging.getLogger(__name__)

DAYS = 365
BASE_YEAR = 2010
NIGHT_HOURS = 7.1  # median individual nightly sleep in the wearable sample
SPLINE_TERMS = ("tmin_spline0", "tmin_spline1", "tmin_spline2")
SCENARIO_SCHEMA = {"model": str, "year": int, "lat": float, "lon": float, "doy": int, "tmin_c": float}


@dataclass(frozen=True)
class SplineModel:
    """Continuous piecewise-linear response with knots at -20 and 10 C.

    ``coef`` holds the truncated-power coefficients ``(b0, b1, b2)``; the
    segment slopes are ``b0``, ``b0 + b1`` and ``b0 + b1 + b2``. The
    intercept is absorbed by the fixed effects and only enters level
    predictions.
    """

    coef: tuple[float, float, float]
    intercept: float = 0.0
    knots: tuple[float, float] = SPLINE_KNOTS
    vcov: tuple | None = None

    @classmethod
    def from_slopes(cls, below: float, middle: float, above: float, intercept: float = 0.0) -> "SplineModel":
        return cls((below, middle - below, above - middle), intercept)

    @property
    def slopes(self) -> tuple[float, float, float]:
        b0, b1, b2 = self.coef
        return (b0, b0 + b1, b0 + b1 + b2)

    def slope_se(self) -> np.ndarray:
        """Standard errors of the three segment slopes (needs ``vcov``)."""
        if self.vcov is None:
            raise ValueError("model has no covariance")
        L = np.tril(np.ones((3, 3)))
        V = np.asarray(self.vcov, float)
        return np.sqrt(np.clip(np.diag(L @ V @ L.T), 0, None))

    def predict(self, t):
        t = np.asarray(t, float)
        if self.knots != SPLINE_KNOTS:
            k1, k2 = self.knots
            B = np.stack([t, np.maximum(0.0, t - k1), np.maximum(0.0, t - k2)], axis=-1)
        else:
            B = spline_basis(t)
        out = self.intercept + B @ np.asarray(self.coef, float)
        return float(out) if out.ndim == 0 else out


def fit_spline(fit_result: FitResult) -> SplineModel:
    """Spline model from a fit whose terms include the three basis columns.

    A hinge term absent from the fit (no observations beyond that knot, so
    the design omitted it or the fit dropped it as collinear) gets
    coefficient 0, and the neighbouring segment's slope is extrapolated
    across the knot. The linear term itself is required.
    """
    if SPLINE_TERMS[0] not in fit_result.names:
        raise KeyError(f"fit lacks the linear spline term {SPLINE_TERMS[0]!r}")
    missing = [n for n in SPLINE_TERMS if n not in fit_result.names]
    if missing:
        logger.warning("spline term(s) %s unidentified; slope carried across the knot", missing)
    coef = np.zeros(3)
    V = np.zeros((3, 3))
    have = [j for j, n in enumerate(SPLINE_TERMS) if n in fit_result.names]
    pos = [fit_result.names.index(SPLINE_TERMS[j]) for j in have]
    coef[have] = fit_result.beta[pos]
    V[np.ix_(have, have)] = fit_result.vcov[np.ix_(pos, pos)]
    return SplineModel(tuple(float(b) for b in coef), 0.0, SPLINE_KNOTS, tuple(map(tuple, V.tolist())))


def predict_delta(model: SplineModel, t_future, t_base):
    """Change in predicted sleep minutes, ``f(t_future) - f(t_base)``."""
    tf = np.asarray(t_future, float)
    tb = np.asarray(t_base, float)
    B = spline_basis(tf) - spline_basis(tb) if model.knots == SPLINE_KNOTS else None
    if B is None:
        return model.predict(tf) - model.predict(tb)
    out = B @ np.asarray(model.coef, float)
    return float(out) if out.ndim == 0 else out


def _check_days(doy: np.ndarray, label: str) -> None:
    present = np.zeros(DAYS + 1, bool)
    present[doy] = True
    gaps = np.flatnonzero(~present[1:]) + 1
    if gaps.size:
        raise ValueError(f"{label}: missing day(s) of year {gaps[:20].tolist()}"
                         + (" ..." if gaps.size > 20 else ""))


def annual_loss(t_future, t_base, model: SplineModel) -> float:
    """Hours of sleep lost over a year, summed day by day.

    Parameters
    ----------
    t_future, t_base : Series or array
        Daily minimum temperature on a 365-day calendar. A Series is indexed
        by day of year 1..365; a plain array must have exactly 365 entries.
    model : SplineModel

    Returns
    -------
    float
        ``-sum(predict_delta) / 60``; positive when sleep is lost.
    """
    f = _daily(t_future, "scenario")
    b = _daily(t_base, "baseline")
    return float(-np.sum(predict_delta(model, f, b)) / 60.0) + 0.0  # no negative zero


def _daily(t, label: str) -> np.ndarray:
    if isinstance(t, pd.Series):
        doy = t.index.to_numpy(int)
        if doy.min() < 1 or doy.max() > DAYS:
            raise ValueError(f"{label}: day of year outside 1..{DAYS}")
        _check_days(doy, label)
        if t.index.has_duplicates:
            raise ValueError(f"{label}: duplicated day of year")
        return t.sort_index().to_numpy(float)
    a = np.asarray(t, float)
    if a.shape != (DAYS,):
        raise ValueError(f"{label}: expected {DAYS} daily values, got {a.shape}")
    return a


def noleap_days(doy, year) -> np.ndarray:
    """Map day of year onto the 365-day calendar; Feb 29 becomes 0 (dropped)."""
    doy = np.asarray(doy, int)
    leap = np.vectorize(calendar.isleap)(np.asarray(year, int)) if np.size(year) else np.zeros(0, bool)
    leap = np.broadcast_to(leap, doy.shape)
    out = np.where(leap & (doy > 60), doy - 1, doy)
    return np.where(leap & (doy == 60), 0, out)


def read_scenario(path) -> pd.DataFrame:
    """Read ``scenario_grid.csv`` and fold leap years onto 365 days."""
    from .io import SchemaError, read_table

    df = read_table(path, SCENARIO_SCHEMA)
    if df.empty:
        raise SchemaError(f"{path}: no rows")
    bad = (df["lat"].abs() > 90) | (df["lon"].abs() > 180) | ~np.isfinite(df["tmin_c"])
    limit = np.where(df["year"].map(calendar.isleap), 366, 365)
    bad |= (df["doy"] < 1) | (df["doy"] > limit)
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise SchemaError(f"{path}:{i + 2}: coordinates, doy or tmin_c out of range")
    return df


def project_grid(scenario: pd.DataFrame, model: SplineModel, base_year: int = BASE_YEAR) -> pd.DataFrame:
    """Per-cell annual loss for every model and year in ``scenario``.

    Each scenario year is paired with ``base_year`` from the same climate
    model, day of year against day of year. Returns columns lat, lon, model,
    year, loss_hours sorted by model, year, lat, lon.
    """
    df = scenario.copy()
    df["doy"] = noleap_days(df["doy"].to_numpy(), df["year"].to_numpy())
    df = df[df["doy"] > 0]
    key = ["model", "year", "lat", "lon"]
    dup = df.duplicated(key + ["doy"])
    if dup.any():
        raise ValueError(f"duplicated cell-days, first at row {int(np.flatnonzero(dup.to_numpy())[0])}")
    wide = df.pivot_table(index=key, columns="doy", values="tmin_c", aggfunc="first")
    wide = wide.reindex(columns=range(1, DAYS + 1))
    gaps = wide.isna()
    if gaps.to_numpy().any():
        r = int(np.flatnonzero(gaps.any(axis=1).to_numpy())[0])
        days = np.flatnonzero(gaps.iloc[r].to_numpy()) + 1
        raise ValueError(f"cell {wide.index[r]} missing day(s) of year {days[:20].tolist()}")
    idx = wide.index.to_frame(index=False)
    base_rows = idx["year"].to_numpy() == base_year
    if not base_rows.any():
        raise ValueError(f"scenario has no baseline year {base_year}")
    base = wide[base_rows].droplevel("year")
    out = []
    values = wide.to_numpy()
    pred = spline_basis(values) @ np.asarray(model.coef, float)
    base_pred = pd.DataFrame(spline_basis(base.to_numpy()) @ np.asarray(model.coef, float), index=base.index)
    cells = pd.MultiIndex.from_frame(idx[["model", "lat", "lon"]])
    missing = ~cells.isin(base_pred.index)
    if missing.any():
        raise ValueError(f"cells without baseline year: {list(cells[missing])[:5]}")
    bp = base_pred.loc[cells].to_numpy()
    # Summing the per-day differences in fixed order keeps results exact for the
    # baseline year (identically zero) and independent of row order.
    loss = -np.sum(pred - bp, axis=1) / 60.0 + 0.0  # + 0.0 turns -0.0 into 0.0
    out = idx.assign(loss_hours=loss)[["lat", "lon", "model", "year", "loss_hours"]]
    return out.sort_values(["model", "year", "lat", "lon"], kind="mergesort").reset_index(drop=True)


def equal_area_average(lat, values) -> float:
    """Cosine-latitude weighted mean, ``sum(cos(lat) v) / sum(cos(lat))``."""
    lat = np.asarray(lat, float)
    v = np.asarray(values, float)
    if lat.size == 0:
        raise ValueError("equal_area_average needs at least one cell")
    if lat.shape != v.shape:
        raise ValueError("lat and values differ in shape")
    w = np.cos(np.deg2rad(lat))
    # cos(90 deg) is 6e-17, not 0; treat the poles as zero-area cells.
    w[np.abs(lat) == 90] = 0.0
    # Weights like cos(60 deg) = 0.5000000000000001 carry rounding; rounding them
    # to 15 significant digits makes textbook cases exact without biasing others.
    w = np.round(w, 15)
    if w.sum() <= 0:
        raise ValueError("cells have zero total area")
    # averaging deviations from one cell's value returns a constant field exactly
    v0 = v[0]
    return float(v0 + np.dot(w, v - v0) / w.sum())


def _grid_key(df: pd.DataFrame) -> pd.DataFrame:
    return df[["lat", "lon"]].drop_duplicates().sort_values(["lat", "lon"]).reset_index(drop=True)


def ensemble_aggregate(projection: pd.DataFrame, night_hours: float = NIGHT_HOURS):
    """Cell-wise ensemble statistics and per-model equal-area global means.

    Returns
    -------
    ensemble : DataFrame
        lat, lon, year, loss_hours (mean over models), loss_min, loss_max,
        n_models, nights_lost (= loss_hours / night_hours)
    globals_ : DataFrame
        model, year, loss_hours (equal-area mean over cells); the rows with
        model ``"ensemble"`` hold the mean over models.
    """
    if night_hours <= 0:
        raise ValueError("night_hours must be positive")
    groups = list(projection.groupby(["model", "year"], sort=True))
    if not groups:
        raise ValueError("empty projection")
    ref = _grid_key(groups[0][1])
    for (m, y), g in groups:
        if len(g) != len(ref) or not _grid_key(g).equals(ref):
            raise ValueError(f"model {m!r} year {y}: grid geometry differs from {groups[0][0]}")
    p = projection.sort_values(["lat", "lon", "year", "model"], kind="mergesort")
    agg = p.groupby(["lat", "lon", "year"], sort=True)["loss_hours"].agg(
        loss_hours="mean", loss_min="min", loss_max="max", n_models="count").reset_index()
    agg["nights_lost"] = agg["loss_hours"] / night_hours
    rows = []
    for (m, y), g in groups:
        g = g.sort_values(["lat", "lon"], kind="mergesort")
        rows.append((m, y, equal_area_average(g["lat"], g["loss_hours"])))
    glob = pd.DataFrame(rows, columns=["model", "year", "loss_hours"])
    ens = glob.groupby("year", sort=True)["loss_hours"].mean().reset_index().assign(model="ensemble")
    glob = pd.concat([glob, ens[["model", "year", "loss_hours"]]], ignore_index=True)
    return agg[["lat", "lon", "year", "loss_hours", "loss_min", "loss_max", "n_models", "nights_lost"]], glob


def read_country_mask(path) -> pd.DataFrame:
    from .io import SchemaError, read_table

    df = read_table(path, {"lat": float, "lon": float, "iso3": str})
    dup = df.duplicated(["lat", "lon"])
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise SchemaError(f"{path}:{i + 2}: cell assigned to more than one country")
    return df


def country_aggregate(projection: pd.DataFrame, mask: pd.DataFrame) -> pd.DataFrame:
    """Per-country equal-area averages per model, then the ensemble mean.

    Countries in ``mask`` without any projected cell are omitted with a
    warning. Returns iso3, year, loss_hours.
    """
    if mask.duplicated(["lat", "lon"]).any():
        raise ValueError("mask assigns a cell to more than one country")
    joined = projection.merge(mask[["lat", "lon", "iso3"]], on=["lat", "lon"], how="inner")
    empty = sorted(set(mask["iso3"]) - set(joined["iso3"]))
    if empty:
        warnings.warn(f"countries without projected cells omitted: {empty}", stacklevel=2)
    rows = []
    for (iso, y), g in joined.groupby(["iso3", "year"], sort=True):
        per_model = [equal_area_average(h["lat"], h["loss_hours"])
                     for _, h in g.sort_values(["lat", "lon"], kind="mergesort").groupby("model", sort=True)]
        rows.append((iso, y, float(np.mean(per_model))))
    return pd.DataFrame(rows, columns=["iso3", "year", "loss_hours"])


def nights_equivalent(hours: float, night_hours: float = NIGHT_HOURS) -> float:
    if night_hours <= 0 or not math.isfinite(night_hours):
        raise ValueError("night_hours must be positive")
    return hours / night_hours
