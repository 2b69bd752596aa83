"""Design matrices for the temperature-sleep specifications.

A :class:`ModelSpec` names an outcome, a temperature treatment, how the
weather controls enter, and an optional interaction. :func:`build_design`
turns a joined person-night table into a :class:`~thermosleep.panel.Panel`
with user, date and admin1-by-month (or week) fixed effects, clustered by
admin1.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import stats

from .panel import FitResult, Panel

OUTCOMES = {
    "duration": "duration_min",
    "duration_24h": "total24h_min",
    "onset": "onset_min",
    "midsleep": "midsleep_min",
    "offset": "offset_min",
    "short_sleep7": "flag_lt7",
    "short_sleep6": "flag_lt6",
    "short_sleep5": "flag_lt5",
}
TREATMENTS = (
    "tmin_linear", "tmin_binned", "tmin_binned_extended", "anomaly_linear",
    "anomaly_binned", "heat_index_binned", "tmin_spline",
)
CONTROLS = ("prcp", "dtr", "cloud", "rh", "wind")
SEASONS = ("winter", "spring", "summer", "fall")
SUMMER_MONTHS = ("first", "last")
SPLINE_KNOTS = (-20.0, 10.0)
CI_Z = 1.96


@dataclass(frozen=True)
class BinScheme:
    """Left-closed bins ``[a, b)`` with open-ended first and last bins.

    ``edges`` are the interior cut points; ``len(edges) + 1`` bins result.
    """

    variable: str
    edges: tuple[float, ...]
    reference_bin: int

    def __post_init__(self):
        e = np.asarray(self.edges, float)
        if e.size == 0 or np.any(np.diff(e) <= 0):
            raise ValueError("bin edges must be strictly ascending")
        if not 0 <= self.reference_bin <= len(self.edges):
            raise ValueError("reference_bin out of range")

    @property
    def n_bins(self) -> int:
        return len(self.edges) + 1

    def bounds(self, i: int) -> tuple[float, float]:
        lo = -math.inf if i == 0 else self.edges[i - 1]
        hi = math.inf if i == len(self.edges) else self.edges[i]
        return lo, hi

    def label(self, i: int) -> str:
        lo, hi = self.bounds(i)
        return f"{self.variable}[{_fmt(lo)},{_fmt(hi)})"

    def labels(self) -> list[str]:
        return [self.label(i) for i in range(self.n_bins)]

    def index_of(self, x: float) -> int:
        return int(bin_value(x, self))


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return f"{v:g}"


def bin_value(x, scheme: BinScheme):
    """Bin index of ``x`` (scalar or array) under ``scheme``."""
    xa = np.asarray(x, float)
    if not np.all(np.isfinite(xa)):
        raise ValueError("bin_value needs finite input")
    idx = np.searchsorted(np.asarray(scheme.edges, float), xa, side="right")
    return int(idx) if idx.ndim == 0 else idx


def _steps(lo: float, hi: float, width: float) -> tuple[float, ...]:
    n = int(round((hi - lo) / width))
    return tuple(lo + width * k for k in range(n + 1))


def default_schemes() -> dict[str, BinScheme]:
    """Bin schemes for every binned regressor.

    Temperatures and diurnal range use 5 C bins with [5, 10) as reference;
    precipitation 1 cm bins (reference holds 0 cm); wind 5 m/s (reference
    [0, 5)); cloud and humidity 20 point bins (references hold 0 % cloud and
    [60, 80) humidity); anomalies 1 C bins centred on integers with
    [-0.5, 0.5) as reference.
    """
    tmin = _steps(-10, 25, 5)
    ext = _steps(-20, 30, 5)
    anom = tuple(k + 0.5 for k in range(-6, 6))
    return {
        "tmin": BinScheme("tmin", tmin, tmin.index(5.0) + 1),
        "tmin_extended": BinScheme("tmin", ext, ext.index(5.0) + 1),
        "heat_index": BinScheme("heat_index", tmin, tmin.index(5.0) + 1),
        "tmin_anomaly": BinScheme("tmin_anomaly", anom, anom.index(-0.5) + 1),
        "dtr": BinScheme("dtr", _steps(5, 25, 5), 1),
        "prcp": BinScheme("prcp", _steps(1, 5, 1), 0),
        "wind": BinScheme("wind", _steps(5, 15, 5), 0),
        "cloud": BinScheme("cloud", _steps(20, 80, 20), 0),
        "rh": BinScheme("rh", _steps(20, 80, 20), 3),
    }


def spline_basis(t):
    """Truncated-power linear spline basis ``(t, (t+20)+, (t-10)+)``."""
    t = np.asarray(t, float)
    k1, k2 = SPLINE_KNOTS
    return np.stack([t, np.maximum(0.0, t - k1), np.maximum(0.0, t - k2)], axis=-1)


def season_of(date, latitude):
    """Meteorological season, flipped for the southern hemisphere."""
    month = pd.DatetimeIndex(pd.to_datetime(np.atleast_1d(date))).month.to_numpy()
    lat = np.broadcast_to(np.asarray(latitude, float), month.shape)
    if np.any(np.abs(lat) > 90):
        raise ValueError("latitude out of range")
    north = np.array(SEASONS)[(month % 12) // 3]
    flip = {"winter": "summer", "summer": "winter", "spring": "fall", "fall": "spring"}
    out = np.where(lat < 0, [flip[s] for s in north], north)
    return str(out[0]) if np.ndim(date) == 0 and np.ndim(latitude) == 0 else out


def summer_month_label(date, latitude):
    """'first' or 'last' month of local summer, else 'excluded'."""
    month = pd.DatetimeIndex(pd.to_datetime(np.atleast_1d(date))).month.to_numpy()
    lat = np.broadcast_to(np.asarray(latitude, float), month.shape)
    if np.any(np.abs(lat) > 90):
        raise ValueError("latitude out of range")
    south = lat < 0
    first = np.where(south, month == 12, month == 6)
    last = np.where(south, month == 2, month == 8)
    out = np.where(first, "first", np.where(last, "last", "excluded"))
    return str(out[0]) if np.ndim(date) == 0 and np.ndim(latitude) == 0 else out


@dataclass(frozen=True)
class ModelSpec:
    outcome: str = "duration"
    treatment: str = "tmin_linear"
    controls: str = "linear"
    interaction: str | None = None
    categories: tuple[str, ...] | None = None
    time_fe: str = "adm1_month"
    name: str = ""

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.treatment not in TREATMENTS:
            raise ValueError(f"unknown treatment {self.treatment!r}")
        if self.controls not in ("linear", "binned"):
            raise ValueError("controls must be 'linear' or 'binned'")
        if self.time_fe not in ("adm1_month", "adm1_week"):
            raise ValueError("time_fe must be 'adm1_month' or 'adm1_week'")
        if self.interaction and self.treatment not in ("tmin_linear", "anomaly_linear"):
            raise ValueError("interactions are defined for linear treatments only")

    @property
    def is_anomaly(self) -> bool:
        return self.treatment.startswith("anomaly")

    @property
    def treatment_variable(self) -> str:
        if self.is_anomaly:
            return "tmin_anomaly"
        if self.treatment == "heat_index_binned":
            return "heat_index"
        return "tmin"

    @property
    def scheme_name(self) -> str | None:
        return {
            "tmin_binned": "tmin",
            "tmin_binned_extended": "tmin_extended",
            "anomaly_binned": "tmin_anomaly",
            "heat_index_binned": "heat_index",
        }.get(self.treatment)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        base = PRESETS[d.pop("preset")] if "preset" in d else cls()
        if d.get("categories") is not None:
            d["categories"] = tuple(str(c) for c in d["categories"])
        return replace(base, **d)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "outcome": self.outcome, "treatment": self.treatment,
            "controls": self.controls, "interaction": self.interaction,
            "categories": list(self.categories) if self.categories else None,
            "time_fe": self.time_fe,
        }


PRESETS: dict[str, ModelSpec] = {
    "linear": ModelSpec(name="linear"),
    "binned": ModelSpec(treatment="tmin_binned", controls="binned", name="binned"),
    "binned_extended": ModelSpec(treatment="tmin_binned_extended", controls="binned", name="binned_extended"),
    "season": ModelSpec(interaction="season", categories=SEASONS, name="season"),
    "demographic": ModelSpec(interaction="age_group", name="demographic"),
    "acclimatization": ModelSpec(interaction="summer_month", categories=SUMMER_MONTHS, name="acclimatization"),
    "onset": ModelSpec(outcome="onset", treatment="tmin_binned", controls="binned", name="onset"),
    "midsleep": ModelSpec(outcome="midsleep", treatment="tmin_binned", controls="binned", name="midsleep"),
    "offset": ModelSpec(outcome="offset", treatment="tmin_binned", controls="binned", name="offset"),
    "short_sleep": ModelSpec(outcome="short_sleep7", treatment="tmin_binned", controls="binned", name="short_sleep"),
    "anomaly_linear": ModelSpec(treatment="anomaly_linear", name="anomaly_linear"),
    "anomaly_binned": ModelSpec(treatment="anomaly_binned", controls="binned", name="anomaly_binned"),
    "heat_index": ModelSpec(treatment="heat_index_binned", controls="binned", name="heat_index"),
    "spline": ModelSpec(treatment="tmin_spline", name="spline"),
    "duration_24h": ModelSpec(outcome="duration_24h", treatment="tmin_binned", controls="binned", name="duration_24h"),
}


class CategoryError(ValueError):
    def __init__(self, column: str, rows: list, labels: list):
        self.rows = rows
        super().__init__(f"unknown {column} label(s) {labels[:5]} at rows {rows[:10]}")


@dataclass
class Design:
    panel: Panel
    rows: pd.Index
    spec: ModelSpec
    bin_counts: pd.Series | None = None
    interaction_counts: pd.Series | None = None
    dropped_incomplete: int = 0
    columns: list[str] = field(default_factory=list)


def _indicators(values: np.ndarray, scheme: BinScheme, prefix_override: str | None = None):
    idx = bin_value(values, scheme)
    cols, names = [], []
    for i in range(scheme.n_bins):
        # empty bins carry no information; they are left out rather than
        # reported as collinear
        if i == scheme.reference_bin or not np.any(idx == i):
            continue
        cols.append((idx == i).astype(float))
        names.append(scheme.label(i) if prefix_override is None else prefix_override + scheme.label(i)[len(scheme.variable):])
    return cols, names, idx


def interaction_labels(spec: ModelSpec, table: pd.DataFrame) -> pd.Series:
    if spec.interaction == "season":
        return pd.Series(season_of(table["night_date"], table["lat"]), index=table.index)
    if spec.interaction == "summer_month":
        return pd.Series(summer_month_label(table["night_date"], table["lat"]), index=table.index)
    if spec.interaction not in table.columns:
        raise KeyError(f"interaction column {spec.interaction!r} not in table")
    return table[spec.interaction]


def required_columns(spec: ModelSpec) -> list[str]:
    cols = [OUTCOMES[spec.outcome], "user_id", "night_date", "adm1", spec.treatment_variable]
    cols += [c for c in CONTROLS if not (spec.treatment == "heat_index_binned" and c == "rh")]
    cols += [f"{c}_normal" for c in CONTROLS]
    if not spec.is_anomaly:
        cols.append("tmin_normal")
    return cols


def build_design(spec: ModelSpec, table: pd.DataFrame, schemes: dict[str, BinScheme] | None = None) -> Design:
    """Assemble outcome, regressors, fixed effects and clusters for ``spec``.

    Rows missing any required field (or, for interacted specs, the category)
    are dropped and counted. Column order is fixed by ``spec``, so repeated
    builds are identical.
    """
    schemes = schemes or default_schemes()
    need = required_columns(spec)
    missing_cols = [c for c in need if c not in table.columns]
    if missing_cols:
        raise KeyError(f"table lacks column(s): {missing_cols}")
    ok = table[need].notna().all(axis=1)
    if "complete" in table.columns:
        ok &= table["complete"].astype(bool)
    labels = None
    if spec.interaction:
        labels = interaction_labels(spec, table)
        ok &= labels.notna()
        if spec.interaction == "summer_month":
            ok &= labels != "excluded"
    dropped = int((~ok).sum())
    t = table[ok]
    if labels is not None:
        labels = labels[ok].astype(str)
        cats = list(spec.categories) if spec.categories else sorted(labels.unique())
        unknown = ~labels.isin(cats)
        if unknown.any():
            raise CategoryError(spec.interaction, t.index[unknown].tolist(), sorted(labels[unknown].unique()))

    cols: list[np.ndarray] = []
    names: list[str] = []
    bin_counts = None
    inter_counts = None
    tv = t[spec.treatment_variable].to_numpy(float)
    if spec.treatment in ("tmin_linear", "anomaly_linear"):
        if labels is None:
            cols.append(tv)
            names.append(spec.treatment_variable)
        else:
            lab = labels.to_numpy()
            for c in cats:
                if not np.any(lab == c):
                    continue  # no rows in this category
                cols.append(tv * (lab == c))
                names.append(f"{spec.treatment_variable}:{c}")
            inter_counts = labels.value_counts().reindex(cats, fill_value=0)
    elif spec.treatment == "tmin_spline":
        B = spline_basis(tv)
        # A hinge with no nights beyond its knot is either all zero or equal
        # to t plus a constant; leave it out so the linear term is kept.
        support = (True, bool(np.any(tv < SPLINE_KNOTS[0])), bool(np.any(tv > SPLINE_KNOTS[1])))
        for j in range(3):
            if support[j]:
                cols.append(B[:, j])
                names.append(f"tmin_spline{j}")
    else:
        scheme = schemes[spec.scheme_name]
        c_, n_, idx = _indicators(tv, scheme)
        cols += c_
        names += n_
        bin_counts = pd.Series(np.bincount(idx, minlength=scheme.n_bins), index=scheme.labels())

    if not spec.is_anomaly:
        cols.append(t["tmin_normal"].to_numpy(float))
        names.append("tmin_normal")
    for c in CONTROLS:
        if spec.treatment == "heat_index_binned" and c == "rh":
            continue
        v = t[c].to_numpy(float)
        if spec.controls == "binned":
            c_, n_, _ = _indicators(v, schemes[c])
            cols += c_
            names += n_
        else:
            cols.append(v)
            names.append(c)
    for c in CONTROLS:
        cols.append(t[f"{c}_normal"].to_numpy(float))
        names.append(f"{c}_normal")

    nights = pd.to_datetime(t["night_date"])
    if spec.time_fe == "adm1_month":
        period = (nights.dt.year * 100 + nights.dt.month).to_numpy()
    else:
        iso = nights.dt.isocalendar()
        period = (iso["year"].astype(np.int64) * 100 + iso["week"].astype(np.int64)).to_numpy()
    adm1 = t["adm1"].astype(str).to_numpy()
    adm1_code = pd.factorize(adm1, sort=True)[0].astype(np.int64)
    fe = np.empty((len(t), 3), dtype=object)
    fe[:, 0] = t["user_id"].astype(str).to_numpy()
    fe[:, 1] = nights.to_numpy("datetime64[D]").astype(np.int64)
    fe[:, 2] = adm1_code * 1_000_000 + period
    X = np.column_stack(cols) if cols else np.zeros((len(t), 0))
    outcome = OUTCOMES[spec.outcome]
    panel = Panel(t[outcome].to_numpy(float), X, tuple(names), fe, adm1,
                  ("user", "date", spec.time_fe), outcome)
    return Design(panel, t.index, spec, bin_counts, inter_counts, dropped, names)


def estimate(spec: ModelSpec, table: pd.DataFrame, **fit_kw) -> tuple[FitResult, Design]:
    from .panel import fit

    design = build_design(spec, table)
    return fit(design.panel, **fit_kw), design


@dataclass
class ResponseCurve:
    scheme: BinScheme
    frame: pd.DataFrame
    units: str = "minutes"

    def coef(self, bin_index: int) -> float:
        return float(self.frame["coef"].iloc[bin_index])

    def to_csv_frame(self) -> pd.DataFrame:
        return self.frame[["bin_lo", "bin_hi", "coef", "ci_lo", "ci_hi", "n_obs"]]


def response_curve(fit_result: FitResult, scheme: BinScheme, counts: pd.Series | None = None,
                   units: str = "minutes", z: float = CI_Z) -> ResponseCurve:
    """Per-bin coefficients with ``coef +/- z * SE`` confidence intervals.

    The reference bin is pinned at 0 with a zero-width interval. Bins absent
    from the fit (empty or collinear) get NaN.
    """
    rows = []
    for i in range(scheme.n_bins):
        lo, hi = scheme.bounds(i)
        name = scheme.label(i)
        if i == scheme.reference_bin:
            b, s = 0.0, 0.0
        elif name in fit_result.names:
            b, s = fit_result.coef(name), fit_result.stderr(name)
        else:
            b, s = math.nan, math.nan
        n = int(counts.iloc[i]) if counts is not None else 0
        rows.append((lo, hi, b, s, b - z * s, b + z * s, n, i == scheme.reference_bin))
    frame = pd.DataFrame(rows, columns=["bin_lo", "bin_hi", "coef", "se", "ci_lo", "ci_hi", "n_obs", "reference"])
    return ResponseCurve(scheme, frame, units)


def read_curve(path) -> pd.DataFrame:
    from .io import SchemaError, read_table

    df = read_table(path, {"bin_lo": float, "bin_hi": float, "coef": float,
                           "ci_lo": float, "ci_hi": float, "n_obs": int})
    if df.empty:
        raise SchemaError(f"{path}: no rows")
    return df


def marginal_effects(fit_result: FitResult, prefix: str, categories=None):
    """Category slopes and pairwise difference tests from an interacted fit.

    Parameters
    ----------
    fit_result : FitResult
        Fit whose terms include ``f"{prefix}:{category}"``.
    prefix : str
        Treatment variable name, e.g. ``"tmin"``.
    categories : sequence, optional
        Defaults to every category found in the fit, in term order.

    Returns
    -------
    slopes : DataFrame
        category, slope, se, z, p, ci_lo, ci_hi
    pairs : DataFrame
        a, b, diff (a - b), se, z, p (two-sided Wald z-test)
    """
    terms = [n for n in fit_result.names if n.startswith(prefix + ":")]
    found = [n.split(":", 1)[1] for n in terms]
    if categories is None:
        categories = found
    missing = [c for c in categories if c not in found]
    if missing:
        raise KeyError(f"categories absent from fit: {missing}")
    pos = [fit_result.names.index(f"{prefix}:{c}") for c in categories]
    b = fit_result.beta[pos]
    V = fit_result.vcov[np.ix_(pos, pos)]
    se = np.sqrt(np.clip(np.diag(V), 0, None))
    z = np.divide(b, se, out=np.full_like(b, np.nan), where=se > 0)
    zc = CI_Z
    slopes = pd.DataFrame({
        "category": list(categories), "slope": b, "se": se, "z": z,
        "p": 2 * stats.norm.sf(np.abs(z)), "ci_lo": b - zc * se, "ci_hi": b + zc * se,
    })
    rows = []
    for i, j in itertools.combinations(range(len(categories)), 2):
        d = b[i] - b[j]
        var = V[i, i] + V[j, j] - 2 * V[i, j]
        s = math.sqrt(max(var, 0.0))
        zz = d / s if s > 0 else math.nan
        rows.append((categories[i], categories[j], d, s, zz, 2 * stats.norm.sf(abs(zz))))
    pairs = pd.DataFrame(rows, columns=["a", "b", "diff", "se", "z", "p"])
    return slopes, pairs


def scale_extrapolation(curve: ResponseCurve, from_bin: int, to_bin: int, population: float) -> float:
    """Extra people crossing the outcome threshold when moving between bins.

    ``(coef[to_bin] - coef[from_bin]) * population`` for a probability curve,
    rounded to 1e-6 of a person so that decimal inputs such as 0.035 give
    whole counts instead of binary representation noise.
    """
    n = curve.scheme.n_bins
    for b in (from_bin, to_bin):
        if not 0 <= b < n:
            raise IndexError(f"bin {b} outside 0..{n - 1}")
    return round((curve.coef(to_bin) - curve.coef(from_bin)) * population, 6) + 0.0
