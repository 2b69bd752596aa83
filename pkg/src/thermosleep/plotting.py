"""Deterministic SVG figures: response curves, marginal effects, loss maps.

Every figure is drawn on a fresh Agg canvas with a fixed SVG hash salt and
no creation date, so identical inputs produce byte-identical files.
"""
from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.collections import PatchCollection  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

SVG_SALT = "thermosleep"
CI_Z = 1.96


def _save(fig: Figure, path) -> Path:
    from .io import write_text

    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "path"}):
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "thermosleep"})
    return write_text(buf.getvalue(), path)


def _centres(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    finite = np.isfinite(lo) & np.isfinite(hi)
    width = float(np.median(hi[finite] - lo[finite])) if finite.any() else 5.0
    mid = np.where(finite, (lo + hi) / 2, np.nan)
    mid = np.where(~np.isfinite(lo) & np.isfinite(hi), hi - width / 2, mid)
    mid = np.where(np.isfinite(lo) & ~np.isfinite(hi), lo + width / 2, mid)
    return np.where(np.isnan(mid), 0.0, mid)


def curve_figure(curve: pd.DataFrame, xlabel: str = "Nighttime minimum temperature (°C)",
                 ylabel: str = "Change in sleep (minutes)") -> Figure:
    """Binned response with a 95 % band and an observation histogram.

    ``curve`` has bin_lo, bin_hi, coef, ci_lo, ci_hi, n_obs. The reference
    bin (zero-width interval at 0) is drawn as an open marker.
    """
    if curve.empty:
        raise ValueError("curve has no rows")
    lo = curve["bin_lo"].to_numpy(float)
    hi = curve["bin_hi"].to_numpy(float)
    x = _centres(lo, hi)
    b = curve["coef"].to_numpy(float)
    cl = curve["ci_lo"].to_numpy(float)
    ch = curve["ci_hi"].to_numpy(float)
    ref = (b == 0) & (cl == 0) & (ch == 0)

    fig = Figure(figsize=(6, 5))
    ax, hx = fig.subplots(2, 1, sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    ax.axhline(0, color="0.5", lw=0.8)
    ok = np.isfinite(b)
    if ok.sum() > 1:
        ax.fill_between(x[ok], cl[ok], ch[ok], color="tab:blue", alpha=0.25, lw=0)
        ax.plot(x[ok], b[ok], color="tab:blue", lw=1.5)
    pts = ok & ~ref
    ax.errorbar(x[pts], b[pts], yerr=np.vstack([b[pts] - cl[pts], ch[pts] - b[pts]]),
                fmt="o", color="tab:blue", ms=4, capsize=2)
    ax.plot(x[ref], b[ref], "o", mfc="white", mec="black", ms=6, label="reference")
    ax.set_ylabel(ylabel)
    if ref.any():
        ax.legend(loc="best", frameon=False)
    width = np.diff(x).min() * 0.9 if len(x) > 1 else 4.0
    hx.bar(x, curve["n_obs"].to_numpy(float), width=width, color="0.6")
    hx.set_ylabel("Nights")
    hx.set_xlabel(xlabel)
    fig.tight_layout()
    return fig


def plot_curve(curve: pd.DataFrame, path, xlabel: str = "Nighttime minimum temperature (°C)",
               ylabel: str = "Change in sleep (minutes)") -> Path:
    """Write :func:`curve_figure` as SVG to ``path``."""
    return _save(curve_figure(curve, xlabel, ylabel), path)


def margins_figure(slopes: pd.DataFrame, ylabel: str = "Minutes per °C") -> Figure:
    """Per-category slopes with 95 % intervals."""
    if slopes.empty:
        raise ValueError("no marginal effects to plot")
    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    pos = np.arange(len(slopes))
    se = slopes["se"].to_numpy(float)
    ax.errorbar(pos, slopes["slope"].to_numpy(float), yerr=CI_Z * se, fmt="o", capsize=3, color="tab:red")
    ax.axhline(0, color="0.5", lw=0.8)
    ax.set_xticks(pos, [str(c) for c in slopes["category"]])
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    return fig


def plot_margins(slopes: pd.DataFrame, path, ylabel: str = "Minutes per °C") -> Path:
    return _save(margins_figure(slopes, ylabel), path)


def _cell_size(values: np.ndarray, default: float) -> float:
    u = np.unique(values)
    return float(np.min(np.diff(u))) if u.size > 1 else default


def map_figure(cells: pd.DataFrame, value: str = "loss_hours", title: str = "") -> Figure:
    """Equirectangular map of grid cells coloured by ``value``."""
    if cells.empty:
        raise ValueError("no cells to plot")
    lat = cells["lat"].to_numpy(float)
    lon = cells["lon"].to_numpy(float)
    v = cells[value].to_numpy(float)
    dlat, dlon = _cell_size(lat, 1.0), _cell_size(lon, 1.0)
    fig = Figure(figsize=(8, 4.2))
    ax = fig.subplots()
    rects = [Rectangle((lo - dlon / 2, la - dlat / 2), dlon, dlat) for la, lo in zip(lat, lon)]
    pc = PatchCollection(rects, cmap="viridis", edgecolor="none")
    pc.set_array(v)
    ax.add_collection(pc)
    ax.set_xlim(min(-180.0, lon.min() - dlon), max(180.0, lon.max() + dlon))
    ax.set_ylim(min(-90.0, lat.min() - dlat), max(90.0, lat.max() + dlat))
    ax.set_aspect("equal")
    ax.set_xlabel("Longitude")
    ax.set_ylabel("Latitude")
    if title:
        ax.set_title(title)
    fig.colorbar(pc, ax=ax, label="Annual sleep loss (hours)", shrink=0.8)
    fig.tight_layout()
    return fig


def plot_map(cells: pd.DataFrame, path, value: str = "loss_hours", title: str = "") -> Path:
    return _save(map_figure(cells, value, title), path)


def global_figure(globals_: pd.DataFrame) -> Figure:
    """Per-model equal-area global loss by year, ensemble mean in dark red."""
    if globals_.empty:
        raise ValueError("no global series to plot")
    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    for model, g in globals_.groupby("model", sort=True):
        if model == "ensemble":
            continue
        ax.plot(g["year"], g["loss_hours"], color="0.6", lw=1)
    ens = globals_[globals_["model"] == "ensemble"]
    if not ens.empty:
        ax.plot(ens["year"], ens["loss_hours"], color="darkred", lw=2.5, label="ensemble mean")
        ax.legend(frameon=False)
    ax.set_xlabel("Year")
    ax.set_ylabel("Annual sleep loss (hours)")
    fig.tight_layout()
    return fig


def plot_global(globals_: pd.DataFrame, path) -> Path:
    return _save(global_figure(globals_), path)

