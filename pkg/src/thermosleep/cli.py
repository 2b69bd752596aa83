"""``thermosleep`` command line: synth, fit, margins, project, plot.

Exit status is 0 on success, 1 for invalid inputs or configuration and 2
for numerical failures (non-convergence, collinearity, singular systems).
Every run writes ``manifest.json`` recording the command, seed, resolved
configuration, input and output SHA-256 hashes and library versions.
"""
from __future__ import annotations

import argparse
import datetime as dt
import logging
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .io import SchemaError, read_table, sha256_file, write_csv, write_json

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

logger = logging.getLogger("thermosleep")

COMMANDS = ("synth", "fit", "margins", "project", "plot")
INPUT_FILES = {
    "epochs": "epochs.csv",
    "users": "users.csv",
    "stations": "stations.csv",
    "grid": "grid.csv",
    "scenario": "scenario_grid.csv",
    "country_mask": "country_mask.csv",
}
USERS_SCHEMA = {"user_id": str, "lat": float, "lon": float, "adm1": str}
SECTIONS = ("inputs", "filters", "weather", "model", "solver", "synth", "projection", "plot")


class ConfigError(ValueError):
    """Configuration is malformed or names unknown options."""


class NumericalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = sorted(set(cfg) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown section(s): {', '.join(unknown)}")
    _check_keys(cfg.get("inputs", {}), {"dir", *INPUT_FILES}, "inputs")
    _check_keys(cfg.get("plot", {}), {"inputs"}, "plot")
    base = path.resolve().parent
    inputs = cfg.get("inputs", {})
    if "dir" in inputs and not Path(inputs["dir"]).is_absolute():
        inputs["dir"] = str((base / inputs["dir"]).resolve())
    for k in INPUT_FILES:
        if k in inputs and not Path(inputs[k]).is_absolute():
            inputs[k] = str((base / inputs[k]).resolve())
    if inputs:
        cfg["inputs"] = inputs
    return cfg


def _input_paths(cfg: dict, data_dir) -> dict[str, Path]:
    inputs = cfg.get("inputs", {})
    root = Path(data_dir) if data_dir else Path(inputs.get("dir", "."))
    return {k: Path(inputs[k]) if k in inputs else root / v for k, v in INPUT_FILES.items()}


def _check_keys(section: dict, allowed, name: str):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"[{name}] has unknown key(s): {', '.join(unknown)}")


def _inclusion(cfg: dict):
    from .ingest import InclusionConfig

    f = dict(cfg.get("filters", {}))
    allowed = {"min_duration_h", "max_duration_h", "onset_window", "offset_window",
               "min_nights", "min_coverage", "bridge_gap_min"}
    _check_keys(f, allowed, "filters")
    bridge = int(f.pop("bridge_gap_min", 60))
    for k in ("onset_window", "offset_window"):
        if k in f:
            f[k] = tuple(dt.time.fromisoformat(s) for s in f[k])
    try:
        return InclusionConfig(**f), bridge
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[filters]: {exc}") from None


def _link(cfg: dict):
    from .weather import LinkConfig

    w = dict(cfg.get("weather", {}))
    _check_keys(w, {"source", "radius_km", "normal_window_days", "normal_years"}, "weather")
    if "normal_years" in w:
        w["normal_years"] = tuple(int(v) for v in w["normal_years"])
    try:
        return LinkConfig(**w)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[weather]: {exc}") from None


def _spec(cfg: dict, default_preset: str):
    from .models import ModelSpec

    m = dict(cfg.get("model", {}))
    _check_keys(m, {"preset", "outcome", "treatment", "controls", "interaction", "categories",
                    "time_fe", "name"}, "model")
    m.setdefault("preset", default_preset)
    try:
        return ModelSpec.from_dict(m)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from None


def _solver(cfg: dict) -> dict:
    """Demeaning tolerance and iteration budget from ``[solver]``."""
    s = dict(cfg.get("solver", {}))
    _check_keys(s, {"tol", "max_iter"}, "solver")
    out = {}
    if "tol" in s:
        out["tol"] = float(s["tol"])
        if not out["tol"] > 0:
            raise ConfigError("[solver] tol must be positive")
    if "max_iter" in s:
        out["max_iter"] = int(s["max_iter"])
        if out["max_iter"] < 1:
            raise ConfigError("[solver] max_iter must be at least 1")
    return out


# ---------------------------------------------------------------------------
# pipeline steps


def read_users(path) -> pd.DataFrame:
    df = read_table(path, USERS_SCHEMA)
    bad = (df["lat"].abs() > 90) | (df["lon"].abs() > 180)
    if bad.any():
        raise SchemaError(f"{path}:{int(np.flatnonzero(bad.to_numpy())[0]) + 2}: coordinates out of range")
    dup = df["user_id"].duplicated()
    if dup.any():
        raise SchemaError(f"{path}:{int(np.flatnonzero(dup.to_numpy())[0]) + 2}: duplicated user_id")
    extra = pd.read_csv(path, dtype=str, keep_default_na=False)
    for c in extra.columns:
        if c not in df.columns:
            df[c] = extra[c].str.strip().replace("", np.nan)
    return df


def build_table(cfg: dict, paths: dict, out: Path, outputs: dict) -> pd.DataFrame:
    """Ingest epochs, filter, link weather and join users: the analysis table."""
    from .ingest import apply_filters, ingest, read_epochs
    from .weather import assemble_exposures, read_grid, read_stations

    inclusion, bridge = _inclusion(cfg)
    link = _link(cfg)
    for k in ("epochs", "users", "stations", "grid"):
        if not paths[k].exists():
            raise SchemaError(f"{paths[k]}: file not found")
    streams = read_epochs(paths["epochs"])
    records = ingest(streams, bridge_gap_min=bridge)
    kept, user_flags, report = apply_filters(records, inclusion)
    outputs["sleep_records"] = write_csv(kept, out / "sleep_records.csv")
    outputs["exclusions"] = write_json(report.as_dict(), out / "exclusions.json")
    users = read_users(paths["users"])
    exp = assemble_exposures(kept, users, read_stations(paths["stations"]), read_grid(paths["grid"]), link)
    outputs["exposures"] = write_csv(exp, out / "exposures.csv")
    table = kept.reset_index(drop=True).merge(exp, on=["user_id", "night_date"], how="left", validate="1:1")
    table = table.merge(users, on="user_id", how="left", validate="m:1")
    return table


def _curve_spec(spec):
    from dataclasses import replace

    if spec.scheme_name is not None:
        return spec
    return replace(spec, treatment="tmin_binned", controls="binned", interaction=None, categories=None,
                   name=f"{spec.name or 'model'}_binned")


def _fit_curve(spec, table, out: Path, outputs: dict, solver: dict):
    from .models import build_design, default_schemes, response_curve
    from .panel import fit
    from .plotting import plot_curve

    cspec = _curve_spec(spec)
    design = build_design(cspec, table)
    res = fit(design.panel, **solver)
    scheme = default_schemes()[cspec.scheme_name]
    units = "probability" if cspec.outcome.startswith("short_sleep") else "minutes"
    curve = response_curve(res, scheme, design.bin_counts, units)
    frame = curve.to_csv_frame()
    outputs["curve"] = write_csv(frame, out / "curve.csv")
    ylabel = "Change in probability" if units == "probability" else "Change in sleep (minutes)"
    outputs["curve_svg"] = plot_curve(frame, out / "curve.svg", ylabel=ylabel)
    return res


def run_synth(cfg: dict, seed: int, out: Path, paths, outputs: dict) -> None:
    from .synth import SynthConfig, write_synth

    s = dict(cfg.get("synth", {}))
    try:
        scfg = SynthConfig.from_dict(s)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[synth]: {exc}") from None
    outputs.update(write_synth(scfg, seed, out))


def run_fit(cfg: dict, seed: int, out: Path, paths, outputs: dict) -> None:
    from .models import build_design
    from .panel import fit
    from .projection import fit_spline

    spec = _spec(cfg, "linear")
    solver = _solver(cfg)
    table = build_table(cfg, paths, out, outputs)
    design = build_design(spec, table)
    res = fit(design.panel, **solver)
    doc = res.to_dict()
    doc["spec"] = spec.to_dict()
    doc["dropped_incomplete"] = design.dropped_incomplete
    outputs["fit"] = write_json(doc, out / "fit.json")
    if spec.treatment == "tmin_spline":
        sm = fit_spline(res)
        outputs["spline"] = write_json({"coef": list(sm.coef), "slopes": list(sm.slopes),
                                        "slope_se": sm.slope_se().tolist(), "knots": list(sm.knots)},
                                       out / "spline.json")
    _fit_curve(spec, table, out, outputs, solver)


def run_margins(cfg: dict, seed: int, out: Path, paths, outputs: dict) -> None:
    from .models import build_design, marginal_effects
    from .panel import fit
    from .plotting import plot_margins

    spec = _spec(cfg, "season")
    if not spec.interaction:
        raise ConfigError("margins needs a model with an interaction")
    solver = _solver(cfg)
    table = build_table(cfg, paths, out, outputs)
    design = build_design(spec, table)
    res = fit(design.panel, **solver)
    slopes, pairs = marginal_effects(res, spec.treatment_variable, spec.categories)
    slopes["n_obs"] = design.interaction_counts.reindex(slopes["category"]).to_numpy()
    doc = res.to_dict()
    doc["spec"] = spec.to_dict()
    outputs["fit"] = write_json(doc, out / "fit.json")
    outputs["margins"] = write_csv(slopes, out / "margins.csv")
    outputs["margins_pairs"] = write_csv(pairs, out / "margins_pairs.csv")
    outputs["margins_svg"] = plot_margins(slopes, out / "margins.svg")


def run_project(cfg: dict, seed: int, out: Path, paths, outputs: dict) -> None:
    from dataclasses import replace

    from .models import build_design
    from .panel import fit
    from .plotting import plot_global, plot_map
    from .projection import (BASE_YEAR, NIGHT_HOURS, SplineModel, country_aggregate, ensemble_aggregate,
                             fit_spline, project_grid, read_country_mask, read_scenario)

    p = dict(cfg.get("projection", {}))
    _check_keys(p, {"slopes", "base_year", "night_hours"}, "projection")
    if "slopes" in p:
        sl = [float(v) for v in p["slopes"]]
        if len(sl) != 3:
            raise ConfigError("[projection] slopes needs three values (below -20, -20..10, above 10)")
        model = SplineModel.from_slopes(*sl)
    else:
        spec = replace(_spec(cfg, "spline"), treatment="tmin_spline", interaction=None, categories=None)
        solver = _solver(cfg)
        table = build_table(cfg, paths, out, outputs)
        model = fit_spline(fit(build_design(spec, table).panel, **solver))
    outputs["spline"] = write_json({"coef": list(model.coef), "slopes": list(model.slopes),
                                    "knots": list(model.knots)}, out / "spline.json")
    scen = read_scenario(paths["scenario"])
    proj = project_grid(scen, model, int(p.get("base_year", BASE_YEAR)))
    outputs["projection"] = write_csv(proj, out / "projection.csv")
    ens, glob = ensemble_aggregate(proj, float(p.get("night_hours", NIGHT_HOURS)))
    outputs["projection_ensemble"] = write_csv(ens, out / "projection_ensemble.csv")
    outputs["projection_global"] = write_csv(glob, out / "projection_global.csv")
    if paths["country_mask"].exists():
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            country = country_aggregate(proj, read_country_mask(paths["country_mask"]))
        for w in caught:
            logger.warning("%s", w.message)
        outputs["country_loss"] = write_csv(country, out / "country_loss.csv")
    last = int(ens["year"].max())
    outputs["projection_map_svg"] = plot_map(ens[ens["year"] == last], out / f"projection_map_{last}.svg",
                                             title=f"Ensemble mean annual sleep loss, {last}")
    outputs["projection_global_svg"] = plot_global(glob, out / "projection_global.svg")


def run_plot(cfg: dict, seed: int, out: Path, paths, outputs: dict, inputs=()) -> None:
    from .models import read_curve
    from .plotting import plot_curve, plot_global, plot_map, plot_margins

    files = list(inputs) or [Path(p) for p in cfg.get("plot", {}).get("inputs", [])]
    if not files:
        raise ConfigError("plot needs at least one input CSV")
    for f in files:
        f = Path(f)
        if not f.exists():
            raise SchemaError(f"{f}: file not found")
        cols = set(pd.read_csv(f, nrows=0).columns)
        target = out / (f.stem + ".svg")
        if {"bin_lo", "bin_hi", "coef"} <= cols:
            outputs[f.stem + "_svg"] = plot_curve(read_curve(f), target)
        elif {"category", "slope", "se"} <= cols:
            outputs[f.stem + "_svg"] = plot_margins(
                read_table(f, {"category": str, "slope": float, "se": float}), target)
        elif {"lat", "lon", "loss_hours", "year"} <= cols:
            df = read_table(f, {"lat": float, "lon": float, "year": int, "loss_hours": float})
            if df.empty:
                raise SchemaError(f"{f}: no rows")
            last = int(df["year"].max())
            cells = df[df["year"] == last].groupby(["lat", "lon"], sort=True)["loss_hours"].mean().reset_index()
            outputs[f.stem + "_svg"] = plot_map(cells, out / f"{f.stem}_{last}.svg")
        elif {"model", "year", "loss_hours"} <= cols:
            df = read_table(f, {"model": str, "year": int, "loss_hours": float})
            if df.empty:
                raise SchemaError(f"{f}: no rows")
            outputs[f.stem + "_svg"] = plot_global(df, target)
        else:
            raise SchemaError(f"{f}:1: unrecognised columns {sorted(cols)}")


RUNNERS = {"synth": run_synth, "fit": run_fit, "margins": run_margins, "project": run_project,
           "plot": run_plot}


# ---------------------------------------------------------------------------
# manifest


def versions() -> dict:
    import matplotlib
    import scipy

    return {"thermosleep": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pandas": pd.__version__, "scipy": scipy.__version__, "matplotlib": matplotlib.__version__}


def _rel(path: Path, out: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(out.resolve()))
    except ValueError:
        return str(Path(path).resolve())


def write_manifest(command: str, seed: int, cfg: dict, paths: dict, outputs: dict, out: Path,
                   plot_inputs=()) -> Path:
    used = {}
    if command in ("fit", "margins", "project"):
        names = ["epochs", "users", "stations", "grid"]
        if command == "project":
            names = (["scenario", "country_mask"] if "slopes" in cfg.get("projection", {})
                     else names + ["scenario", "country_mask"])
        for k in names:
            if paths[k].exists():
                used[k] = {"path": str(paths[k].resolve()), "sha256": sha256_file(paths[k])}
    for f in plot_inputs:
        used[Path(f).name] = {"path": str(Path(f).resolve()), "sha256": sha256_file(f)}
    doc = {
        "command": command,
        "seed": seed,
        "config": cfg,
        "inputs": used,
        "outputs": {_rel(p, out): sha256_file(p) for p in sorted(map(Path, outputs.values()))},
        "versions": versions(),
    }
    return write_json(doc, out / "manifest.json")


def _from_manifest(path) -> tuple[str, int, dict, list]:
    import json

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: manifest not found")
    doc = json.loads(path.read_text())
    for k in ("command", "seed", "config", "inputs"):
        if k not in doc:
            raise ConfigError(f"{path}: manifest lacks {k!r}")
    for name, rec in doc["inputs"].items():
        p = Path(rec["path"])
        if not p.exists():
            raise SchemaError(f"{p}: input recorded in manifest is missing")
        if sha256_file(p) != rec["sha256"]:
            raise ConfigError(f"{p}: input {name} changed since the manifest was written")
    plot_inputs = [rec["path"] for name, rec in doc["inputs"].items() if name not in INPUT_FILES]
    return doc["command"], int(doc["seed"]), doc["config"], plot_inputs


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="thermosleep", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML configuration file")
        p.add_argument("--seed", type=int, default=0, help="random seed (64-bit)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--manifest", type=Path, help="rerun the command recorded in a manifest")
        if name != "synth":
            p.add_argument("--data", type=Path, help="directory holding the standard input files")
        if name == "plot":
            p.add_argument("inputs", nargs="*", type=Path, help="curve/margins/projection CSV files")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    from .panel import CollinearityError, ConvergenceError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be a 64-bit unsigned integer")
        plot_inputs = list(getattr(args, "inputs", []) or [])
        if args.manifest:
            command, seed, cfg, recorded = _from_manifest(args.manifest)
            if command != args.command:
                raise ConfigError(f"manifest records {command!r}, not {args.command!r}")
            plot_inputs = plot_inputs or recorded
        else:
            command, seed, cfg = args.command, args.seed, load_config(args.config)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if command != "synth":
            # record an absolute input directory so a manifest rerun works from anywhere
            inputs = cfg.setdefault("inputs", {})
            inputs["dir"] = str(Path(getattr(args, "data", None) or inputs.get("dir", ".")).resolve())
        paths = _input_paths(cfg, None)
        outputs: dict = {}
        runner = RUNNERS[command]
        if command == "plot":
            runner(cfg, seed, out, paths, outputs, plot_inputs)
        else:
            runner(cfg, seed, out, paths, outputs)
        write_manifest(command, seed, cfg, paths, outputs, out, plot_inputs)
    except (ConvergenceError, CollinearityError, np.linalg.LinAlgError, FloatingPointError, NumericalError) as exc:
        print(f"thermosleep: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (SchemaError, ConfigError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"thermosleep: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
