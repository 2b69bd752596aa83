import calendar
import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from thermosleep.io import SchemaError
from thermosleep.models import PRESETS, estimate, spline_basis
from thermosleep.panel import FitResult
from thermosleep.projection import (
    DAYS,
    SplineModel,
    annual_loss,
    country_aggregate,
    ensemble_aggregate,
    equal_area_average,
    fit_spline,
    nights_equivalent,
    noleap_days,
    predict_delta,
    project_grid,
    read_country_mask,
    read_scenario,
)
from thermosleep.synth import Truth, simulate_panel

# -- basis and prediction -----------------------------------------------------------------


@pytest.mark.parametrize("t,expected", [(10, (10, 30, 0)), (-20, (-20, 0, 0)), (25, (25, 45, 15))])
def test_spline_basis_examples(t, expected):
    assert tuple(spline_basis(t)) == expected


@pytest.mark.parametrize("knot", [-20.0, 10.0])
def test_prediction_continuous_at_knots(knot):
    m = SplineModel.from_slopes(-0.05, -0.2, -0.45, intercept=3.0)
    eps = 2.0 ** -30
    left, at, right = m.predict([knot - eps, knot, knot + eps])
    slopes = m.slopes
    seg = 0 if knot == -20.0 else 1
    assert at - left == pytest.approx(slopes[seg] * eps, abs=1e-15)
    assert right - at == pytest.approx(slopes[seg + 1] * eps, abs=1e-15)
    # the basis itself is exactly zero at its own knot
    assert spline_basis(knot)[1 + seg] == 0.0


def test_predict_delta_examples():
    m = SplineModel.from_slopes(0.0, 0.0, -0.46)
    assert predict_delta(m, 16.0, 15.0) == pytest.approx(-0.46, abs=1e-12)
    assert predict_delta(m, 12.5, 12.5) == 0.0
    kinked = SplineModel.from_slopes(-0.05, -0.05, -0.45)
    assert predict_delta(kinked, 11.0, 9.0) == pytest.approx(-0.50, abs=1e-12)


@settings(max_examples=200)
@given(st.floats(-50, 50), st.floats(-50, 50), st.tuples(*[st.floats(-1, 1)] * 3))
def test_predict_delta_antisymmetric(a, b, slopes):
    m = SplineModel.from_slopes(*slopes)
    assert predict_delta(m, a, b) == pytest.approx(-predict_delta(m, b, a), abs=1e-12)
    assert predict_delta(m, a, b) == pytest.approx(m.predict(a) - m.predict(b), abs=1e-9)


def test_slope_se_from_vcov():
    V = np.diag([0.01, 0.04, 0.09])
    m = SplineModel((-0.1, 0.0, -0.3), vcov=tuple(map(tuple, V)))
    assert_allclose(m.slope_se(), np.sqrt([0.01, 0.05, 0.14]))
    with pytest.raises(ValueError):
        SplineModel((0, 0, 0)).slope_se()


# -- annual loss -----------------------------------------------------------------------------


def test_uniform_warming_above_knot_closed_form():
    m = SplineModel.from_slopes(0.0, 0.0, -0.46)
    base = np.full(DAYS, 15.0)
    loss = annual_loss(base + 1.0, base, m)
    assert abs(loss - 365 * 0.46 / 60) < 1e-9
    assert round(loss, 2) == 2.80


def test_zero_warming_is_zero():
    m = SplineModel.from_slopes(-0.05, -0.2, -0.46)
    base = np.linspace(-30, 30, DAYS)
    assert annual_loss(base, base, m) == 0.0
    assert math.copysign(1.0, annual_loss(base, base, m)) == 1.0


def test_missing_days_listed():
    m = SplineModel.from_slopes(0.0, 0.0, -0.46)
    days = pd.Series(15.0, index=[d for d in range(1, DAYS + 1) if d not in (40, 41, 300)])
    full = pd.Series(15.0, index=range(1, DAYS + 1))
    with pytest.raises(ValueError, match=r"\[40, 41, 300\]"):
        annual_loss(days, full, m)
    with pytest.raises(ValueError, match="365"):
        annual_loss(np.zeros(366), np.zeros(DAYS), m)


@settings(max_examples=50)
@given(st.integers(1, DAYS - 1), st.integers(0, 2**32 - 1))
def test_annual_loss_additive_over_day_ranges(split, seed):
    rng = np.random.default_rng(seed)
    m = SplineModel.from_slopes(-0.05, -0.2, -0.46)
    base = rng.uniform(-30, 30, DAYS)
    fut = base + rng.uniform(0, 5, DAYS)
    first = np.where(np.arange(DAYS) < split, fut, base)
    second = np.where(np.arange(DAYS) >= split, fut, base)
    assert annual_loss(fut, base, m) == pytest.approx(
        annual_loss(first, base, m) + annual_loss(second, base, m), abs=1e-9)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(-1, 0), st.floats(-1, 0))
def test_warming_above_knot_never_gains_sleep(seed, middle, above):
    rng = np.random.default_rng(seed)
    m = SplineModel.from_slopes(0.1, middle, above)
    base = rng.uniform(10, 35, DAYS)
    assert annual_loss(base + rng.uniform(0, 4, DAYS), base, m) >= -1e-12


def test_noleap_days():
    assert noleap_days([59, 60, 61, 366], [2012] * 4).tolist() == [59, 0, 60, 365]
    assert noleap_days([59, 60, 365], [2011] * 3).tolist() == [59, 60, 365]


# -- fitting ------------------------------------------------------------------------------------


def spline_fit(truth, seed):
    t = simulate_panel(n_users=400, n_nights=120, truth=truth, seed=seed, n_adm1=40, start="2016-01-01",
                       sigma=5.0)
    fit, _ = estimate(PRESETS["spline"], t)
    return fit


def test_fit_spline_linear_truth():
    fit = spline_fit(Truth(family="linear", slope=-0.3), 1)
    m = fit_spline(fit)
    se = m.slope_se()
    # the -20 C hinge may be unidentified in a mild climate
    for s, e in zip(m.slopes, se):
        if e > 0:
            assert abs(s + 0.3) < 3 * e


def test_fit_spline_kinked_truth():
    truth = Truth(family="kinked", kink=10.0, slope_below=-0.05, slope_above=-0.45)
    m = fit_spline(spline_fit(truth, 2))
    se = m.slope_se()
    assert abs(m.slopes[1] + 0.05) < 3 * se[1]
    assert abs(m.slopes[2] + 0.45) < 3 * se[2]


def test_fit_spline_dropped_hinge_gets_zero():
    fit = FitResult(("tmin_spline0", "tmin_spline2", "prcp"), np.array([-0.1, -0.3, 1.0]),
                    np.diag([0.01, 0.02, 0.5]), 100, 10, 0, True, 1, 0, ("tmin_spline1",))
    m = fit_spline(fit)
    assert m.coef == (-0.1, 0.0, -0.3)
    assert m.slopes[0] == m.slopes[1]
    bad = FitResult(("prcp",), np.array([1.0]), np.eye(1), 100, 10, 0, True, 1, 0)
    with pytest.raises(KeyError):
        fit_spline(bad)


def test_spline_design_without_cold_nights_keeps_linear_term():
    # nights never fall below -20 C, so the first hinge equals t + 20
    t = simulate_panel(n_users=40, n_nights=60, truth=Truth(family="kinked"), seed=3, n_adm1=8)
    assert t["tmin"].min() > -20
    fit, design = estimate(PRESETS["spline"], t)
    assert "tmin_spline1" not in design.columns
    assert "tmin_spline0" in fit.names and fit.dropped_columns == ()
    m = fit_spline(fit)
    assert m.slopes[0] == m.slopes[1]
    assert m.predict(-30.0) - m.predict(-20.0) == pytest.approx(-10 * m.slopes[1])


# -- grids ---------------------------------------------------------------------------------------


def scenario(models=("m1",), years=(2010, 2050), cells=((0.0, 0.0), (60.0, 10.0)), warming=None):
    rows = []
    for m in models:
        for y in years:
            n = 366 if calendar.isleap(y) else 365
            for la, lo in cells:
                w = 0.0 if warming is None else warming(m, y, la, lo)
                t = 15.0 + 5 * np.sin(np.arange(1, n + 1) / 58.0) + w
                rows.append(pd.DataFrame({"model": m, "year": y, "lat": la, "lon": lo,
                                          "doy": np.arange(1, n + 1), "tmin_c": t}))
    return pd.concat(rows, ignore_index=True)


def test_project_grid_baseline_year_zero_and_uniform_warming():
    m = SplineModel.from_slopes(0.0, 0.0, -0.46)
    sc = scenario(years=(2010, 2050), warming=lambda m_, y, la, lo: 1.0 if y == 2050 else 0.0)
    out = project_grid(sc, m)
    assert list(out.columns) == ["lat", "lon", "model", "year", "loss_hours"]
    assert (out.loc[out["year"] == 2010, "loss_hours"] == 0.0).all()
    assert_allclose(out.loc[out["year"] == 2050, "loss_hours"], 365 * 0.46 / 60, atol=1e-9)


def test_project_grid_leap_year_drops_feb29():
    m = SplineModel.from_slopes(0.0, 0.0, -0.46)
    sc = scenario(years=(2010, 2048), warming=lambda m_, y, la, lo: 0.0)
    # the leap-year series equals the baseline once Feb 29 is removed
    leap = sc["year"] == 2048
    doy = sc.loc[leap, "doy"].to_numpy()
    vals = 15.0 + 5 * np.sin(np.where(doy > 60, doy - 1, doy) / 58.0)
    sc.loc[leap, "tmin_c"] = np.where(doy == 60, 99.0, vals)
    assert (project_grid(sc, m)["loss_hours"] == 0.0).all()


def test_project_grid_errors():
    m = SplineModel.from_slopes(0.0, 0.0, -0.46)
    sc = scenario()
    with pytest.raises(ValueError, match=r"missing day\(s\) of year \[100\]"):
        project_grid(sc[~((sc["doy"] == 100) & (sc["year"] == 2050) & (sc["lat"] == 0))], m)
    with pytest.raises(ValueError, match="baseline year 2010"):
        project_grid(sc[sc["year"] == 2050], m)
    with pytest.raises(ValueError, match="duplicated"):
        project_grid(pd.concat([sc, sc.iloc[:1]]), m)


def test_equal_area_examples():
    assert equal_area_average([0.0, 60.0], [0.0, 3.0]) == 1.0
    assert equal_area_average([37.5], [4.25]) == 4.25
    assert equal_area_average([90.0, 0.0], [100.0, 2.0]) == 2.0
    with pytest.raises(ValueError):
        equal_area_average([], [])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(-89.9, 89.9), st.floats(-100, 100)), min_size=1, max_size=50))
def test_equal_area_matches_brute_force(cells):
    lat = [c[0] for c in cells]
    v = [c[1] for c in cells]
    num = den = 0.0
    for la, x in cells:
        w = math.cos(math.radians(la))
        num += w * x
        den += w
    assert equal_area_average(lat, v) == pytest.approx(num / den, rel=1e-12, abs=1e-9)


def test_constant_field_over_random_grids():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = rng.integers(1, 200)
        lat = rng.uniform(-89.5, 89.5, n)
        c = rng.uniform(-50, 50)
        assert equal_area_average(lat, np.full(n, c)) == c


def model_grid(models, values, year=2099, cells=((0.0, 0.0), (30.0, 0.0), (60.0, 0.0))):
    rows = [(la, lo, m, year, v) for m, v in zip(models, values) for la, lo in cells]
    return pd.DataFrame(rows, columns=["lat", "lon", "model", "year", "loss_hours"])


def test_ensemble_of_identical_or_single_models():
    one = model_grid(["a"], [3.0])
    ens, glob = ensemble_aggregate(one)
    assert (ens["loss_hours"] == 3.0).all() and (ens["n_models"] == 1).all()
    two = pd.concat([one, one.assign(model="b")])
    ens2, _ = ensemble_aggregate(two)
    assert_array_equal(ens2["loss_hours"], ens["loss_hours"])
    assert glob.loc[glob["model"] == "ensemble", "loss_hours"].item() == 3.0


def test_ensemble_geometry_mismatch():
    a = model_grid(["a"], [1.0])
    b = model_grid(["b"], [1.0], cells=((0.0, 0.0), (30.0, 0.0), (61.0, 0.0)))
    with pytest.raises(ValueError, match="geometry"):
        ensemble_aggregate(pd.concat([a, b]))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 30), min_size=2, max_size=6), st.randoms(use_true_random=False))
def test_ensemble_permutation_invariant(values, rnd):
    models = [f"m{i}" for i in range(len(values))]
    g = model_grid(models, values)
    perm = list(range(len(g)))
    rnd.shuffle(perm)
    a, _ = ensemble_aggregate(g)
    b, _ = ensemble_aggregate(g.iloc[perm])
    pd.testing.assert_frame_equal(a, b)


def test_published_model_range_fixture():
    # 21 per-model global 2099 losses spanning the published range
    values = np.round(np.linspace(6.93, 16.25, 21), 2)
    models = [f"gcm{i:02d}" for i in range(21)]
    rng = np.random.default_rng(1)
    cells = [(la, 0.0) for la in (-45.0, -15.0, 15.0, 45.0)]
    rows = []
    for m, v in zip(models, values):
        # cell pattern with zero equal-area mean keeps the global at v
        dev = rng.normal(size=len(cells))
        w = np.cos(np.deg2rad([c[0] for c in cells]))
        dev -= np.dot(w, dev) / w.sum()
        rows += [(la, lo, m, 2099, v + d) for (la, lo), d in zip(cells, dev)]
    proj = pd.DataFrame(rows, columns=["lat", "lon", "model", "year", "loss_hours"])
    _, glob = ensemble_aggregate(proj)
    per_model = glob[glob["model"] != "ensemble"]["loss_hours"]
    assert per_model.min() == pytest.approx(6.93, abs=1e-9)
    assert per_model.max() == pytest.approx(16.25, abs=1e-9)
    assert len(per_model) == 21


def test_nights_equivalent_fixtures():
    assert nights_equivalent(11.3) > 1.5  # "over one and a half average nights"
    assert nights_equivalent(23.0) > 3.0  # "over three average nights"
    assert nights_equivalent(7.1) == 1.0
    with pytest.raises(ValueError):
        nights_equivalent(1.0, 0.0)


def test_country_aggregate_examples():
    proj = pd.concat([model_grid(["a"], [0.0]), model_grid(["b"], [0.0])], ignore_index=True)
    proj["loss_hours"] = np.where(proj["lat"] == 0.0, 1.0, np.where(proj["lat"] == 30.0, 2.0, 4.0))
    proj.loc[proj["model"] == "b", "loss_hours"] += 1.0
    mask = pd.DataFrame({"lat": [0.0, 30.0, 60.0], "lon": 0.0, "iso3": ["AAA", "BBB", "BBB"]})
    out = country_aggregate(proj, mask).set_index("iso3")["loss_hours"]
    assert out["AAA"] == pytest.approx(1.5)
    w30, w60 = math.cos(math.radians(30)), 0.5
    by_hand = np.mean([(2 * w30 + 4 * w60) / (w30 + w60), (3 * w30 + 5 * w60) / (w30 + w60)])
    assert out["BBB"] == pytest.approx(by_hand, rel=1e-12)


def test_country_all_cells_equals_global():
    proj = model_grid(["a", "b"], [2.0, 5.0])
    proj["loss_hours"] += proj["lat"] / 10
    mask = proj[["lat", "lon"]].drop_duplicates().assign(iso3="ALL")
    _, glob = ensemble_aggregate(proj)
    ens = glob.loc[glob["model"] == "ensemble", "loss_hours"].item()
    assert country_aggregate(proj, mask)["loss_hours"].item() == pytest.approx(ens, rel=1e-12)


def test_country_without_cells_warns():
    proj = model_grid(["a"], [1.0])
    mask = pd.DataFrame({"lat": [0.0, 80.0], "lon": 0.0, "iso3": ["AAA", "ZZZ"]})
    with pytest.warns(UserWarning, match="ZZZ"):
        out = country_aggregate(proj, mask)
    assert out["iso3"].tolist() == ["AAA"]


# -- files -----------------------------------------------------------------------------------------


def test_read_scenario_and_mask(tmp_path):
    p = tmp_path / "scenario_grid.csv"
    p.write_text("model,year,lat,lon,doy,tmin_c\nm,2010,0,0,1,5\nm,2011,0,0,366,5\n")
    with pytest.raises(SchemaError, match=":3:"):
        read_scenario(p)
    p.write_text("model,year,lat,lon,doy,tmin_c\nm,2012,0,0,366,5\n")
    assert len(read_scenario(p)) == 1
    q = tmp_path / "country_mask.csv"
    q.write_text("lat,lon,iso3\n0,0,AAA\n0,0,BBB\n")
    with pytest.raises(SchemaError, match=":3: cell assigned"):
        read_country_mask(q)


def test_project_grid_emits_no_warnings():
    m = SplineModel.from_slopes(-0.05, -0.2, -0.46)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        project_grid(scenario(models=("a", "b")), m)
