import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermosleep.io import SchemaError
from thermosleep.weather import (
    TEMP_QUANTUM,
    LinkConfig,
    StationIndex,
    assemble_exposures,
    ghcnd_to_stations,
    climate_normal,
    haversine_km,
    heat_index,
    match_stations,
    noleap_doy,
    read_grid,
    read_stations,
)

KM_PER_DEG = math.pi * 6371.0 / 180


def law_of_cosines_km(lat1, lon1, lat2, lon2):
    """Independent distance formula used as an oracle."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    c = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(math.radians(lon2 - lon1))
    return 6371.0 * math.acos(max(-1.0, min(1.0, c)))


# -- haversine -----------------------------------------------------------------


def test_haversine_identity_and_antipode():
    assert haversine_km(12.0, 34.0, 12.0, 34.0) == 0.0
    assert haversine_km(0, 0, 0, 180) == pytest.approx(math.pi * 6371.0, abs=1e-9)
    assert haversine_km(0, 0, 0, 180) == pytest.approx(20015.1, abs=0.05)


def test_haversine_matches_law_of_cosines_warsaw_rome():
    d = haversine_km(52.2296, 21.0122, 41.8919, 12.5113)
    assert abs(d - law_of_cosines_km(52.2296, 21.0122, 41.8919, 12.5113)) < 0.5
    assert 1300 < d < 1330


@settings(max_examples=200)
@given(st.floats(-89, 89), st.floats(-180, 180), st.floats(-89, 89), st.floats(-180, 180))
def test_haversine_oracle_and_symmetry(a, b, c, d):
    h = float(haversine_km(a, b, c, d))
    assert h == pytest.approx(float(haversine_km(c, d, a, b)), abs=1e-9)
    if h > 1.0:  # law of cosines loses precision for tiny separations
        assert abs(h - law_of_cosines_km(a, b, c, d)) < 0.5


# -- station matching ---------------------------------------------------------------


def stations_frame(rows, date="2020-07-01", var="tmin_c"):
    return pd.DataFrame([{"station_id": s, "lat": la, "lon": lo, "date": date, var: v} for s, la, lo, v in rows])


def test_single_station_identity():
    st_ = stations_frame([("A", 0.0, 0.5, 12.0)])
    assert match_stations((0.0, 0.0), st_, "2020-07-01", "tmin_c") == 12.0


def test_equidistant_stations_average():
    st_ = stations_frame([("A", 0.0, 0.5, 10.0), ("B", 0.0, -0.5, 20.0)])
    assert match_stations((0.0, 0.0), st_, "2020-07-01", "tmin_c") == pytest.approx(15.0, abs=1e-12)


def test_inverse_distance_weights_10_and_30_km():
    st_ = stations_frame([("A", 0.0, 10 / KM_PER_DEG, 0.0), ("B", 0.0, 30 / KM_PER_DEG, 4.0)])
    assert match_stations((0.0, 0.0), st_, "2020-07-01", "tmin_c") == pytest.approx(1.0, abs=1e-9)


def test_weight_capped_at_one_km():
    # stations at 0.2 km and 0.5 km both get the 1 km weight
    st_ = stations_frame([("A", 0.0, 0.2 / KM_PER_DEG, 0.0), ("B", 0.0, 0.5 / KM_PER_DEG, 10.0)])
    assert match_stations((0.0, 0.0), st_, "2020-07-01", "tmin_c") == pytest.approx(5.0)


def test_missing_when_no_station_in_radius_or_no_value():
    st_ = stations_frame([("A", 0.0, 2.0, 5.0)])  # ~222 km away
    assert math.isnan(match_stations((0.0, 0.0), st_, "2020-07-01", "tmin_c"))
    st_ = stations_frame([("A", 0.0, 0.1, np.nan)])
    assert math.isnan(match_stations((0.0, 0.0), st_, "2020-07-01", "tmin_c"))
    with pytest.raises(ValueError):
        match_stations((0.0, 0.0), st_, "2020-07-01", "tmin_c", radius_km=0)


def test_radius_boundary_is_inclusive():
    idx = StationIndex(["A"], [0.0], [100 / KM_PER_DEG])
    pos, d = idx.within(0.0, 0.0, 100.0 + 1e-9)
    assert pos.tolist() == [0]


station_lists = st.lists(
    st.tuples(st.floats(-1.2, 1.2), st.floats(-1.2, 1.2), st.floats(-30, 40)), min_size=1, max_size=12)


@settings(max_examples=100, deadline=None)
@given(station_lists, st.floats(5, 150), st.randoms(use_true_random=False))
def test_matching_properties(rows, radius, rnd):
    frame = stations_frame([(f"S{i}", la, lo, v) for i, (la, lo, v) in enumerate(rows)])
    val = match_stations((0.0, 0.0), frame, "2020-07-01", "tmin_c", radius)
    d = haversine_km(0.0, 0.0, frame["lat"].to_numpy(), frame["lon"].to_numpy())
    inside = frame["tmin_c"].to_numpy()[d <= radius]
    if inside.size == 0:
        assert math.isnan(val)
        return
    # convex combination of contributing values
    assert inside.min() - 1e-9 <= val <= inside.max() + 1e-9
    # order invariance
    perm = list(range(len(frame)))
    rnd.shuffle(perm)
    assert match_stations((0.0, 0.0), frame.iloc[perm], "2020-07-01", "tmin_c", radius) == pytest.approx(val, abs=1e-9)
    # shrinking the radius never adds stations
    idx = StationIndex.from_frame(frame)
    big, _ = idx.within(0.0, 0.0, radius)
    small, _ = idx.within(0.0, 0.0, radius / 2)
    assert set(small) <= set(big)


# -- climate normals --------------------------------------------------------------------


def archive(values_by_date, station=("A", 45.0, 7.0)):
    sid, la, lo = station
    return pd.DataFrame({"station_id": sid, "lat": la, "lon": lo, "date": values_by_date.index,
                         "tmin_c": values_by_date.to_numpy()})


def test_normal_of_constant_archive():
    dates = pd.date_range("1981-01-01", "2010-12-31")
    a = archive(pd.Series(7.25, index=dates))
    assert climate_normal((45.0, 7.0), 180, a, "tmin_c") == pytest.approx(7.25, abs=1e-12)


def test_normal_of_year_index_is_15_5():
    dates = pd.date_range("1981-01-01", "2010-12-31")
    a = archive(pd.Series(dates.year - 1980.0, index=dates))
    assert climate_normal((45.0, 7.0), 100, a, "tmin_c") == pytest.approx(15.5, abs=1e-12)


def test_normal_ignores_years_outside_window():
    dates = pd.date_range("1975-01-01", "2015-12-31")
    vals = np.where((dates.year >= 1981) & (dates.year <= 2010), 3.0, 99.0)
    a = archive(pd.Series(vals, index=dates))
    assert climate_normal((45.0, 7.0), 1, a, "tmin_c") == pytest.approx(3.0)


def brute_force_normal(dates, values, day, half=7):
    """Average over every archive row whose no-leap day is within +/-half of day."""
    total, count = 0.0, 0
    for ts, v in zip(dates, values):
        if not 1981 <= ts.year <= 2010:
            continue
        doy = ts.dayofyear
        if ts.is_leap_year and ts.month > 2:
            doy -= 1  # Feb 29 shares Feb 28's calendar day
        dist = min(abs(doy - day), 365 - abs(doy - day))
        if dist <= half:
            total += v
            count += 1
    return total / count


@pytest.mark.parametrize("day", [1, 3, 59, 60, 200, 362, 365])
def test_normal_matches_brute_force_on_sinusoid(day):
    dates = pd.date_range("1979-01-01", "2012-12-31")
    rng = np.random.default_rng(day)
    vals = 10 + 8 * np.sin(2 * np.pi * dates.dayofyear / 365.25) + rng.normal(0, 1, len(dates))
    a = archive(pd.Series(vals, index=dates))
    got = climate_normal((45.0, 7.0), day, a, "tmin_c")
    assert got == pytest.approx(brute_force_normal(dates, vals, day), abs=1e-9)


def test_normal_missing_when_window_empty():
    dates = pd.date_range("2015-01-01", "2015-12-31")
    a = archive(pd.Series(1.0, index=dates))
    assert math.isnan(climate_normal((45.0, 7.0), 10, a, "tmin_c"))


def test_noleap_doy_folds_feb29():
    d = pd.to_datetime(["2016-02-28", "2016-02-29", "2016-03-01", "2015-03-01", "2016-12-31"])
    assert noleap_doy(d).tolist() == [59, 59, 60, 60, 365]


# -- heat index --------------------------------------------------------------------------


def test_heat_index_below_threshold_is_simple_formula():
    t_f = 68.0
    simple_f = 0.5 * (t_f + 61.0 + (t_f - 68.0) * 1.2 + 50 * 0.094)
    assert heat_index(20.0, 50.0) == pytest.approx((simple_f - 32) * 5 / 9, abs=1e-12)
    assert abs(heat_index(20.0, 50.0) - 20.0) <= 1.0


def test_heat_index_matches_nws_chart_96f_50pct():
    # NWS heat index chart: 96 F at 50 % relative humidity reads 108 F
    hi_f = heat_index((96 - 32) * 5 / 9, 50.0) * 9 / 5 + 32
    assert round(hi_f) == 108


def nws_scalar(t_f, rh):
    """Branch-by-branch NWS procedure in Fahrenheit, written independently."""
    simple = 0.5 * (t_f + 61.0 + (t_f - 68.0) * 1.2 + rh * 0.094)
    if (simple + t_f) / 2 < 80:
        return simple
    hi = (-42.379 + 2.04901523 * t_f + 10.14333127 * rh - 0.22475541 * t_f * rh
          - 6.83783e-3 * t_f ** 2 - 5.481717e-2 * rh ** 2 + 1.22874e-3 * t_f ** 2 * rh
          + 8.5282e-4 * t_f * rh ** 2 - 1.99e-6 * t_f ** 2 * rh ** 2)
    if rh < 13 and 80 <= t_f <= 112:
        hi -= (13 - rh) / 4 * math.sqrt((17 - abs(t_f - 95)) / 17)
    elif rh > 85 and 80 <= t_f <= 87:
        hi += (rh - 85) / 10 * (87 - t_f) / 5
    return hi


@settings(max_examples=300)
@given(st.floats(-10, 50), st.floats(0, 100))
def test_heat_index_matches_scalar_procedure(t_c, rh):
    expected = (nws_scalar(t_c * 9 / 5 + 32, rh) - 32) * 5 / 9
    assert heat_index(t_c, rh) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=100)
@given(st.floats(0, 100))
def test_heat_index_monotone_in_temperature(rh):
    # In dry air the NWS procedure steps down once where it hands over from
    # the simple formula to the regression (near 27.2 C), so the dry case is
    # checked from 27.5 C.
    lo = 27.0 if rh >= 25 else 27.5
    t = np.linspace(lo, 43, 1601)
    assert np.all(np.diff(heat_index(t, np.full_like(t, rh))) >= -1e-9)


def test_heat_index_dry_air_handover_step():
    t = np.linspace(27, 27.5, 501)
    assert np.diff(heat_index(t, np.zeros_like(t))).min() < -0.5


@settings(max_examples=100)
@given(st.floats(27, 45))
def test_heat_index_humid_at_least_dry(t):
    assert heat_index(t, 0.0) <= heat_index(t, 100.0)


def test_heat_index_rejects_bad_humidity():
    with pytest.raises(ValueError):
        heat_index(30.0, 120.0)


# -- exposure assembly ------------------------------------------------------------------------


@pytest.fixture
def small_world():
    dates = pd.date_range("2008-01-01", "2016-12-31")
    n = len(dates)
    rng = np.random.default_rng(0)
    tmin = np.round(10 + 8 * np.sin(2 * np.pi * dates.dayofyear / 365) + rng.normal(0, 2, n), 1)
    tmax = tmin + 9.5
    stations = pd.DataFrame({"station_id": "A", "lat": 45.0, "lon": 7.0, "date": dates,
                             "tmin_c": tmin, "tmax_c": tmax, "prcp_cm": 0.2})
    grid = pd.DataFrame({"lat": 45.0, "lon": 7.5, "date": dates, "tmin_c": tmin, "tmax_c": tmax,
                         "prcp_cm": 0.2, "wind_ms": 3.0, "cloud_pct": 40.0, "rh_pct": 60.0})
    users = pd.DataFrame({"user_id": ["u1", "u2"], "lat": [45.0, 45.05], "lon": [7.0, 7.0]})
    recs = pd.DataFrame({"user_id": ["u1", "u1", "u2"],
                         "night_date": pd.to_datetime(["2016-07-01", "2016-07-02", "2016-07-01"])})
    return recs, users, stations, grid


def test_exposure_definitions(small_world):
    recs, users, stations, grid = small_world
    exp = assemble_exposures(recs, users, stations, grid, LinkConfig(normal_years=(2008, 2015)))
    assert exp["complete"].all()
    np.testing.assert_array_equal(exp["tmin_anomaly"] + exp["tmin_normal"], exp["tmin"])
    np.testing.assert_allclose(exp["dtr"], 9.5, atol=1e-4)
    assert (exp["tmin"] / TEMP_QUANTUM == np.round(exp["tmin"] / TEMP_QUANTUM)).all()
    day = stations.set_index("date").loc["2016-07-01", "tmin_c"]
    assert exp.loc[0, "tmin"] == pytest.approx(day, abs=TEMP_QUANTUM)
    assert list(exp["rh"]) == [60.0] * 3


def test_anomaly_example():
    from thermosleep.weather import quantize

    tmin, normal = quantize(12.0), quantize(10.0)
    assert tmin - normal == 2.0


def test_grid_and_station_sources_agree_on_equal_data(small_world):
    recs, users, stations, grid = small_world
    cfg = dict(normal_years=(2008, 2015))
    a = assemble_exposures(recs, users, stations, grid, LinkConfig(source="station", **cfg))
    b = assemble_exposures(recs, users, stations, grid, LinkConfig(source="grid", **cfg))
    pd.testing.assert_frame_equal(a, b)


def test_missing_core_field_flags_row(small_world):
    recs, users, stations, grid = small_world
    recs = pd.concat([recs, pd.DataFrame({"user_id": ["u1"], "night_date": pd.to_datetime(["2030-01-01"])})],
                     ignore_index=True)
    exp = assemble_exposures(recs, users, stations, grid, LinkConfig(normal_years=(2008, 2015)))
    assert exp["complete"].tolist() == [True, True, True, False]


def test_user_without_location_rejected(small_world):
    recs, users, stations, grid = small_world
    with pytest.raises(ValueError, match="location"):
        assemble_exposures(recs, users.iloc[:1], stations, grid)


def test_readers_validate(tmp_path):
    p = tmp_path / "stations.csv"
    p.write_text("station_id,lat,lon,date,tmin_c,tmax_c,prcp_cm\nA,45,7,2020-01-01,5,4,0\n")
    with pytest.raises(SchemaError, match=":2: tmin_c exceeds tmax_c"):
        read_stations(p)
    p.write_text("station_id,lat,lon,date,tmin_c,tmax_c,prcp_cm\nA,45,7,2020-01-01,1,4,0\nA,95,7,2020-01-02,1,4,0\n")
    with pytest.raises(SchemaError, match=":3: coordinates"):
        read_stations(p)
    p.write_text("station_id,lat,lon,date,tmin_c,tmax_c,prcp_cm\nA,45,7,2020-01-01,,4,0\n")
    assert math.isnan(read_stations(p).loc[0, "tmin_c"])
    g = tmp_path / "grid.csv"
    g.write_text("lat,lon,date,tmin_c,rh_pct\n45,7,2020-01-01,1,101\n")
    with pytest.raises(SchemaError, match="rh_pct"):
        read_grid(g)
    g.write_text("lat,lon,date,tmin_c\n45,7,2020-13-01,1\n")
    with pytest.raises(SchemaError, match=":2: column 'date'"):
        read_grid(g)


def test_grid_spacing_must_be_uniform():
    from thermosleep.weather import GridLinker

    grid = pd.DataFrame({"lat": [0.0, 1.0, 3.0], "lon": 0.0, "date": "2020-01-01", "tmin_c": 1.0})
    with pytest.raises(ValueError, match="uniform"):
        GridLinker(grid)


def test_ghcnd_conversion_units_and_gaps(tmp_path):
    daily = pd.DataFrame({
        "ID": ["USW1"] * 7 + ["USW2"] * 3,
        "DATE": ["2020-07-01"] * 3 + ["2020-07-02"] * 4 + ["2020-07-01"] * 3,
        "ELEMENT": ["TMIN", "TMAX", "PRCP", "TMIN", "TMAX", "PRCP", "SNOW", "TMIN", "TMAX", "PRCP"],
        "VALUE": [183, 301, 25, -9999, 290, 0, 0, 150, 260, 7],
        "QFLAG": ["", "", "", "", "", "", "", "", "I", ""],
    })
    inv = pd.DataFrame({"ID": ["USW1", "USW2"], "LATITUDE": [40.0, 41.0], "LONGITUDE": [-75.0, -74.0]})
    out = ghcnd_to_stations(daily, inv)
    # USW1 day 2 lacks tmin; USW2 tmax failed quality control
    assert len(out) == 1
    row = out.iloc[0]
    assert (row["station_id"], row["lat"], row["lon"]) == ("USW1", 40.0, -75.0)
    assert (row["tmin_c"], row["tmax_c"], row["prcp_cm"]) == (18.3, 30.1, 0.25)
    p = tmp_path / "stations.csv"
    out.assign(date=out["date"].dt.strftime("%Y-%m-%d")).to_csv(p, index=False)
    assert read_stations(p)["tmin_c"].tolist() == [18.3]
