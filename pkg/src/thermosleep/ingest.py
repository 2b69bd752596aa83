"""Minute-epoch sleep/wake streams to nightly sleep records.

Times on a record are stored as minutes relative to local noon of the
night's date, so a 23:00 onset is 660 and a 07:00 wake-up the following
morning is 1140. Onset uses the local wall clock; offset is onset plus the
elapsed minutes of the sleep period, which keeps ``duration <= offset - onset``
true across UTC-offset changes.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

WAKE, SLEEP = 0, 1
MINUTES_PER_DAY = 1440
NOON = 720
MAX_NAP_MIN = 240

RECORD_COLUMNS = [
    "user_id",
    "night_date",
    "onset_min",
    "offset_min",
    "midsleep_min",
    "duration_min",
    "total24h_min",
    "flag_lt7",
    "flag_lt6",
    "flag_lt5",
]


class EpochOrderError(ValueError):
    """Raised when epoch timestamps are not strictly increasing."""

    def __init__(self, user_id, row: int):
        self.user_id = user_id
        self.row = row
        super().__init__(
            f"user {user_id!r}: timestamp at row {row} does not follow the previous epoch"
        )


@dataclass(frozen=True)
class EpochStream:
    """One user's minute epochs.

    ``local_min`` is wall-clock minutes since 1970-01-01 in the epoch's own
    UTC offset; ``utc_min`` is the absolute minute. Both are int64.
    """

    user_id: str
    local_min: np.ndarray
    utc_min: np.ndarray
    state: np.ndarray

    def __post_init__(self):
        if not (len(self.local_min) == len(self.utc_min) == len(self.state)):
            raise ValueError("epoch arrays must have equal length")
        bad = np.flatnonzero(np.diff(self.utc_min) <= 0)
        if bad.size:
            raise EpochOrderError(self.user_id, int(bad[0]) + 1)
        if not np.isin(self.state, (WAKE, SLEEP)).all():
            raise ValueError(f"user {self.user_id!r}: state must be 0 (WAKE) or 1 (SLEEP)")

    def __len__(self) -> int:
        return len(self.state)

    @classmethod
    def from_datetimes(cls, user_id, timestamps: Sequence[dt.datetime], states) -> "EpochStream":
        """Build from timezone-aware datetimes."""
        local, utc = [], []
        for ts in timestamps:
            if ts.tzinfo is None:
                raise ValueError("timestamps must carry a UTC offset")
            wall = ts.replace(tzinfo=None)
            local.append(_to_minutes(wall))
            utc.append(_to_minutes(wall - ts.utcoffset()))
        return cls(
            str(user_id),
            np.asarray(local, dtype=np.int64),
            np.asarray(utc, dtype=np.int64),
            np.asarray(states, dtype=np.int8),
        )


_EPOCH0 = dt.datetime(1970, 1, 1)


def _to_minutes(wall: dt.datetime) -> int:
    return int((wall - _EPOCH0).total_seconds() // 60)


_DIGITS = {16: (0, 1, 2, 3, 5, 6, 8, 9, 11, 12, 14, 15), 19: (0, 1, 2, 3, 5, 6, 8, 9, 11, 12, 14, 15, 17, 18)}


def _parse_fixed_width(values) -> tuple[np.ndarray, np.ndarray] | None:
    """Vectorized parse when every timestamp shares one fixed-width layout.

    Returns None when the layout differs or any field is invalid, so the
    caller can fall back to the general parser for error reporting.
    """
    a = np.strings.strip(np.asarray(values, dtype=str))
    if a.size == 0:
        return None
    lengths = np.strings.str_len(a)
    width = int(lengths[0])
    if width < 17 or np.any(lengths != width):
        return None
    try:
        raw = a.astype(f"S{width}")
    except UnicodeEncodeError:
        return None
    M = np.frombuffer(raw.tobytes(), np.uint8).reshape(len(a), width)
    base = 19 if M[0, 16] == ord(":") else 16
    ok = np.all((M[:, _DIGITS[base]] >= 48) & (M[:, _DIGITS[base]] <= 57), axis=1)
    ok &= (M[:, 4] == ord("-")) & (M[:, 7] == ord("-")) & (M[:, 13] == ord(":"))
    ok &= (M[:, 10] == ord("T")) | (M[:, 10] == ord(" "))
    if base == 19:
        ok &= M[:, 16] == ord(":")
    tz = M[:, base:]
    n_tz = width - base
    if n_tz == 1:
        ok &= tz[:, 0] == ord("Z")
        offset = np.zeros(len(a), np.int64)
    elif n_tz in (5, 6):
        hpos, mpos = (1, 2), ((4, 5) if n_tz == 6 else (3, 4))
        dig = tz[:, hpos + mpos].astype(np.int64) - 48
        ok &= np.all((dig >= 0) & (dig <= 9), axis=1)
        ok &= (tz[:, 0] == ord("+")) | (tz[:, 0] == ord("-"))
        if n_tz == 6:
            ok &= tz[:, 3] == ord(":")
        sign = np.where(tz[:, 0] == ord("-"), -1, 1)
        offset = sign * ((dig[:, 0] * 10 + dig[:, 1]) * 60 + dig[:, 2] * 10 + dig[:, 3])
    else:
        return None
    if not ok.all():
        return None
    d = M.astype(np.int64) - 48
    hh = d[:, 11] * 10 + d[:, 12]
    mm = d[:, 14] * 10 + d[:, 15]
    if np.any(hh > 23) or np.any(mm > 59):
        return None
    try:
        days = np.ascontiguousarray(M[:, :10]).view("S10").ravel().astype("datetime64[D]")
    except ValueError:
        return None
    wall = days.astype(np.int64) * MINUTES_PER_DAY + hh * 60 + mm
    return wall, wall - offset


def parse_timestamps(values: pd.Series) -> tuple[np.ndarray, np.ndarray]:
    """Parse ISO-8601 strings with UTC offsets into (local, utc) minute arrays.

    Accepts ``YYYY-MM-DDTHH:MM[:SS]`` followed by ``Z`` or ``+HH:MM``/``-HH:MM``.
    """
    fast = _parse_fixed_width(values)
    if fast is not None:
        return fast
    s = pd.Series(np.asarray(values, dtype=str)).str.strip()
    m = s.str.extract(r"^(\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}(?::\d{2})?)(Z|[+-]\d{2}:?\d{2})$")
    bad = m[0].isna()
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise ValueError(f"row {i}: cannot parse timestamp {s.iloc[i]!r}")
    wall = pd.to_datetime(m[0], format="ISO8601").to_numpy("datetime64[m]").astype(np.int64)
    tz = m[1].str.replace(":", "", regex=False)
    sign = np.where(tz.str[0] == "-", -1, 1)
    hh = pd.to_numeric(tz.str[1:3].where(tz != "Z", "0"))
    mm = pd.to_numeric(tz.str[3:5].where(tz != "Z", "0"))
    offset = (sign * (hh.to_numpy() * 60 + mm.to_numpy())).astype(np.int64)
    offset[(tz == "Z").to_numpy()] = 0
    return wall, wall - offset


def read_epochs(path) -> list[EpochStream]:
    """Read ``epochs.csv`` (user_id, timestamp_iso8601_with_offset, state)."""
    from .io import SchemaError, read_table

    df = read_table(path, {"user_id": str, "timestamp_iso8601_with_offset": str, "state": int})
    try:
        local, utc = parse_timestamps(df["timestamp_iso8601_with_offset"])
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    bad = ~df["state"].isin((WAKE, SLEEP)).to_numpy()
    if bad.any():
        raise SchemaError(f"{path}:{int(np.flatnonzero(bad)[0]) + 2}: state must be 0 or 1")
    streams = []
    users = df["user_id"].to_numpy()
    # rows of one user must be contiguous and ordered; report file line numbers
    starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
    ends = np.r_[starts[1:], len(users)]
    seen = set()
    for a, b in zip(starts, ends):
        uid = users[a]
        if uid in seen:
            raise SchemaError(f"{path}:{a + 2}: rows for user {uid!r} are not contiguous")
        seen.add(uid)
        try:
            streams.append(
                EpochStream(uid, local[a:b], utc[a:b], df["state"].to_numpy()[a:b].astype(np.int8))
            )
        except EpochOrderError as exc:
            raise SchemaError(f"{path}:{a + exc.row + 2}: {exc}") from None
    return streams


@dataclass(frozen=True)
class SleepPeriod:
    """A run of SLEEP bouts merged across short WAKE gaps."""

    night_date: dt.date
    onset: int
    offset: int
    sleep_min: int

    @property
    def span(self) -> int:
        return self.offset - self.onset


@dataclass(frozen=True)
class SleepRecord:
    user_id: str
    night_date: dt.date
    onset: int
    offset: int
    duration_min: int
    total24h_min: int | None = None

    @property
    def midsleep(self) -> float:
        return (self.onset + self.offset) / 2


@dataclass(frozen=True)
class InclusionConfig:
    min_duration_h: float = 4.0
    max_duration_h: float = 12.0
    onset_window: tuple[dt.time, dt.time] = (dt.time(19, 0), dt.time(8, 0))
    offset_window: tuple[dt.time, dt.time] = (dt.time(0, 0), dt.time(15, 0))
    min_nights: int = 28
    min_coverage: float = 0.25

    def __post_init__(self):
        if not 0 < self.min_duration_h < self.max_duration_h:
            raise ValueError("need 0 < min_duration_h < max_duration_h")
        if not 0 < self.min_coverage <= 1:
            raise ValueError("need 0 < min_coverage <= 1")


ROBUST_MIN_NIGHTS = (56, 84, 112)
ROBUST_MIN_COVERAGE = (0.50, 0.75, 0.85)


def _minute_of_day(t: dt.time) -> int:
    return t.hour * 60 + t.minute


def _in_clock_window(tod: np.ndarray, window: tuple[dt.time, dt.time], strict: bool) -> np.ndarray:
    lo, hi = _minute_of_day(window[0]), _minute_of_day(window[1])
    if strict:
        above, below = tod > lo, tod < hi
    else:
        above, below = tod >= lo, tod < hi
    return (above | below) if lo > hi else (above & below)


def split_sleep_periods(
    stream: EpochStream,
    nocturnal_window: tuple[dt.time, dt.time] = (dt.time(19, 0), dt.time(8, 0)),
    bridge_gap_min: int = 60,
) -> tuple[list[SleepPeriod], list[SleepPeriod]]:
    """Separate a stream into principal nightly periods and naps.

    Returns ``(principal, naps)``. A principal period is, per night date, the
    merged period with the most SLEEP minutes whose onset lies in
    ``nocturnal_window`` (ties go to the earlier period). Every other period
    is returned in ``naps`` regardless of length; callers apply the 4 h cap.
    """
    if len(stream) == 0:
        raise ValueError("empty epoch stream")
    if bridge_gap_min < 0:
        raise ValueError("bridge_gap_min must be >= 0")
    asleep = stream.state == SLEEP
    idx = np.flatnonzero(asleep)
    if idx.size == 0:
        return [], []
    utc = stream.utc_min[idx]
    # a bout breaks wherever the next sleep epoch is not the very next minute
    brk = np.flatnonzero(np.diff(utc) != 1) + 1
    b_start = np.r_[0, brk]
    b_end = np.r_[brk, idx.size]
    start_utc = utc[b_start]
    end_utc = utc[b_end - 1] + 1
    n_sleep = b_end - b_start

    gaps = start_utc[1:] - end_utc[:-1]
    new_period = np.r_[True, gaps > bridge_gap_min]
    p_first = np.flatnonzero(new_period)
    p_last = np.r_[p_first[1:], len(new_period)] - 1
    p_sleep = np.add.reduceat(n_sleep, p_first)
    p_onset_local = stream.local_min[idx[b_start[p_first]]]
    p_span = end_utc[p_last] - start_utc[p_first]

    night_day = (p_onset_local - NOON) // MINUTES_PER_DAY
    onset = p_onset_local - (night_day * MINUTES_PER_DAY + NOON)
    tod = p_onset_local % MINUTES_PER_DAY
    eligible = _in_clock_window(tod, nocturnal_window, strict=False)

    periods = [
        SleepPeriod(
            night_date=_EPOCH0.date() + dt.timedelta(days=int(night_day[k])),
            onset=int(onset[k]),
            offset=int(onset[k] + p_span[k]),
            sleep_min=int(p_sleep[k]),
        )
        for k in range(len(p_first))
    ]
    best: dict[dt.date, int] = {}
    for k, p in enumerate(periods):
        if not eligible[k]:
            continue
        j = best.get(p.night_date)
        if j is None or p.sleep_min > periods[j].sleep_min:
            best[p.night_date] = k
    chosen = set(best.values())
    principal = [periods[k] for k in sorted(chosen)]
    naps = [p for k, p in enumerate(periods) if k not in chosen]
    return principal, naps


def daily_total_24h(records: Iterable[SleepRecord], naps: Iterable[SleepPeriod]) -> list[int]:
    """Nightly duration plus qualifying naps (< 4 h) sharing the night date."""
    extra: dict[dt.date, int] = {}
    for nap in naps:
        if nap.sleep_min < MAX_NAP_MIN:
            extra[nap.night_date] = extra.get(nap.night_date, 0) + nap.sleep_min
    return [r.duration_min + extra.get(r.night_date, 0) for r in records]


def aggregate_epochs(
    stream: EpochStream,
    nocturnal_window: tuple[dt.time, dt.time] = (dt.time(19, 0), dt.time(8, 0)),
    bridge_gap_min: int = 60,
) -> list[SleepRecord]:
    """Aggregate one user's epochs into one record per night.

    Parameters
    ----------
    stream : EpochStream
        Strictly increasing 1-minute epochs for a single user.
    nocturnal_window : (time, time)
        Clock window, possibly wrapping midnight, in which a principal
        period's onset must fall.
    bridge_gap_min : int
        WAKE gaps of at most this many minutes are bridged when forming
        sleep periods. Bridged minutes do not count toward duration.

    Returns
    -------
    list of SleepRecord
        Ordered by night date, with ``total24h_min`` including naps shorter
        than four hours attributed to the same night date.
    """
    principal, naps = split_sleep_periods(stream, nocturnal_window, bridge_gap_min)
    records = [
        SleepRecord(stream.user_id, p.night_date, p.onset, p.offset, p.sleep_min)
        for p in principal
    ]
    totals = daily_total_24h(records, naps)
    return [
        SleepRecord(r.user_id, r.night_date, r.onset, r.offset, r.duration_min, t)
        for r, t in zip(records, totals)
    ]


def short_sleep_flags(duration_min, thresholds=(7, 6, 5)):
    """Strict ``duration < k hours`` flags, one per threshold.

    Scalars give a tuple of bools; arrays give a tuple of boolean arrays.
    """
    d = np.asarray(duration_min)
    if np.any(d <= 0):
        raise ValueError("duration_min must be positive")
    flags = tuple(d < k * 60 for k in thresholds)
    if d.ndim == 0:
        return tuple(bool(f) for f in flags)
    return flags


def records_frame(records: Iterable[SleepRecord]) -> pd.DataFrame:
    """Tabulate records in the ``sleep_records.csv`` column layout."""
    rows = [
        (
            r.user_id,
            r.night_date,
            r.onset,
            r.offset,
            r.midsleep,
            r.duration_min,
            r.duration_min if r.total24h_min is None else r.total24h_min,
        )
        for r in records
    ]
    df = pd.DataFrame(rows, columns=RECORD_COLUMNS[:7])
    df["night_date"] = pd.to_datetime(df["night_date"])
    lt7, lt6, lt5 = short_sleep_flags(df["duration_min"].to_numpy(dtype=float).reshape(-1))
    df["flag_lt7"], df["flag_lt6"], df["flag_lt5"] = lt7.astype(int), lt6.astype(int), lt5.astype(int)
    return df


def ingest(streams: Iterable[EpochStream], bridge_gap_min: int = 60,
           nocturnal_window=(dt.time(19, 0), dt.time(8, 0))) -> pd.DataFrame:
    """Aggregate many streams; each user is processed independently."""
    records: list[SleepRecord] = []
    for s in streams:
        records.extend(aggregate_epochs(s, nocturnal_window, bridge_gap_min))
    return records_frame(records)


@dataclass
class ExclusionReport:
    records_in: int = 0
    dropped_duration: int = 0
    dropped_onset: int = 0
    dropped_offset: int = 0
    records_passing: int = 0
    users_in: int = 0
    users_kept: int = 0
    records_kept: int = 0
    dropped_users: list = field(default_factory=list)

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["dropped_users"] = list(map(str, self.dropped_users))
        return d


def apply_filters(records: pd.DataFrame, config: InclusionConfig = InclusionConfig()):
    """Apply record-level and user-level inclusion rules.

    Record rules use strict inequalities on duration and on local clock
    time of onset and offset. Users need ``min_nights`` kept records and a
    kept-night share of at least ``min_coverage`` over the inclusive span
    from their first to last kept night.

    Returns
    -------
    kept : DataFrame
    users : Series of bool indexed by user_id
    report : ExclusionReport
    """
    rep = ExclusionReport(records_in=len(records))
    dur = records["duration_min"].to_numpy(dtype=float)
    ok_dur = (dur > config.min_duration_h * 60) & (dur < config.max_duration_h * 60)
    onset_tod = (records["onset_min"].to_numpy() + NOON) % MINUTES_PER_DAY
    offset_tod = (records["offset_min"].to_numpy() + NOON) % MINUTES_PER_DAY
    ok_on = _in_clock_window(onset_tod, config.onset_window, strict=True)
    ok_off = _in_clock_window(offset_tod, config.offset_window, strict=True)
    rep.dropped_duration = int((~ok_dur).sum())
    rep.dropped_onset = int((ok_dur & ~ok_on).sum())
    rep.dropped_offset = int((ok_dur & ok_on & ~ok_off).sum())
    passing = records[ok_dur & ok_on & ok_off]
    rep.records_passing = len(passing)

    all_users = pd.Index(pd.unique(records["user_id"]))
    rep.users_in = len(all_users)
    nights = pd.to_datetime(passing["night_date"])
    g = nights.groupby(passing["user_id"])
    n = g.size()
    span = (g.max() - g.min()).dt.days + 1
    user_ok = (n >= config.min_nights) & (n / span >= config.min_coverage)
    flags = pd.Series(False, index=all_users, name="included")
    flags.loc[user_ok.index] = user_ok.to_numpy()
    kept = passing[passing["user_id"].map(flags).to_numpy(dtype=bool)]
    rep.users_kept = int(flags.sum())
    rep.records_kept = len(kept)
    rep.dropped_users = sorted(flags.index[~flags.to_numpy()].tolist())
    return kept.reset_index(drop=True), flags, rep
