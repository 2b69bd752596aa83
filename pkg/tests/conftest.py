import datetime as dt

import numpy as np
import pytest

from thermosleep.ingest import EpochStream


def stream_from_intervals(user_id, start, end, sleep, tz_minutes=0, gaps=()):
    """Minute epochs from ``start`` to ``end`` (naive local datetimes).

    ``sleep`` is a list of (from, to) local datetimes marked SLEEP; ``gaps``
    are (from, to) ranges with no epochs at all.
    """
    n = int((end - start).total_seconds() // 60)
    local0 = int((start - dt.datetime(1970, 1, 1)).total_seconds() // 60)
    local = local0 + np.arange(n, dtype=np.int64)
    state = np.zeros(n, dtype=np.int8)
    for a, b in sleep:
        i = int((a - start).total_seconds() // 60)
        j = int((b - start).total_seconds() // 60)
        state[i:j] = 1
    keep = np.ones(n, bool)
    for a, b in gaps:
        i = int((a - start).total_seconds() // 60)
        j = int((b - start).total_seconds() // 60)
        keep[i:j] = False
    return EpochStream(user_id, local[keep], local[keep] - tz_minutes, state[keep])


@pytest.fixture
def make_stream():
    return stream_from_intervals


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it.

    Lines are printed as they happen and repeated in the terminal summary,
    so they are visible even when output capture is on.
    """

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
