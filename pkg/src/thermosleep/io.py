"""CSV/JSON plumbing: schema-checked reads and atomic writes."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

FLOAT_FORMAT = None  # pandas default repr: exact round-trip


class SchemaError(ValueError):
    """Input file does not match its documented layout."""


def read_table(path, schema: dict, optional: dict | None = None) -> pd.DataFrame:
    """Read a CSV and coerce columns, reporting the first bad line.

    ``schema`` maps required column names to ``str``, ``int``, ``float`` or
    ``"date"``. Line numbers in errors count the header as line 1. Empty
    cells in float columns are read as NaN (explicitly missing).
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{path}: file not found")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in schema if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}:1: missing column(s) {', '.join(missing)}")
    cols = dict(schema)
    for c, kind in (optional or {}).items():
        if c in df.columns:
            cols[c] = kind
    out = {}
    for c, kind in cols.items():
        raw = np.strings.strip(df[c].to_numpy().astype(str))
        if kind is str:
            out[c] = raw.astype(object)
            continue
        val = _fast_parse(raw, kind)
        if val is not None:
            out[c] = val
            continue
        ser = pd.Series(raw)
        if kind == "date":
            val = pd.to_datetime(ser, format="%Y-%m-%d", errors="coerce")
            bad = val.isna()
        elif kind is int:
            val = pd.to_numeric(ser, errors="coerce")
            bad = val.isna() | (val != np.round(val))
            val = val.fillna(0).astype(np.int64)
        else:
            empty = ser.isin(MISSING)
            val = pd.to_numeric(ser.where(~empty), errors="coerce")
            bad = val.isna() & ~empty
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise SchemaError(f"{path}:{i + 2}: column {c!r}: cannot parse {df[c].iloc[i]!r}")
        out[c] = val.to_numpy()
    return pd.DataFrame(out)


MISSING = ("", "NA", "NaN", "nan")


def _fast_parse(raw: np.ndarray, kind):
    """C-level conversion of clean columns; None means use the checked path."""
    try:
        if kind is int:
            return raw.astype(np.int64)
        if kind is float:
            empty = np.isin(raw, MISSING)
            v = np.where(empty, "nan", raw).astype(float)
            # numpy accepts spellings such as "inf" or "1e5" just like pandas
            return v
        if kind == "date":
            if raw.size and np.all(np.strings.str_len(raw) == 10):
                return pd.to_datetime(raw.astype("datetime64[D]")).to_numpy()
            return None if raw.size else pd.to_datetime(raw).to_numpy()
    except (ValueError, OverflowError):
        return None
    return None


def _atomic(path, write) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write(fh)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(df: pd.DataFrame, path) -> Path:
    def w(fh):
        df.to_csv(fh, index=False, float_format=FLOAT_FORMAT, date_format="%Y-%m-%d", lineterminator="\n")

    return _atomic(path, w)


def write_json(obj, path) -> Path:
    return _atomic(path, lambda fh: fh.write(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"))


def write_text(text: str, path) -> Path:
    return _atomic(path, lambda fh: fh.write(text))


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    if hasattr(o, "isoformat"):
        return o.isoformat()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
