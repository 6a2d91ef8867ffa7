"""CSV and JSON readers and writers with deterministic output."""

import hashlib
import json
import math
import os

import numpy as np
import pandas as pd

from .exceptions import DataError
from .market_data import LiabilitySchedule, ReturnPanel
from .private_valuation import PrivatePanel


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def read_table(path, what, *, index="date"):
    """Read a ``date,<col>,...`` CSV into a frame indexed by the date labels (kept as strings)."""
    if not os.path.exists(path):
        raise DataError(f"{what} file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, comment="#", skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {what} file {path}: {exc}") from exc
    frame.columns = [c.strip() for c in frame.columns]
    if index is not None:
        if index not in frame.columns:
            raise DataError(f"{what} file has no {index!r} column")
        frame = frame.set_index(index)
        frame.index = frame.index.str.strip()
        if frame.index.duplicated().any():
            raise DataError(f"duplicate date in {what}", row=str(frame.index[frame.index.duplicated()][0]))
    return frame


def numeric(frame, what, *, allow_missing=False, fill=0.0):
    """Convert string cells to float, naming the first offending row and column."""
    values = np.empty(frame.shape)
    for j, col in enumerate(frame.columns):
        cells = frame[col]
        for i, cell in enumerate(cells):
            if cell is None or (isinstance(cell, float) and math.isnan(cell)) or str(cell).strip() == "":
                if not allow_missing:
                    raise DataError(f"missing value in {what}", row=str(frame.index[i]), column=str(col))
                values[i, j] = fill
                continue
            try:
                values[i, j] = float(str(cell).strip())
            except ValueError:
                raise DataError(f"non-numeric value {cell!r} in {what}", row=str(frame.index[i]), column=str(col))
            if not math.isfinite(values[i, j]):
                raise DataError(f"non-finite value in {what}", row=str(frame.index[i]), column=str(col))
    return values


def _aligned(path, what, dates, *, allow_missing=False):
    """Rows of an optional ``date`` table at the given dates."""
    frame = read_table(path, what)
    missing = [d for d in dates if d not in frame.index]
    if missing and not allow_missing:
        raise DataError(f"{what} has no row for date {missing[0]}", row=missing[0])
    frame = frame.reindex(dates)
    return numeric(frame, what, allow_missing=allow_missing), list(frame.columns)


def _dividends(path, dates, companies):
    """Dividends at ``dates`` (missing cells and absent rows mean zero)."""
    if path is None:
        return np.zeros((len(dates), len(companies)))
    frame = read_table(path, "dividends")
    unknown = [c for c in frame.columns if c not in companies]
    if unknown:
        raise DataError("dividends refer to an unknown company", column=unknown[0])
    frame = frame.reindex(index=dates, columns=companies)
    return numeric(frame, "dividends", allow_missing=True, fill=0.0)


def load_return_panel(prices, dividends=None, covariates=None, exogenous=None):
    """Build a :class:`ReturnPanel` from CSV paths.

    ``dividends`` may cover the price dates or only the return dates; any
    missing entry is a zero dividend.  ``covariates`` and ``exogenous`` must
    have a row for every return date.
    """
    frame = read_table(prices, "prices")
    P = numeric(frame, "prices")
    dates = list(frame.index)
    companies = list(frame.columns)
    if not companies:
        raise DataError("prices file has no company columns")
    if len(dates) < 2:
        raise DataError("prices need at least two dates")
    bad = np.argwhere(P <= 0)
    if bad.size:
        t, i = bad[0]
        raise DataError("prices must be positive", row=dates[t], column=companies[i])
    d = _dividends(dividends, dates[1:], companies)
    x, x_names = (None, ())
    if covariates is not None:
        x, x_names = _aligned(covariates, "covariates", dates[1:])
    psi, psi_names = (None, ("const",))
    if exogenous is not None:
        psi, psi_names = _aligned(exogenous, "exogenous", dates[1:])
    return ReturnPanel(companies, dates, P, d, x, psi, tuple(x_names), tuple(psi_names))


def load_private_panel(books, dividends=None, covariates=None, exogenous=None):
    """Build a :class:`PrivatePanel` (payers moved first) from CSV paths."""
    frame = read_table(books, "books")
    B = numeric(frame, "books")
    dates = list(frame.index)
    companies = list(frame.columns)
    if not companies:
        raise DataError("books file has no company columns")
    bad = np.argwhere(B <= 0)
    if bad.size:
        t, i = bad[0]
        raise DataError("book values must be positive", row=dates[t], column=companies[i])
    d = _dividends(dividends, dates[1:], companies)
    kwargs = {}
    if covariates is not None:
        x, names = _aligned(covariates, "covariates", dates[1:])
        kwargs.update(covariates=x, covariate_names=tuple(names))
    if exogenous is not None:
        kwargs["exogenous"], _ = _aligned(exogenous, "exogenous", dates[1:])
    return PrivatePanel.payers_first(companies, dates, B, d, **kwargs)


def load_future_regressors(path, n_rows=None):
    """Future regressor rows ``X_{T+j-1}`` from a CSV with or without a ``date`` column."""
    if not os.path.exists(path):
        raise DataError(f"future regressor file not found: {path}")
    frame = pd.read_csv(path, dtype=str, comment="#")
    if "date" in frame.columns:
        frame = frame.set_index("date")
    values = numeric(frame, "future regressors")
    return values if n_rows is None else values[:n_rows]


def load_liabilities(liabilities, market_rates):
    """Liability schedule from ``date,type,principal,rate[,payment]`` and ``type,market_rate`` files."""
    frame = read_table(liabilities, "liabilities", index=None)
    for col in ("date", "type", "principal", "rate"):
        if col not in frame.columns:
            raise DataError(f"liabilities file has no {col!r} column")
    rates = read_table(market_rates, "market rates", index=None)
    for col in ("type", "market_rate"):
        if col not in rates.columns:
            raise DataError(f"market rates file has no {col!r} column")
    frame["date"] = frame["date"].str.strip()
    frame["type"] = frame["type"].str.strip()
    rates["type"] = rates["type"].str.strip()
    dates = list(dict.fromkeys(frame["date"]))
    types = list(rates["type"])
    if len(set(types)) != len(types):
        raise DataError("duplicate liability type in market rates")
    unknown = sorted(set(frame["type"]) - set(types))
    if unknown:
        raise DataError("liability type has no market rate", column=unknown[0])
    idx = {t: j for j, t in enumerate(types)}
    pos = {d: i for i, d in enumerate(dates)}
    shape = (len(dates), len(types))
    L, k = np.zeros(shape), np.zeros(shape)
    has_payment = "payment" in frame.columns
    pay = np.full(shape, np.nan) if has_payment else None
    seen = set()
    for row_no, rec in enumerate(frame.itertuples(index=False), start=2):
        key = (rec.date, rec.type)
        if key in seen:
            raise DataError("duplicate liability row", row=row_no)
        seen.add(key)
        i, j = pos[rec.date], idx[rec.type]
        cells = {"principal": rec.principal, "rate": rec.rate}
        if has_payment:
            cells["payment"] = rec.payment
        parsed = {}
        for name, cell in cells.items():
            if cell is None or (isinstance(cell, float) and math.isnan(cell)) or str(cell).strip() == "":
                if name == "payment":
                    parsed[name] = np.nan
                    continue
                raise DataError(f"missing {name}", row=row_no, column=name)
            try:
                parsed[name] = float(str(cell).strip())
            except ValueError:
                raise DataError(f"non-numeric {name} {cell!r}", row=row_no, column=name)
        L[i, j], k[i, j] = parsed["principal"], parsed["rate"]
        if has_payment:
            pay[i, j] = parsed["payment"]
    km = numeric(rates.set_index("type")[["market_rate"]], "market rates")[:, 0]
    if np.any(km <= -1.0):
        raise DataError("market rates must exceed -1")
    return LiabilitySchedule(L, k, km, pay, dates, types)


# writers -------------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(doc):
    return json.dumps(_clean(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, doc):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(doc))


def read_json(path, what="JSON"):
    if not os.path.exists(path):
        raise DataError(f"{what} file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"cannot parse {what} file {path}: {exc}") from exc


def format_cell(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows, digest=None):
    """Write rows with shortest round-trip float formatting and an optional digest comment."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if digest is not None:
            fh.write(f"# config_digest={digest}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_cell(v) for v in row) + "\n")


def read_csv(path):
    """Read a CSV written by :func:`write_csv` (digest comment skipped)."""
    return pd.read_csv(path, comment="#", float_precision="round_trip")
