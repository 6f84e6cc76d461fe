"""File formats: price CSV input, parameter JSON, path CSV and report output.

Every JSON artifact carries a ``format_version``. Floats are written with
``repr`` precision and keys sorted, so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import json
import os
from datetime import date

import numpy as np
import pandas as pd

from .errors import DataError
from .mgarch import MarketPath, ModelParams

PARAMS_FORMAT_VERSION = 1
PATH_FORMAT_VERSION = 1


def read_prices_csv(path):
    """Parse ``date,TICKER1,...,TICKERn`` with ISO dates and positive prices.

    Returns ``(dates, tickers, prices)``; problems raise :class:`DataError`
    naming the offending line.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open price file {path}: {exc}") from exc
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if len(header) < 2 or header[0].lower() != "date":
        raise DataError(f"{path}:1: header must be 'date,TICKER1,...'")
    tickers = header[1:]
    dates, prices = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
        try:
            d = date.fromisoformat(row[0].strip())
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad ISO date {row[0]!r}") from None
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric price") from None
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise DataError(f"{path}:{lineno}: prices must be positive and finite")
        if dates and d <= dates[-1]:
            raise DataError(f"{path}:{lineno}: dates must be strictly ascending")
        dates.append(d)
        prices.append(vals)
    if len(dates) < 3:
        raise DataError(f"{path}: need at least 3 rows of prices, found {len(dates)}")
    return dates, tickers, np.array(prices)


def write_json(obj, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_default)
        fh.write("\n")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (date, pd.Timestamp)):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc


def params_to_dict(params: ModelParams, tickers=None) -> dict:
    return {"format_version": PARAMS_FORMAT_VERSION, "kind": "mgarch-params",
            "tickers": list(tickers) if tickers is not None else [f"A{i + 1}" for i in range(params.n)],
            "mu": params.mu.tolist(), "A": params.A.tolist(), "B": params.B.tolist(), "C": params.C.tolist(),
            "sigma0": params.sigma0.tolist(), "s0": params.s0.tolist()}


def params_from_dict(d: dict) -> ModelParams:
    if d.get("format_version") != PARAMS_FORMAT_VERSION or d.get("kind") != "mgarch-params":
        raise DataError("not an mgarch-params file of a supported format_version")
    try:
        return ModelParams(mu=d["mu"], A=d["A"], B=d["B"], C=d["C"], sigma0=d["sigma0"], s0=d["s0"])
    except KeyError as exc:
        raise DataError(f"params file is missing {exc}") from None


def path_to_frame(path: MarketPath) -> pd.DataFrame:
    T1, n = path.s.shape
    cols = {"step": np.arange(T1)}
    for i in range(n):
        cols[f"S{i + 1}"] = path.s[:, i]
    for i in range(n):
        cols[f"R{i + 1}"] = path.r[:, i]
    for i in range(n):
        cols[f"Z{i + 1}"] = path.z[:, i]
    for i in range(n):
        for j in range(i, n):
            cols[f"sigma{i + 1}_{j + 1}"] = path.sigma[:, i, j]
    cols["q"] = path.q
    return pd.DataFrame(cols)


def write_frame(df: pd.DataFrame, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
