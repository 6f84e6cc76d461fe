"""Wealth accounting, objective decomposition, policy comparison and folds.

Wealth and invested capital follow::

    W_t = W_{t-1} + X_{t-1}'(S_t - S_{t-1}) - (eps q_t / 2) a_t' Psi_t a_t
    I_t = I_{t-1} + a_{t-1}' S_{t-1}

and the objective is the discounted sum over ``t = 1..T`` of expected dollar
return minus transaction cost minus risk penalty.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd

from .errors import DataError, UsageError
from .expansion import myopic_rollout, path_rollout
from .fixedpoint import LQConfig
from .mgarch import MarketPath, MarketState

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
TRADING_DAYS = 252
POLICIES = ("myopic", "expansion-nn", "expansion-zero", "holdings")


@dataclass
class PortfolioState:
    x: np.ndarray
    w: float
    invested: float
    last_trade: np.ndarray

    @classmethod
    def initial(cls, x0, w0: float = 100.0) -> "PortfolioState":
        x0 = np.asarray(x0, dtype=float)
        return cls(x0.copy(), float(w0), 0.0, np.zeros_like(x0))


def wealth_step(prev: PortfolioState, a, state_prev: MarketState, state_now: MarketState,
                cfg: LQConfig) -> PortfolioState:
    """Apply trade ``a_t`` at ``state_now`` and book the P&L since ``state_prev``."""
    a = np.asarray(a, dtype=float)
    pnl = float(prev.x @ (state_now.s - state_prev.s))
    cost = 0.5 * cfg.epsilon * state_now.q * float(a @ (state_now.s * a))
    invested = prev.invested + float(prev.last_trade @ state_prev.s)
    return PortfolioState(prev.x + a, prev.w + pnl - cost, invested, a.copy())


@dataclass
class Decomposition:
    V: float
    total_cost: float
    total_risk: float
    total_return: float
    step_cost: np.ndarray
    step_risk: np.ndarray
    step_return: np.ndarray


def objective_decomposition(holdings, path: MarketPath, cfg: LQConfig, mu) -> Decomposition:
    """Discounted return, cost and risk terms for ``t = 1..T`` and their net ``V``.

    Per-step arrays have length ``T + 1`` with a zero at ``t = 0``.
    """
    X = np.asarray(holdings, dtype=float)
    T = path.T
    if X.shape != (T + 1, path.n):
        raise UsageError(f"holdings have shape {X.shape}, path needs {(T + 1, path.n)}")
    a = np.zeros_like(X)
    a[1:] = X[1:] - X[:-1]
    disc = cfg.delta ** np.arange(T + 1)
    disc[0] = 0.0
    ret = disc * np.einsum("ti,ti->t", path.s * mu, X)
    cost = disc * 0.5 * cfg.epsilon * path.q * np.einsum("ti,ti->t", a * path.s, a)
    risk = disc * 0.5 * cfg.gamma * np.einsum("ti,tij,tj->t", X, path.p, X)
    R, Cst, Rk = float(ret.sum()), float(cost.sum()), float(risk.sum())
    return Decomposition(R - Cst - Rk, Cst, Rk, R, cost, risk, ret)


@dataclass
class BacktestReport:
    label: str
    wealth: np.ndarray
    invested: np.ndarray
    holdings: np.ndarray
    step_cost: np.ndarray
    step_risk: np.ndarray
    V: float
    total_cost: float
    total_risk: float
    total_return: float
    fingerprint: str
    w0: float = 100.0
    dates: Optional[list] = None
    meta: dict = field(default_factory=dict)

    @property
    def W_T(self) -> float:
        return float(self.wealth[-1])

    def to_frame(self) -> pd.DataFrame:
        T1, n = self.holdings.shape
        df = pd.DataFrame({"step": np.arange(T1)})
        if self.dates is not None:
            df.insert(0, "date", [str(d) for d in self.dates])
        df["W"] = self.wealth
        df["I"] = self.invested
        for i in range(n):
            df[f"X{i + 1}"] = self.holdings[:, i]
        df["cost"] = self.step_cost
        df["risk"] = self.step_risk
        return df

    def summary(self) -> dict:
        return {"format_version": REPORT_FORMAT_VERSION, "policy": self.label, "W_0": self.w0,
                "W_T": self.W_T, "value_added_pct": 100.0 * (self.W_T / self.w0 - 1.0), "V": self.V,
                "total_cost": self.total_cost, "total_risk": self.total_risk,
                "total_return": self.total_return, "path_fingerprint": self.fingerprint, "meta": self.meta}


def policy_holdings(policy: str, path: MarketPath, cfg: LQConfig, mu, correction: Optional[Callable] = None,
                    holdings=None, drift_convention: str = "dollar", variant: str = "stabilized") -> np.ndarray:
    """Holdings ``X_0..X_T`` generated by ``policy`` along ``path``."""
    if policy == "myopic":
        return myopic_rollout(path, cfg, mu, drift_convention)
    if policy == "expansion-zero":
        return path_rollout(path, cfg, mu, None, variant)[0]
    if policy == "expansion-nn":
        if correction is None:
            raise UsageError("expansion-nn needs a trained correction network")
        return path_rollout(path, cfg, mu, correction, variant)[0]
    if policy == "holdings":
        if holdings is None:
            raise UsageError("holdings policy needs an explicit holdings array")
        return np.asarray(holdings, dtype=float)
    raise UsageError(f"unknown policy {policy!r}; choose from {POLICIES}")


def run_backtest(policy: str, path: MarketPath, cfg: LQConfig, mu, w0: float = 100.0,
                 correction: Optional[Callable] = None, holdings=None, label: Optional[str] = None,
                 dates=None, drift_convention: str = "dollar", variant: str = "stabilized") -> BacktestReport:
    """Step ``policy`` along ``path`` with full accounting."""
    X = policy_holdings(policy, path, cfg, mu, correction, holdings, drift_convention, variant)
    T = path.T
    if X.shape != (T + 1, path.n):
        raise UsageError(f"holdings have shape {X.shape}, path needs {(T + 1, path.n)}")
    st = PortfolioState.initial(X[0], w0)
    W = np.empty(T + 1)
    I = np.empty(T + 1)
    W[0], I[0] = st.w, st.invested
    prev = path.state(0)
    for t in range(1, T + 1):
        now = path.state(t)
        st = wealth_step(st, X[t] - X[t - 1], prev, now, cfg)
        W[t], I[t] = st.w, st.invested
        prev = now
    dec = objective_decomposition(X, path, cfg, mu)
    meta = {"drift_convention": drift_convention, "variant": variant, "delta": cfg.delta,
            "epsilon": cfg.epsilon, "gamma": cfg.gamma, "T": T}
    return BacktestReport(label or policy, W, I, X, dec.step_cost, dec.step_risk, dec.V, dec.total_cost,
                          dec.total_risk, dec.total_return, path.fingerprint(), float(w0), dates, meta)


def compare_policies(reports, annualize: bool = False) -> pd.DataFrame:
    """Per-policy ``W_T``, value added and pairwise ``W_T`` ratios.

    With ``annualize=True`` the value added is scaled linearly by
    ``252 / T`` and the frame carries ``attrs['annualization'] = 'linear'``.
    """
    reports = list(reports)
    if not reports:
        raise UsageError("nothing to compare")
    fp = {r.fingerprint for r in reports}
    if len(fp) != 1:
        raise UsageError("reports were produced on different market paths")
    rows = []
    for r in reports:
        row = {"policy": r.label, "W_T": r.W_T, "value_added_pct": 100.0 * (r.W_T / r.w0 - 1.0), "V": r.V,
               "total_cost": r.total_cost, "total_risk": r.total_risk}
        if annualize:
            T = r.holdings.shape[0] - 1
            row["value_added_pct"] *= TRADING_DAYS / T
        for other in reports:
            if other is not r:
                row[f"ratio_vs_{other.label}"] = r.W_T / other.W_T
        rows.append(row)
    df = pd.DataFrame(rows)
    df.attrs["annualization"] = "linear x252/T" if annualize else "none"
    return df


def average_reports(table_rows) -> pd.DataFrame:
    """Stack per-fold comparison frames and append an ``Ave.`` row per policy."""
    df = pd.concat(table_rows, keys=range(1, len(table_rows) + 1), names=["fold", "row"]).reset_index(level="row", drop=True)
    avg = df.groupby("policy", sort=False).mean(numeric_only=True).reset_index()
    avg.insert(0, "fold", "Ave.")
    out = df.reset_index()
    out["fold"] = out["fold"].astype(object)
    return pd.concat([out, avg], ignore_index=True)


# --- folds -------------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSpec:
    train_start: object
    train_end: object
    test_start: object
    test_end: object

    def as_dict(self) -> dict:
        return {k: str(v.date()) if hasattr(v, "date") else v for k, v in self.__dict__.items()}


def make_folds(dates, train_len: int, test_len: int, stride: int, unit: str = "months") -> list:
    """Rolling train/test windows.

    ``unit='months'`` measures lengths in calendar months from the first
    date; a fold is kept when its test window closes within the data.
    ``unit='rows'`` counts observations. Windows are reported as the first
    and last dates actually present in each window.
    """
    if min(train_len, test_len, stride) <= 0:
        raise UsageError("train_len, test_len and stride must be positive")
    idx = pd.DatetimeIndex(pd.to_datetime(list(dates)))
    if len(idx) == 0 or not idx.is_monotonic_increasing:
        raise DataError("dates must be non-empty and ascending")
    folds = []
    if unit == "rows":
        need = train_len + test_len
        if len(idx) < need:
            raise DataError(f"need at least {need} rows for one fold, have {len(idx)}")
        for start in range(0, len(idx) - need + 1, stride):
            tr = idx[start:start + train_len]
            te = idx[start + train_len:start + need]
            folds.append(FoldSpec(tr[0], tr[-1], te[0], te[-1]))
        return folds
    if unit != "months":
        raise UsageError(f"unit must be 'months' or 'rows', got {unit!r}")
    first, last = idx[0], idx[-1]
    k = 0
    while True:
        start = first + pd.DateOffset(months=k * stride)
        split = start + pd.DateOffset(months=train_len)
        end = split + pd.DateOffset(months=test_len)
        if end > last + pd.Timedelta(days=1):
            break
        tr = idx[(idx >= start) & (idx < split)]
        te = idx[(idx >= split) & (idx < end)]
        if len(tr) and len(te):
            folds.append(FoldSpec(tr[0], tr[-1], te[0], te[-1]))
        k += 1
    if not folds:
        raise DataError(f"need at least {train_len + test_len} months of data for one fold, "
                        f"have {first.date()} to {last.date()}")
    return folds
