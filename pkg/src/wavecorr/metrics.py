"""Cost-exact backtests and the evaluation metrics reported per run."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import env
from .data import TRADING_DAYS, MarketWindow
from .env import CommissionRates
from .policy import PolicyParams, forward_augmented

REPORT_SCHEMA = "wavecorr-backtest/1"
METRIC_COLUMNS = ("annual_return", "annual_vol", "sharpe", "mdd", "daily_hit_rate", "turnover")
METRIC_TITLES = ("Annual return", "Annual vol", "SR", "MDD", "Daily hit rate", "Turnover")
DEGENERATE_EPS = 1e-12


def sharpe_value(returns) -> tuple[float, bool]:
    """Mean over sample std (T - 1 denominator). Returns ``(sr, degenerate)``;
    degenerate series report 0."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        return 0.0, True
    sd = r.std(ddof=1)
    if not sd > DEGENERATE_EPS:
        return 0.0, True
    return float(r.mean() / sd), False


def max_drawdown(pv) -> float:
    pv = np.asarray(pv, dtype=np.float64)
    peak = np.maximum.accumulate(pv)
    return float(np.max(1.0 - pv / peak))


@dataclass
class BacktestReport:
    annual_return: float
    annual_vol: float
    sharpe: float
    mdd: float
    daily_hit_rate: Optional[float]
    turnover: float
    pv_series: np.ndarray
    log_returns: np.ndarray
    weights: np.ndarray = field(repr=False, default=None)
    drifted: np.ndarray = field(repr=False, default=None)
    degenerate: bool = False
    label: str = ""

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_COLUMNS}

    def to_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "label": self.label,
            **self.metrics(),
            "degenerate_variance": self.degenerate,
            "days": int(len(self.log_returns)),
            "final_value": float(self.pv_series[-1]),
        }

    def write(self, json_path, pv_csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2))
        if pv_csv_path is not None:
            with Path(pv_csv_path).open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["day", "portfolio_value", "log_return"])
                w.writerow([0, repr(float(self.pv_series[0])), ""])
                for k, (v, z) in enumerate(zip(self.pv_series[1:], self.log_returns), start=1):
                    w.writerow([k, repr(float(v)), repr(float(z))])


def annualized_metrics(log_returns, pv, weights, drifted, ew_log_returns=None, label="") -> BacktestReport:
    z = np.asarray(log_returns, dtype=np.float64)
    pv = np.asarray(pv, dtype=np.float64)
    if z.size < 2:
        raise ValueError("need at least two daily returns")
    n = z.size
    sr, degenerate = sharpe_value(z)
    annual_return = (pv[-1] / pv[0]) ** (TRADING_DAYS / n) - 1.0
    annual_vol = float(z.std(ddof=1) * math.sqrt(TRADING_DAYS))
    w = np.asarray(weights, dtype=np.float64)
    wd = np.asarray(drifted, dtype=np.float64)
    turnover = float(np.mean(0.5 * np.abs(w - wd).sum(axis=1)))
    hit = None
    if ew_log_returns is not None:
        hit = float(np.mean(z > np.asarray(ew_log_returns)))
    return BacktestReport(float(annual_return), annual_vol, sr, max_drawdown(pv), hit, turnover,
                          pv, z, w, wd, degenerate, label)


def simulate(actions, relatives, h: int, rates: CommissionRates, initial_w=None, tol: float = 1e-10):
    """Exact-cost simulation of pre-computed daily allocations.

    ``actions[k]`` is chosen after observing column ``h - 1 + k`` and is held
    over column ``h + k``. Returns ``(log_returns, pv, drifted_before_trade)``.
    """
    rel = np.asarray(relatives, dtype=np.float64)
    m, n = rel.shape
    days = n - h
    acts = np.asarray(actions, dtype=np.float64)
    if acts.shape != (days, m):
        raise ValueError(f"expected {days} actions of size {m}, got {acts.shape}")
    w_prime = np.full(m, 1.0 / m) if initial_w is None else np.asarray(initial_w, dtype=np.float64)
    p = 1.0
    pv = [p]
    zs, drifted = [], []
    for k in range(days):
        drifted.append(w_prime)
        out = env.step(p, w_prime, rel[:, h + k], acts[k], rates, tol)
        p = out.end_value
        zs.append(out.log_return)
        pv.append(p)
        w_prime = out.drifted_weights
    return np.array(zs), np.array(pv), np.array(drifted)


def _check_window(window: MarketWindow, h: int):
    if window.n < h + 1:
        raise ValueError(f"backtest window has {window.n} columns, needs at least h + 1 = {h + 1}")


def policy_actions(params: PolicyParams, window: MarketWindow, initial_w=None) -> np.ndarray:
    """Eval-mode daily allocations over a window, via one multi-period pass."""
    h = params.spec.h
    _check_window(window, h)
    m = window.m
    w0 = np.full(m, 1.0 / m) if initial_w is None else initial_w
    feats = window.features()[:, :-1, :]
    rel = window.close()[:, :-1]
    return forward_augmented(params, feats, w0, rel)


def ew_backtest(window: MarketWindow, rates: CommissionRates, h: int, initial_w=None) -> BacktestReport:
    _check_window(window, h)
    m = window.m
    acts = np.full((window.n - h, m), 1.0 / m)
    z, pv, wd = simulate(acts, window.close(), h, rates, initial_w)
    return annualized_metrics(z, pv, acts, wd, None, label="EW")


def backtest(params: PolicyParams, window: MarketWindow, rates: CommissionRates, initial_w=None,
             label: str = "policy", ew: Optional[BacktestReport] = None) -> BacktestReport:
    h = params.spec.h
    acts = policy_actions(params, window, initial_w)
    z, pv, wd = simulate(acts, window.close(), h, rates, initial_w)
    if ew is None:
        ew = ew_backtest(window, rates, h, initial_w)
    return annualized_metrics(z, pv, acts, wd, ew.log_returns, label=label)


def backtest_fn(policy: Callable, window: MarketWindow, rates: CommissionRates, h: int,
                initial_w=None, label: str = "policy") -> BacktestReport:
    """Backtest an arbitrary ``policy(state, prev_weights) -> weights``."""
    _check_window(window, h)
    feats = window.features()
    rel = window.close()
    m = window.m
    w_prime = np.full(m, 1.0 / m) if initial_w is None else np.asarray(initial_w, dtype=np.float64)
    acts = []
    for k in range(window.n - h):
        a = np.asarray(policy(feats[:, k:k + h, :], w_prime), dtype=np.float64)
        acts.append(a)
        w_prime = env.drift(a, rel[:, h + k])
    acts = np.array(acts)
    z, pv, wd = simulate(acts, rel, h, rates, initial_w)
    ew = ew_backtest(window, rates, h, initial_w)
    return annualized_metrics(z, pv, acts, wd, ew.log_returns, label=label)


# ---------------------------------------------------------------------------
# experiment summaries


@dataclass
class ExperimentSummary:
    reports: list
    labels: list = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, metric) is None else getattr(r, metric) for r in self.reports])

    def mean(self) -> dict:
        return {k: float(np.mean(self.values(k))) for k in METRIC_COLUMNS}

    def std(self) -> dict:
        n = len(self.reports)
        return {k: float(np.std(self.values(k), ddof=1)) if n > 1 else 0.0 for k in METRIC_COLUMNS}

    def write_csv(self, path, name: str = "WaveCorr") -> None:
        mean, std = self.mean(), self.std()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "run"] + list(METRIC_TITLES))
            for k, r in enumerate(self.reports):
                run = self.labels[k] if k < len(self.labels) else str(k)
                w.writerow([name, run] + [_fmt(getattr(r, c)) for c in METRIC_COLUMNS])
            w.writerow([name, "mean"] + [_fmt(mean[c]) for c in METRIC_COLUMNS])
            w.writerow([name, "std"] + [_fmt(std[c]) for c in METRIC_COLUMNS])


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def permutation_dispersion(annual_returns: Sequence[float]) -> float:
    a = np.asarray(annual_returns, dtype=np.float64)
    if a.size < 2:
        raise ValueError("need at least two runs")
    return float(a.std(ddof=1))
