"""Price tables, price relatives, chronological splits and a correlated GBM
generator.

CSV layout: first column ``date`` (ISO-8601), then one column per asset
(``<asset>``) or per asset and channel (``<asset>:<channel>`` with channel in
close/open/high/low). Every cell must hold a positive price.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .blocks import AssetPermutation

CHANNELS = ("close", "open", "high", "low")
TRADING_DAYS = 252


class DataError(ValueError):
    """Malformed or unusable market data."""


@dataclass
class PriceTable:
    dates: list
    assets: list
    channels: list
    values: np.ndarray  # (N, m, c)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n, m, c = self.values.shape
        if len(self.dates) != n or len(self.assets) != m or len(self.channels) != c:
            raise DataError("table labels do not match the value array")
        for a, b in zip(self.dates, self.dates[1:]):
            if not a < b:
                raise DataError(f"dates not strictly increasing at {b}")
        if not np.all(self.values > 0):
            raise DataError("prices must be positive")

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def permute(self, sigma: AssetPermutation) -> "PriceTable":
        return PriceTable(list(self.dates), [self.assets[i] for i in sigma.pi], list(self.channels),
                          self.values[:, sigma.pi, :])


def _parse_header(header: Sequence[str], path) -> tuple[list, list, list]:
    if not header or header[0].strip() != "date":
        raise DataError(f"{path}: first column must be 'date'")
    assets, channels, cols = [], [], []
    for col in header[1:]:
        name, _, ch = col.strip().partition(":")
        ch = ch or "close"
        if ch not in CHANNELS:
            raise DataError(f"{path}: unknown channel {ch!r} in column {col!r}")
        if name not in assets:
            assets.append(name)
        if ch not in channels:
            channels.append(ch)
        cols.append((name, ch))
    if len(set(cols)) != len(cols):
        raise DataError(f"{path}: duplicate column in header")
    if len(cols) != len(assets) * len(channels):
        raise DataError(f"{path}: every asset needs the same set of channels")
    channels.sort(key=CHANNELS.index)
    return assets, channels, cols


def load_csv(path) -> PriceTable:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    assets, channels, cols = _parse_header(rows[0], path)
    a_idx = {a: i for i, a in enumerate(assets)}
    c_idx = {c: i for i, c in enumerate(channels)}
    dates, seen = [], set()
    values = np.empty((len(rows) - 1, len(assets), len(channels)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(cols) + 1:
            raise DataError(f"{path}:{r}: expected {len(cols) + 1} fields, got {len(row)}")
        try:
            day = dt.date.fromisoformat(row[0].strip())
        except ValueError:
            raise DataError(f"{path}:{r}: bad date {row[0]!r}") from None
        if day in seen:
            raise DataError(f"{path}:{r}: duplicate date {day}")
        seen.add(day)
        dates.append(day)
        for (name, ch), cell in zip(cols, row[1:]):
            where = f"{path}:{r}: column {name}:{ch}"
            if cell.strip() == "":
                raise DataError(f"{where}: missing price")
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{where}: not a number {cell!r}") from None
            if not v > 0 or not np.isfinite(v):
                raise DataError(f"{where}: non-positive or non-finite price {cell!r}")
            values[r - 2, a_idx[name], c_idx[ch]] = v
    return PriceTable(dates, assets, channels, values)


def write_csv(table: PriceTable, path) -> None:
    single = table.channels == ["close"]
    header = ["date"]
    for a in table.assets:
        for c in table.channels:
            header.append(a if single else f"{a}:{c}")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for day, vals in zip(table.dates, table.values):
            w.writerow([day.isoformat()] + [repr(float(v)) for v in vals.reshape(-1)])


# ---------------------------------------------------------------------------
# relatives and splits


@dataclass
class MarketWindow:
    """Gross relatives ``xi[i, t, k] = p_t / p_{t-1}`` plus split boundaries.

    ``splits`` maps a split name to a half-open column range.
    """

    xi: np.ndarray  # (m, N, d)
    assets: list
    channels: list
    dates: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.float64)
        if self.xi.ndim != 3:
            raise DataError("relatives must be (m, N, d)")
        if not np.all(self.xi > 0):
            raise DataError("relatives must be positive")

    @property
    def m(self) -> int:
        return self.xi.shape[0]

    @property
    def n(self) -> int:
        return self.xi.shape[1]

    @property
    def d(self) -> int:
        return self.xi.shape[2]

    def features(self) -> np.ndarray:
        """Network input: log relatives, no rolling normalisation."""
        return np.log(self.xi)

    def close(self) -> np.ndarray:
        """(m, N) close-price relatives used by the environment."""
        k = self.channels.index("close") if "close" in self.channels else 0
        return self.xi[:, :, k]

    def split(self, name: str) -> "MarketWindow":
        lo, hi = self.splits[name]
        return MarketWindow(self.xi[:, lo:hi], list(self.assets), list(self.channels),
                            list(self.dates[lo:hi]) if self.dates else [], {"all": (0, hi - lo)})

    def with_splits(self, fractions=(0.6, 0.2, 0.2), names=("train", "validation", "test")) -> "MarketWindow":
        return MarketWindow(self.xi, self.assets, self.channels, self.dates,
                            chronological_splits(self.n, fractions, names))

    def extract(self, start: int, length: int, split: Optional[str] = None) -> np.ndarray:
        """Columns ``[start, start + length)``; with ``split`` the range is
        relative to that split and must stay inside it."""
        lo, hi = self.splits[split] if split else (0, self.n)
        if start < 0 or lo + start + length > hi:
            raise DataError(f"window [{start}, {start + length}) leaves split {split or 'all'} of length {hi - lo}")
        return self.xi[:, lo + start: lo + start + length]

    def permute(self, sigma: AssetPermutation) -> "MarketWindow":
        return MarketWindow(self.xi[sigma.pi], [self.assets[i] for i in sigma.pi], list(self.channels),
                            list(self.dates), dict(self.splits))


def chronological_splits(n: int, fractions=(0.6, 0.2, 0.2), names=("train", "validation", "test")) -> dict:
    if len(fractions) != len(names) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("split fractions must sum to 1, one per name")
    out, lo = {}, 0
    for k, (name, f) in enumerate(zip(names, fractions)):
        hi = n if k == len(names) - 1 else lo + int(round(f * n))
        out[name] = (lo, hi)
        lo = hi
    return out


def to_relatives(table: PriceTable) -> MarketWindow:
    if table.values.shape[0] < 2:
        raise DataError("need at least two dates for relatives")
    v = table.values
    xi = (v[1:] / v[:-1]).transpose(1, 0, 2)
    return MarketWindow(np.ascontiguousarray(xi), list(table.assets), list(table.channels), list(table.dates[1:]))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    """Correlated geometric Brownian motion with optional lead-lag pairs.

    ``lead_lag`` holds ``(leader, follower, coefficient)`` triples: the
    follower's standardised shock mixes in the leader's previous-day shock
    with weight ``coefficient``; each follower is then rescaled by
    ``sqrt(1 + sum of its squared coefficients)``. ``cash``
    appends a constant-price asset.
    """

    m: int = 10
    days: int = 2000
    mu: Sequence[float] | float = 0.05
    sigma: Sequence[float] | float = 0.2
    corr: Optional[np.ndarray] = None
    seed: int = 0
    lead_lag: list = field(default_factory=list)
    cash: bool = False
    dt: float = 1.0 / TRADING_DAYS
    start: str = "2000-01-03"

    def vectors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mu = np.broadcast_to(np.asarray(self.mu, dtype=np.float64), (self.m,)).copy()
        sig = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), (self.m,)).copy()
        c = np.eye(self.m) if self.corr is None else np.asarray(self.corr, dtype=np.float64)
        return mu, sig, c

    def manifest(self) -> dict:
        mu, sig, c = self.vectors()
        return {
            "generator": "correlated-gbm",
            "m": self.m, "days": self.days, "seed": self.seed, "dt": self.dt,
            "mu": mu.tolist(), "sigma": sig.tolist(), "corr": c.tolist(),
            "lead_lag": [{"leader": int(a), "follower": int(b), "coefficient": float(k)} for a, b, k in self.lead_lag],
            "cash": self.cash, "start": self.start,
        }


def market_lag_pairs(n: int, coefficient: float) -> list:
    """Every asset leads every other asset by one day with the same weight."""
    return [(i, j, coefficient) for i in range(n) for j in range(n) if i != j]


def planted_config(m: int = 10, days: int = 2000, seed: int = 0, coefficient: float = 0.15) -> SynthConfig:
    """``m - 1`` risky assets with a one-day market lag, plus a cash asset.

    Yesterday's aggregate shock predicts today's risky returns, so a policy
    can time the split between the risky block and cash.
    """
    if m < 3:
        raise DataError("planted dataset needs at least two risky assets plus cash")
    return SynthConfig(m=m - 1, days=days, seed=seed, lead_lag=market_lag_pairs(m - 1, coefficient), cash=True)


def _checked_cholesky(c: np.ndarray) -> np.ndarray:
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DataError("correlation matrix must be square")
    if not np.allclose(c, c.T, atol=1e-12):
        raise DataError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(c), 1.0, atol=1e-12):
        raise DataError("correlation matrix must have a unit diagonal")
    vals, vecs = np.linalg.eigh(c)
    if vals.min() < -1e-10:
        raise DataError(f"correlation matrix is not PSD (min eigenvalue {vals.min():.3g})")
    # eigen route tolerates singular PSD matrices
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _business_days(start: str, n: int) -> list:
    day = dt.date.fromisoformat(start)
    out = []
    while len(out) < n:
        if day.weekday() < 5:
            out.append(day)
        day += dt.timedelta(days=1)
    return out


def generate_synthetic(cfg: SynthConfig) -> PriceTable:
    mu, sig, c = cfg.vectors()
    if c.shape != (cfg.m, cfg.m):
        raise DataError(f"correlation matrix must be {cfg.m}x{cfg.m}")
    L = _checked_cholesky(c)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.days
    eps = rng.standard_normal((n, cfg.m)) @ L.T
    shocks = eps.copy()
    loading = np.zeros(cfg.m)
    for leader, follower, k in cfg.lead_lag:
        if leader == follower or not (0 <= leader < cfg.m and 0 <= follower < cfg.m):
            raise DataError(f"bad lead-lag pair ({leader}, {follower})")
        shocks[1:, follower] += k * eps[:-1, leader]
        loading[follower] += k * k
    shocks /= np.sqrt(1.0 + loading)
    logret = (mu - 0.5 * sig ** 2) * cfg.dt + sig * np.sqrt(cfg.dt) * shocks
    logp = np.vstack([np.zeros((1, cfg.m)), np.cumsum(logret, axis=0)])[:n]
    prices = 100.0 * np.exp(logp)
    assets = [f"A{i:02d}" for i in range(cfg.m)]
    if cfg.cash:
        prices = np.hstack([prices, np.full((n, 1), 100.0)])
        assets.append("CASH")
    return PriceTable(_business_days(cfg.start, n), assets, ["close"], prices[:, :, None])


def write_manifest(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
