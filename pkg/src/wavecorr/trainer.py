"""Sharpe-ratio policy-gradient training.

One episode = one trajectory of ``T`` decisions. The multi-period pass emits
all actions, the drifted weights feed back into the next step's state, the
approximate rewards go into a trajectory Sharpe ratio, and the whole chain is
differentiated on one tape. Parameters move by ADAM *ascent*.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics
from .data import DataError, MarketWindow
from .env import CommissionRates, reward_approx
from .policy import PolicyParams, rollout
from .tensor import (GradientTape, Tensor3, backward, concat_time, relu, scale, seed_rng, sqrt, square,
                     sub, sum_all)

log = logging.getLogger(__name__)


class DegenerateVarianceError(ArithmeticError):
    """The trajectory returns have (near) zero sample variance."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    decay_rate: float = 0.99999
    min_rate: float = 1e-5
    T: int = 32
    h: int = 32
    max_epochs: int = 5000
    c_s: float = 0.0005
    c_p: float = 0.0005
    seed: int = 0
    w_max: Optional[float] = None
    penalty: float = 1e3
    patience: int = 20
    validate_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sr_eps: float = 1e-12
    f_update: str = "episode"  # or "epoch"
    train_mode: bool = True  # dropout active during training
    asset_keyed_noise: bool = True  # dropout masks follow asset names, not row order

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be at least 2 for a sample standard deviation")
        if self.h < 29:
            raise ValueError("h must be at least 29 (dilated receptive field)")
        if self.f_update not in ("episode", "epoch"):
            raise ValueError("f_update must be 'episode' or 'epoch'")
        CommissionRates(self.c_s, self.c_p)

    @property
    def rates(self) -> CommissionRates:
        return CommissionRates(self.c_s, self.c_p)

    def rate_at(self, step: int) -> float:
        return max(self.min_rate, self.learning_rate * self.decay_rate ** step)


@dataclass
class EpisodeState:
    cursor: int
    w_prime: np.ndarray


# ---------------------------------------------------------------------------
# objective


def sharpe_ratio(returns: Tensor3, eps: float = 1e-12) -> Tensor3:
    """Trajectory Sharpe ratio of a (1, T, 1) or (T, 1, 1)-sized tensor."""
    n = returns.data.size
    if n < 2:
        raise DegenerateVarianceError("need at least two returns")
    mean = scale(sum_all(returns), 1.0 / n)
    dev = sub(returns, mean)
    var = scale(sum_all(square(dev)), 1.0 / (n - 1))
    if not math.sqrt(max(var.item(), 0.0)) > eps:
        raise DegenerateVarianceError(f"sample std {math.sqrt(max(var.item(), 0.0)):.3g} <= {eps}")
    return mean / sqrt(var)


def holding_penalty(actions, w_max: float, weight: float) -> Tensor3:
    """(M / T) * sum_t sum_i max(0, w_t^i - w_max)."""
    T = len(actions)
    total = sum_all(relu(actions[0] - w_max))
    for a in actions[1:]:
        total = total + sum_all(relu(a - w_max))
    return scale(total, weight / T)


def asset_ranks(assets) -> np.ndarray:
    """Rank of each asset name in sorted order (ties keep row order)."""
    order = sorted(range(len(assets)), key=lambda i: str(assets[i]))
    ranks = np.empty(len(assets), dtype=np.int64)
    ranks[order] = np.arange(len(assets))
    return ranks


@dataclass
class EpisodeResult:
    objective: float
    sharpe: float
    grads: dict
    w_prime_next: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray


def _episode_forward(params: PolicyParams, window: MarketWindow, episode: EpisodeState, cfg: TrainConfig,
                     split, rng, train, tape):
    spec = params.spec
    h, T = spec.h, cfg.T
    if train is None:
        train = cfg.train_mode
    xi = window.extract(episode.cursor, h + T, split)
    feats = np.log(xi[:, : h + T - 1, :])
    k = window.channels.index("close") if "close" in window.channels else 0
    rel = xi[:, :, k]
    P = params.store.watch(tape) if tape is not None else params.store.constants()
    rows = asset_ranks(window.assets) if cfg.asset_keyed_noise else None
    actions, prevs = rollout(spec, P, Tensor3(feats), episode.w_prime, rel[:, : h + T - 1], train, rng, rows)
    rewards = [reward_approx(prevs[t], actions[t], rel[:, h + t], cfg.rates) for t in range(T)]
    r = concat_time(rewards)
    sr = sharpe_ratio(r, cfg.sr_eps)
    obj = sr
    if cfg.w_max is not None:
        obj = sub(sr, holding_penalty(actions, cfg.w_max, cfg.penalty))
    if not np.isfinite(obj.item()):
        raise FloatingPointError("non-finite objective")
    return obj, sr, actions, r, rel


def episode_objective(params: PolicyParams, window: MarketWindow, episode: EpisodeState, cfg: TrainConfig,
                      split: Optional[str] = "train", rng=None, train: Optional[bool] = None) -> float:
    """Objective value only (no tape)."""
    return _episode_forward(params, window, episode, cfg, split, rng, train, None)[0].item()


def episode_gradient(params: PolicyParams, window: MarketWindow, episode: EpisodeState, cfg: TrainConfig,
                     split: Optional[str] = "train", rng=None, train: Optional[bool] = None) -> EpisodeResult:
    """Forward + backward over one trajectory starting at ``episode.cursor``
    (relative to ``split``). Gradients are of the objective to *maximise*."""
    tape = GradientTape()
    obj, sr, actions, r, rel = _episode_forward(params, window, episode, cfg, split, rng, train, tape)
    grads = backward(tape, obj)
    for name in params.store:
        grads.setdefault(name, np.zeros_like(params.store[name]))
    last = actions[-1].data.reshape(-1)
    v = rel[:, params.spec.h + cfg.T - 1] * last
    return EpisodeResult(obj.item(), sr.item(), grads, v / v.sum(),
                         np.stack([a.data.reshape(-1) for a in actions]), r.data.reshape(-1))


# ---------------------------------------------------------------------------
# optimiser


class AdamAscent:
    """ADAM on the ascent direction with multiplicative rate decay."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: PolicyParams, grads: dict) -> float:
        cfg = self.cfg
        lr = cfg.rate_at(self.t)
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in params.store:
            g = grads[name]
            if g.shape != params.store[name].shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params.store[name] = params.store[name] + lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        return lr


def sgd_step(params: PolicyParams, grads: dict, cfg: TrainConfig, step_index: int,
             state: Optional[AdamAscent] = None) -> PolicyParams:
    """One ascent step. ``state`` carries ADAM moments between calls; its step
    counter is set to ``step_index`` before updating."""
    if state is None:
        state = AdamAscent(cfg)
    state.t = step_index
    state.step(params, grads)
    return params


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    episodes: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    best_validation_sr: Optional[float] = None
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def write(self, path) -> None:
        with Path(path).open("w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def episode_starts(n_train: int, h: int, T: int) -> list:
    if n_train < h + T:
        raise DataError(f"training split has {n_train} columns, needs at least h + T = {h + T}")
    return list(range(0, n_train - (h + T) + 1, T))


def train(params: PolicyParams, window: MarketWindow, cfg: TrainConfig, log_path=None,
          validation: Optional[str] = "validation") -> tuple[PolicyParams, TrainLog]:
    """Train on ``window``'s ``train`` split; validate on ``validation``.

    Returns the parameters with the best validation Sharpe ratio seen (the
    final parameters when there is no validation split).
    """
    if params.spec.h != cfg.h:
        raise ValueError(f"network built for h={params.spec.h} but config has h={cfg.h}")
    params = params.copy()
    lo, hi = window.splits["train"]
    starts = episode_starts(hi - lo, cfg.h, cfg.T)
    has_val = validation is not None and validation in window.splits
    val_window = window.split(validation) if has_val else None
    rng = seed_rng(cfg.seed + 0x5EED)
    opt = AdamAscent(cfg)
    out = TrainLog()
    m = window.m
    w_prime = np.full(m, 1.0 / m)
    best = None
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        epoch_w0 = w_prime
        srs, norms = [], []
        for start in starts:
            w_in = w_prime if cfg.f_update == "episode" else epoch_w0
            rec = {"epoch": epoch, "cursor": start}
            try:
                res = episode_gradient(params, window, EpisodeState(start, w_in), cfg, "train", rng)
            except DegenerateVarianceError as exc:
                log.info("epoch %d cursor %d skipped: %s", epoch, start, exc)
                rec.update(skipped=True)
                out.episodes.append(rec)
                continue
            gnorm = float(math.sqrt(sum(float((g * g).sum()) for g in res.grads.values())))
            lr = opt.step(params, res.grads)
            w_prime = res.w_prime_next
            srs.append(res.sharpe)
            norms.append(gnorm)
            rec.update(skipped=False, train_sr=res.sharpe, objective=res.objective, lr=lr, grad_norm=gnorm)
            out.episodes.append(rec)
        erec = {
            "epoch": epoch,
            "train_sr": float(np.mean(srs)) if srs else None,
            "validation_sr": None,
            "lr": cfg.rate_at(opt.t),
            "grad_norm": float(np.mean(norms)) if norms else None,
        }
        if has_val and epoch % cfg.validate_every == 0:
            rep = metrics.backtest(params, val_window, cfg.rates)
            erec["validation_sr"] = rep.sharpe
            if best is None or rep.sharpe > best[0]:
                best = (rep.sharpe, epoch, params.copy())
                stale = 0
            else:
                stale += 1
        out.epochs.append(erec)
        if has_val and stale >= cfg.patience:
            out.stopped_early = True
            break
    if best is not None:
        out.best_validation_sr, out.best_epoch = best[0], best[1]
        params = best[2]
    params.meta = {**params.meta, "train_config": asdict(cfg), "best_epoch": out.best_epoch}
    if log_path is not None:
        out.write(log_path)
    return params, out
