"""Portfolio evolution with proportional transaction costs.

Conventions: ``w_prime`` is the drifted (pre-rebalance) weight vector, ``w``
the target after rebalancing, ``xi`` gross price relatives. The netting factor
``nu`` is the fraction of value left after paying commissions; it solves
``nu = f(nu)`` with

    f(nu) = 1 - c_s * sum((w' - nu w)^+) - c_p * sum((nu w - w')^+)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor3, apply

SIMPLEX_TOL = 1e-9


class InfeasibleTurnoverError(ValueError):
    """Commission on the requested turnover would consume the whole portfolio."""


@dataclass(frozen=True)
class CommissionRates:
    c_s: float = 0.0005
    c_p: float = 0.0005

    def __post_init__(self):
        for name in ("c_s", "c_p"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")

    @classmethod
    def flat(cls, rate: float) -> "CommissionRates":
        return cls(rate, rate)

    @property
    def zero(self) -> bool:
        return self.c_s == 0.0 and self.c_p == 0.0


@dataclass(frozen=True)
class StepOutcome:
    nu: float
    log_return: float
    end_value: float
    drifted_weights: np.ndarray


def check_simplex(w, name: str = "weights") -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size == 0 or np.any(w < -SIMPLEX_TOL) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{name} not on the simplex: sum={w.sum():.12g}, min={w.min():.3g}")
    return w


def _check_relatives(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64).reshape(-1)
    if np.any(~(xi > 0)):
        raise ValueError("price relatives must be strictly positive")
    return xi


def netting_f(nu: float, w_prime: np.ndarray, w: np.ndarray, rates: CommissionRates) -> float:
    sell = np.maximum(w_prime - nu * w, 0.0).sum()
    buy = np.maximum(nu * w - w_prime, 0.0).sum()
    return 1.0 - rates.c_s * sell - rates.c_p * buy


def netting_g(nu: float, w_prime, w, rates: CommissionRates) -> float:
    return nu - netting_f(nu, w_prime, w, rates)


def bisection_steps(tol: float) -> int:
    return max(0, math.ceil(math.log2(1.0 / tol)))


def solve_nu(w_prime, w, rates: CommissionRates, tol: float = 1e-10) -> float:
    """Netting factor by bisection of ``g(nu) = nu - f(nu)`` on [0, 1].

    ``g`` is increasing with ``g(0) = c_s - 1 < 0``; the bracket is halved
    until its width is at most ``tol`` and the midpoint is returned.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    w_prime = check_simplex(w_prime, "w_prime")
    w = check_simplex(w, "w")
    if w_prime.shape != w.shape:
        raise ValueError("weight vectors differ in length")
    if rates.zero or np.array_equal(w_prime, w):
        return 1.0
    if netting_g(1.0, w_prime, w, rates) <= 0.0:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(bisection_steps(tol)):
        mid = 0.5 * (lo + hi)
        if netting_g(mid, w_prime, w, rates) > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def drift(w, xi) -> np.ndarray:
    """Weights after one period of price moves, renormalised onto the simplex."""
    w = check_simplex(w)
    xi = _check_relatives(xi)
    v = xi * w
    return v / v.sum()


def step(p_prev: float, w_prev, xi, w_new, rates: CommissionRates, tol: float = 1e-10) -> StepOutcome:
    """Rebalance from ``w_prev`` (drifted weights, value ``p_prev``) to
    ``w_new`` and hold through one period of relatives ``xi``.

    ``log_return`` is ``ln nu + ln(xi . w_new)``, i.e. the log change of the
    end-of-period value; ``end_value`` is the new end-of-period value.
    """
    xi = _check_relatives(xi)
    w_new = check_simplex(w_new, "w_new")
    nu = solve_nu(w_prev, w_new, rates, tol)
    growth = float(xi @ w_new)
    v = xi * w_new
    return StepOutcome(
        nu=nu,
        log_return=math.log(nu) + math.log(growth),
        end_value=p_prev * nu * growth,
        drifted_weights=v / v.sum(),
    )


def reward_value(w_prime, w, xi_next, rates: CommissionRates) -> float:
    """Approximate log return ``ln f(1, w', w) + ln(xi . w)`` on plain arrays."""
    w_prime = np.asarray(w_prime, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    xi_next = _check_relatives(xi_next)
    cost = netting_f(1.0, w_prime, w, rates)
    if cost <= 0.0:
        raise InfeasibleTurnoverError(f"f(1) = {cost:.6g} <= 0")
    return math.log(cost) + math.log(float(xi_next @ w))


# ---------------------------------------------------------------------------
# tape-aware versions used during training; weights are (m, 1, 1) tensors


def reward_approx(w_prime: Tensor3, w: Tensor3, xi_next, rates: CommissionRates) -> Tensor3:
    """Differentiable approximate reward; subgradient 0 at the (.)^+ kinks."""
    wp = w_prime.data.reshape(-1)
    wn = w.data.reshape(-1)
    xi = _check_relatives(xi_next)
    diff = wp - wn
    sell = diff > 0
    buy = diff < 0
    cost = 1.0 - rates.c_s * diff[sell].sum() + rates.c_p * diff[buy].sum()
    if cost <= 0.0:
        raise InfeasibleTurnoverError(f"f(1) = {cost:.6g} <= 0")
    growth = float(xi @ wn)
    value = math.log(cost) + math.log(growth)
    shape = w.shape

    def vjp(g):
        s = g[0, 0, 0]
        dcost_dwp = (-rates.c_s * sell + rates.c_p * buy) / cost
        gwp = (s * dcost_dwp).reshape(shape)
        gw = (s * (-dcost_dwp + xi / growth)).reshape(shape)
        return gwp, gw

    return apply("reward", np.full((1, 1, 1), value), (w_prime, w), vjp)


def drift_tensor(w: Tensor3, xi) -> Tensor3:
    xi = _check_relatives(xi)
    wd = w.data.reshape(-1)
    s = float(xi @ wd)
    out = xi * wd / s
    shape = w.shape

    def vjp(g):
        gv = g.reshape(-1)
        return ((xi / s) * (gv - gv @ out)).reshape(shape),

    return apply("drift", out.reshape(shape), (w,), vjp)
