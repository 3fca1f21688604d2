"""Property suites behind ``wavecorr verify``.

Each suite draws its own random instances from a seed, checks them, and
returns a :class:`SuiteResult`. The acceptance tests and the CLI both call
these functions so there is one implementation of every check.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import blocks, env
from .blocks import AssetPermutation, CorrSpec, ZhangCorrSpec
from .data import MarketWindow
from .env import CommissionRates
from .policy import (PolicySpec, forward_augmented, forward_policy, forward_sequential, init_params,
                     network_witness)
from .tensor import Tensor3, seed_rng


@dataclass
class Check:
    label: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: list = field(default_factory=list)
    elapsed: float = 0.0
    stats: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)  # wall-clock values, kept out of deterministic reports

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, label: str, passed: bool, detail: str = "") -> None:
        self.checks.append(Check(label, bool(passed), detail))

    def summary(self) -> str:
        bad = [c for c in self.checks if not c.passed]
        head = f"{self.name}: {'PASS' if self.passed else 'FAIL'} ({len(self.checks)} checks, {self.elapsed:.2f}s)"
        if "speedup" in self.timings:
            head += f", speedup {self.timings['speedup']:.2f}x"
        return "\n".join([head] + [f"  failed: {c.label} {c.detail}" for c in bad[:10]])


def _timed(fn: Callable[..., SuiteResult]):
    def run(*args, **kwargs) -> SuiteResult:
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.elapsed = time.perf_counter() - t0
        return res
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def _simplex(rng, m: int) -> np.ndarray:
    return rng.dirichlet(np.ones(m))


# ---------------------------------------------------------------------------
# netting factor


def grid_scan_nu(w_prime, w, rates: CommissionRates, resolution: float = 1e-9) -> float:
    """Root of ``nu - f(nu)`` by nested decimal grid scans, down to ``resolution``."""
    w_prime = np.asarray(w_prime, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    lo, width = 0.0, 1.0
    while width > resolution:
        step = width / 10.0
        grid = lo + step * np.arange(11)
        g = g_on_grid(grid, w_prime, w, rates)
        below = np.nonzero(g <= 0.0)[0]
        k = int(below[-1]) if below.size else 0
        lo, width = lo + k * step, step
    return lo + 0.5 * width


def g_on_grid(grid, w_prime, w, rates: CommissionRates) -> np.ndarray:
    """``nu - f(nu)`` evaluated at every grid point at once."""
    sell = np.maximum(w_prime[None, :] - grid[:, None] * w[None, :], 0.0).sum(axis=1)
    buy = np.maximum(grid[:, None] * w[None, :] - w_prime[None, :], 0.0).sum(axis=1)
    return grid - (1.0 - rates.c_s * sell - rates.c_p * buy)


@_timed
def bisection_suite(n: int = 10_000, seed: int = 0, grid_points: int = 1000) -> SuiteResult:
    """Bracket signs, monotonicity on a grid, and agreement with a grid scan."""
    rng = seed_rng(seed)
    res = SuiteResult("bisection")
    worst = 0.0
    for k in range(n):
        m = int(rng.integers(2, 12))
        wp, w = _simplex(rng, m), _simplex(rng, m)
        rates = CommissionRates(float(rng.uniform(0.0, 0.05)) or 0.05, float(rng.uniform(0.0, 0.05)) or 0.05)
        g0 = env.netting_g(0.0, wp, w, rates)
        if not (abs(g0 - (rates.c_s - 1.0)) < 1e-15 and g0 < 0):
            res.add(f"g(0) instance {k}", False, f"g(0)={g0}")
        g1 = env.netting_g(1.0, wp, w, rates)
        bound = min(rates.c_s, rates.c_p) * np.abs(wp - w).sum()
        if not g1 >= bound - 1e-15:
            res.add(f"g(1) instance {k}", False, f"g(1)={g1} < {bound}")
        grid = np.linspace(0.0, 1.0, grid_points)
        if not np.all(np.diff(g_on_grid(grid, wp, w, rates)) >= 0):
            res.add(f"monotone instance {k}", False)
        nu = env.solve_nu(wp, w, rates)
        ref = grid_scan_nu(wp, w, rates)
        err = abs(nu - ref)
        worst = max(worst, err)
        if err > 1e-8:
            res.add(f"oracle instance {k}", False, f"|nu - scan| = {err:.3g}")
    res.add(f"{n} instances", True, f"max |nu - scan| = {worst:.3g}")
    res.stats["max_error"] = worst
    return res


# ---------------------------------------------------------------------------
# invariance


@_timed
def corr_invariance_suite(n: int = 1000, seed: int = 0, tol: float = 1e-12) -> SuiteResult:
    """Witness identity for the Corr layer and loop/closed-form agreement."""
    rng = seed_rng(seed)
    res = SuiteResult("corr-invariance")
    worst = 0.0
    for k in range(n):
        m, h, d = int(rng.integers(1, 9)), int(rng.integers(1, 17)), int(rng.integers(1, 5))
        spec = CorrSpec(rng.normal(size=(m + 1, d)), float(rng.normal()))
        x = Tensor3(rng.normal(size=(m, h, d)))
        sigma = AssetPermutation.random(m, rng)
        base = blocks.corr_layer(spec, x).data
        wit = blocks.corr_weight_witness(spec, sigma)
        moved = blocks.unpermute_assets(sigma, blocks.corr_layer(wit, blocks.permute_assets(sigma, x))).data
        err = float(np.max(np.abs(moved - base)))
        worst = max(worst, err)
        if err > tol:
            res.add(f"witness instance {k}", False, f"error {err:.3g}")
        if not np.array_equal(blocks.corr_layer_loop(spec, x), blocks.corr_layer_closed(spec, x)):
            res.add(f"loop == closed instance {k}", False)
    res.add(f"{n} instances", True, f"max witness error {worst:.3g}")
    res.stats["max_error"] = worst
    return res


@_timed
def network_invariance_suite(n: int = 100, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    """Witness-permuted network output equals the original output, eval mode."""
    rng = seed_rng(seed)
    res = SuiteResult("network-invariance")
    worst = 0.0
    for k in range(n):
        m = int(rng.integers(2, 9))
        h = int(rng.integers(29, 37))
        d = int(rng.integers(1, 4))
        params = init_params(PolicySpec(m=m, h=h, d=d), int(rng.integers(2**31)))
        for name in params.store:
            # non-zero biases so every term is exercised
            if name.endswith("bias"):
                params.store[name] = rng.normal(scale=0.1, size=params.store[name].shape)
        sigma = AssetPermutation.random(m, rng)
        state = rng.normal(scale=0.02, size=(m, h, d))
        prev = _simplex(rng, m)
        base = forward_policy(params, state, prev)
        moved = forward_policy(network_witness(params, sigma), state[sigma.pi], prev[sigma.pi])[sigma.inverse]
        err = float(np.max(np.abs(moved - base)))
        worst = max(worst, err)
        if err > tol:
            res.add(f"instance {k}", False, f"error {err:.3g}")
    res.add(f"{n} instances", True, f"max error {worst:.3g}")
    res.stats["max_error"] = worst
    return res


# ---------------------------------------------------------------------------
# Zhang counterexample


def _zhang_apply(w: np.ndarray, b: float, x: np.ndarray) -> np.ndarray:
    spec = ZhangCorrSpec(np.asarray(w, dtype=np.float64).reshape(-1, 1, 1), b)
    return blocks.zhang_corr_layer(spec, Tensor3(x.reshape(-1, 1, 1))).data.reshape(-1)


def _conjugated(w_bar: np.ndarray, sigma: AssetPermutation, x: np.ndarray) -> np.ndarray:
    # sigma^-1 . B_{w_bar, 0} . sigma
    return _zhang_apply(w_bar, 0.0, x[sigma.pi])[sigma.inverse]


def derive_zhang_constraints(w_bar: np.ndarray, sigma: AssetPermutation) -> dict:
    """Solve for what any witness (w', b') must satisfy, from the zero probe
    and the two impulse probes, in that order.

    The Zhang layer is affine in (w', b'); each output row of each probe is
    one linear equation. After substituting the bias fixed by the zero probe,
    a row with a single unknown left pins it. Returns a map from unknown index
    (``m`` stands for the bias) to ``(probe, row, value)`` triples, plus the
    key ``"inconsistent"`` listing rows with no unknown left whose equation
    fails.
    """
    m = w_bar.size
    probes = {"zero": np.zeros(m), "e1": np.eye(m)[0], "e2": np.eye(m)[1]}
    forced: dict = {"inconsistent": []}
    known: dict = {}
    for tag, x in probes.items():
        target = _conjugated(w_bar, sigma, x)
        # design matrix: response to each unit weight, then to the bias
        cols = [_zhang_apply(np.eye(m)[j], 0.0, x) for j in range(m)]
        cols.append(_zhang_apply(np.zeros(m), 1.0, x))
        A = np.stack(cols, axis=1)
        pinned = {}
        for row in range(m):
            rhs = target[row] - sum(A[row, j] * v for j, v in known.items())
            free = [j for j in np.nonzero(A[row])[0] if int(j) not in known]
            if len(free) == 1:
                j = int(free[0])
                val = rhs / A[row, j]
                forced.setdefault(j, []).append((tag, row, val))
                pinned.setdefault(j, val)
            elif not free and rhs != 0.0:
                forced["inconsistent"].append((tag, row, rhs))
        if tag == "zero":
            # only the bias carries over, so each impulse probe pins w' on its own
            known.update(pinned)
    return forced


def witness_residual(w_prime, b_prime: float, w_bar: np.ndarray, sigma: AssetPermutation) -> float:
    """Worst-case output mismatch over the zero and unit probes; by linearity
    this bounds the mismatch on every input."""
    m = w_bar.size
    probes = [np.zeros(m)] + [np.eye(m)[i] for i in range(m)]
    return max(float(np.max(np.abs(_zhang_apply(w_prime, b_prime, x) - _conjugated(w_bar, sigma, x))))
               for x in probes)


@_timed
def counterexample_suite(n: int = 100, seed: int = 0, search: int = 2000, floor: float = 1e-3,
                         gap: float = 0.1) -> SuiteResult:
    """Zhang layer, m = 5, swap of the first two assets: no witness exists."""
    rng = seed_rng(seed)
    res = SuiteResult("counterexample")
    m = 5
    sigma = AssetPermutation.swap(m, 0, 1)
    best_overall = math.inf
    for k in range(n):
        while True:
            w_bar = rng.uniform(-1.0, 1.0, size=m)
            if abs(w_bar[3] - w_bar[0]) >= gap:
                break
        forced = derive_zhang_constraints(w_bar, sigma)
        bias_vals = [v for tag, _, v in forced.get(m, []) if tag == "zero"]
        res_b = bool(bias_vals) and all(v == 0.0 for v in bias_vals)
        # unknown index 1 is w'_2 in one-based numbering
        w2 = {tag: v for tag, _, v in forced.get(1, [])}
        ok = res_b and "e1" in w2 and "e2" in w2
        ok = ok and w2["e1"] == w_bar[3] and w2["e2"] == w_bar[0] and abs(w2["e1"] - w2["e2"]) >= gap
        if not ok:
            res.add(f"derivation instance {k}", False, f"bias={bias_vals} w2={w2}")
        # search: least squares fit over probes, then random perturbations
        cands = [(w_bar.copy(), 0.0)]
        probes = [np.zeros(m)] + [np.eye(m)[i] for i in range(m)]
        A = np.vstack([np.stack([_zhang_apply(np.eye(m)[j], 0.0, x) for j in range(m)]
                                + [_zhang_apply(np.zeros(m), 1.0, x)], axis=1) for x in probes])
        y = np.concatenate([_conjugated(w_bar, sigma, x) for x in probes])
        sol = np.linalg.lstsq(A, y, rcond=None)[0]
        cands.append((sol[:m], float(sol[m])))
        best = min(witness_residual(w, b, w_bar, sigma) for w, b in cands)
        centre_w, centre_b = sol[:m], float(sol[m])
        for j in range(search // n if n else search):
            scale = 10.0 ** rng.uniform(-4, 0)
            w = centre_w + rng.normal(scale=scale, size=m)
            b = centre_b + float(rng.normal(scale=scale))
            best = min(best, witness_residual(w, b, w_bar, sigma))
        best_overall = min(best_overall, best)
        if not best >= floor:
            res.add(f"search instance {k}", False, f"residual {best:.3g}")
    res.add(f"{n} instances", True, f"min witness residual {best_overall:.3g}")
    res.stats["min_residual"] = best_overall
    return res


# ---------------------------------------------------------------------------
# multi-period pass


@_timed
def augmented_suite(seed: int = 0, horizons=(1, 2, 8, 32), sizes=(3, 10), tol: float = 1e-10,
                    repeats: int = 5, min_speedup: float = 2.0) -> SuiteResult:
    """Multi-period actions match step-by-step evaluation, and are faster."""
    rng = seed_rng(seed)
    res = SuiteResult("augmented")
    for m in sizes:
        params = init_params(PolicySpec(m=m), int(rng.integers(2**31)))
        h = params.spec.h
        for T in horizons:
            traj = rng.normal(scale=0.02, size=(m, h + T - 1, 1))
            rel = np.exp(traj[:, :, 0])
            w0 = _simplex(rng, m)
            a = forward_augmented(params, traj, w0, rel)
            b = forward_sequential(params, traj, w0, rel)
            err = float(np.max(np.abs(a - b)))
            res.add(f"m={m} T={T}", err <= tol, f"max error {err:.3g}")
    params = init_params(PolicySpec(m=10), 1)
    traj = rng.normal(scale=0.02, size=(10, params.spec.h + 31, 1))
    rel = np.exp(traj[:, :, 0])
    w0 = np.full(10, 0.1)

    def best_time(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(params, traj, w0, rel)
            times.append(time.perf_counter() - t0)
        return min(times)

    t_aug, t_seq = best_time(forward_augmented), best_time(forward_sequential)
    speedup = t_seq / t_aug
    res.timings.update(augmented_s=t_aug, sequential_s=t_seq, speedup=speedup)
    res.add("speedup at m=10 T=32", speedup >= min_speedup, f"at least {min_speedup:g}x required")
    return res


# ---------------------------------------------------------------------------
# gradients


def finite_difference_check(params, objective: Callable[[], float], grads: dict, eps: float = 1e-6,
                            rtol: float = 1e-4, atol: float = 1e-7) -> tuple[list, float, float]:
    """Central differences on every scalar parameter. Returns the failures,
    the worst relative error among entries well above ``atol`` and the worst
    absolute error."""
    failures, worst, worst_abs = [], 0.0, 0.0
    for name in params.store:
        base = params.store[name]
        flat = base.ravel()
        g_an = grads[name].ravel()
        for idx in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[idx] += eps
            dn[idx] -= eps
            params.store[name] = up.reshape(base.shape)
            f_up = objective()
            params.store[name] = dn.reshape(base.shape)
            f_dn = objective()
            params.store[name] = base
            g_fd = (f_up - f_dn) / (2.0 * eps)
            err = abs(g_fd - g_an[idx])
            scale = max(abs(g_fd), abs(g_an[idx]))
            rel = err / scale if scale > 0 else 0.0
            worst_abs = max(worst_abs, err)
            if scale > 100.0 * atol:
                worst = max(worst, rel)
            if err > rtol * scale + atol:
                failures.append((name, idx, g_an[idx], g_fd))
    return failures, worst, worst_abs


@_timed
def gradient_suite(seed: int = 0, m: int = 3, h: int = 29, T: int = 4, rtol: float = 1e-4,
                   w_max: float | None = 0.4) -> SuiteResult:
    """Analytic gradient of the full episode objective against central
    differences, for every parameter, with dropout masks held fixed."""
    from .trainer import EpisodeState, TrainConfig, episode_gradient, episode_objective

    rng = seed_rng(seed)
    res = SuiteResult("gradient")
    params = init_params(PolicySpec(m=m, h=h), seed)
    for name in params.store:
        if name.endswith("bias"):
            params.store[name] = rng.normal(scale=0.05, size=params.store[name].shape)
    xi = np.exp(rng.normal(0.0, 0.02, size=(m, h + T, 1)))
    window = MarketWindow(xi, [f"A{i}" for i in range(m)], ["close"], splits={"train": (0, h + T)})
    cfg = TrainConfig(T=T, h=h, w_max=w_max, penalty=1.0)
    ep = EpisodeState(0, _simplex(rng, m))
    mask_seed = seed + 99

    grads = episode_gradient(params, window, ep, cfg, rng=seed_rng(mask_seed), train=True).grads
    failures, worst, worst_abs = finite_difference_check(
        params, lambda: episode_objective(params, window, ep, cfg, rng=seed_rng(mask_seed), train=True),
        grads, rtol=rtol)
    res.stats.update(parameters=params.store.size(), worst_relative=worst, worst_absolute=worst_abs,
                     failures=len(failures))
    res.add(f"{params.store.size()} parameters", not failures,
            f"worst relative error {worst:.3g}" + (f"; first failure {failures[0]}" if failures else ""))
    return res


SUITES = {
    "bisection": bisection_suite,
    "invariance": None,  # corr + network
    "counterexample": counterexample_suite,
    "augmented": augmented_suite,
    "gradient": gradient_suite,
}


def run_suite(name: str, seed: int = 0, quick: bool = False) -> list:
    """Run a named suite (``all`` runs every one). ``quick`` shrinks the
    instance counts for smoke runs."""
    if name == "all":
        out = []
        for key in SUITES:
            out.extend(run_suite(key, seed, quick))
        return out
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(['all', *SUITES])}")
    if name == "invariance":
        return [corr_invariance_suite(n=100 if quick else 1000, seed=seed),
                network_invariance_suite(n=10 if quick else 100, seed=seed)]
    if name == "bisection":
        return [bisection_suite(n=500 if quick else 10_000, seed=seed)]
    if name == "counterexample":
        return [counterexample_suite(n=20 if quick else 100, seed=seed)]
    if name == "gradient" and quick:
        return [gradient_suite(seed=seed, h=29, T=2)]
    return [SUITES[name](seed=seed)]
