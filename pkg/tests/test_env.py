import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import assert_close_rel, central_diff, tape_grads
from wavecorr import env
from wavecorr.env import CommissionRates, InfeasibleTurnoverError
from wavecorr.tensor import Tensor3
from wavecorr.verify import grid_scan_nu


def simplex(rng, m):
    return rng.dirichlet(np.ones(m))


def test_no_trade_and_zero_rates_give_one():
    w = np.array([0.2, 0.3, 0.5])
    assert env.solve_nu(w, w, CommissionRates(0.01, 0.02)) == 1.0
    assert env.solve_nu(w, np.array([1.0, 0.0, 0.0]), CommissionRates(0.0, 0.0)) == 1.0


def test_full_switch_closed_form():
    nu = env.solve_nu(np.array([1.0, 0.0]), np.array([0.0, 1.0]), CommissionRates(0.005, 0.005))
    assert abs(nu - 0.995 / 1.005) <= 1e-9
    assert abs(nu - 0.9900497512437811) <= 1e-9


def test_small_rebalance_matches_grid_scan():
    wp, w, r = np.array([0.7, 0.3]), np.array([0.5, 0.5]), CommissionRates(0.0005, 0.0005)
    assert abs(env.solve_nu(wp, w, r) - grid_scan_nu(wp, w, r)) <= 1e-8
    # cross-check: the trade sells 0.2*nu-ish of one asset and buys the other, so nu ~ 1 - 0.0005*0.4
    assert abs(env.solve_nu(wp, w, r) - (1 - 0.0005 * 0.4 / (1 + 0.0005 * 0.0))) < 1e-6


@given(m=st.integers(2, 8), seed=st.integers(0, 2**31 - 1),
       cs=st.floats(1e-6, 0.05), cp=st.floats(1e-6, 0.05))
def test_bisection_properties(m, seed, cs, cp):
    rng = np.random.default_rng(seed)
    wp, w = simplex(rng, m), simplex(rng, m)
    rates = CommissionRates(cs, cp)
    assert env.netting_g(0.0, wp, w, rates) == pytest.approx(cs - 1.0, abs=1e-15)
    assert env.netting_g(1.0, wp, w, rates) >= min(cs, cp) * np.abs(wp - w).sum() - 1e-15
    grid = np.linspace(0, 1, 1000)
    g = np.array([env.netting_g(v, wp, w, rates) for v in grid])
    assert np.all(np.diff(g) >= 0)
    tol = 1e-10
    nu = env.solve_nu(wp, w, rates, tol)
    assert abs(nu - env.netting_f(nu, wp, w, rates)) <= tol
    assert abs(nu - grid_scan_nu(wp, w, rates)) <= 1e-8


def test_bisection_step_count():
    assert env.bisection_steps(1e-10) == 34
    assert env.bisection_steps(0.5) == 1


@given(m=st.integers(2, 6), seed=st.integers(0, 2**31 - 1))
def test_environment_permutation_symmetry(m, seed):
    rng = np.random.default_rng(seed)
    wp, w = simplex(rng, m), simplex(rng, m)
    xi = rng.uniform(0.8, 1.2, m)
    pi = rng.permutation(m)
    r = CommissionRates(0.003, 0.002)
    assert env.solve_nu(wp[pi], w[pi], r) == pytest.approx(env.solve_nu(wp, w, r), abs=1e-10)
    assert env.reward_value(wp[pi], w[pi], xi[pi], r) == pytest.approx(env.reward_value(wp, w, xi, r), abs=1e-14)
    assert np.allclose(env.drift(w[pi], xi[pi]), env.drift(w, xi)[pi], atol=1e-15)


def test_step_examples():
    out = env.step(1.0, np.full(3, 1 / 3), np.ones(3), np.full(3, 1 / 3), CommissionRates())
    assert out.nu == 1.0 and out.log_return == 0.0
    out = env.step(2.0, np.array([0.5, 0.5]), np.array([1.1, 0.9]), np.array([0.5, 0.5]), CommissionRates())
    assert np.allclose(out.drifted_weights, [0.55, 0.45], atol=1e-15)
    assert out.end_value == pytest.approx(2.0, abs=1e-15)


def test_reward_examples():
    w = np.array([0.25, 0.75])
    xi = np.array([1.2, 0.9])
    assert env.reward_value(w, w, xi, CommissionRates()) == pytest.approx(math.log(0.975), abs=1e-15)
    assert env.reward_value(np.array([1.0, 0.0]), w, xi, CommissionRates(0, 0)) == pytest.approx(math.log(0.975))
    with pytest.raises(InfeasibleTurnoverError):
        env.reward_value(np.array([1.0, 0.0]), np.array([0.0, 1.0]), xi, CommissionRates(0.6, 0.6))


def test_drift_examples():
    assert np.allclose(env.drift([0.5, 0.5], [2.0, 1.0]), [2 / 3, 1 / 3], atol=1e-15)
    assert np.array_equal(env.drift([1.0, 0.0], [0.3, 7.0]), [1.0, 0.0])
    w = np.array([0.1, 0.6, 0.3])
    assert np.allclose(env.drift(w, np.full(3, 1.07)), w, atol=1e-15)


def test_input_validation():
    with pytest.raises(ValueError):
        env.drift([0.5, 0.6], [1.0, 1.0])
    with pytest.raises(ValueError):
        env.drift([0.5, 0.5], [1.0, 0.0])
    with pytest.raises(ValueError):
        CommissionRates(-0.1, 0.0)


@given(m=st.integers(2, 5), seed=st.integers(0, 2**31 - 1))
def test_reward_gradient_away_from_kinks(m, seed):
    rng = np.random.default_rng(seed)
    wp, w = simplex(rng, m), simplex(rng, m)
    if np.min(np.abs(wp - w)) <= 1e-4:
        return
    xi = rng.uniform(0.9, 1.1, m)
    r = CommissionRates(0.01, 0.02)
    a, b = wp.reshape(m, 1, 1), w.reshape(m, 1, 1)
    g = tape_grads(lambda x, y: env.reward_approx(x, y, xi, r), a, b)
    fd = central_diff(lambda x, y: env.reward_approx(Tensor3(x), Tensor3(y), xi, r).item(), [a, b], step=1e-7)
    for ga, gf in zip(g, fd):
        assert_close_rel(ga, gf, 1e-5, 1e-9)


@given(m=st.integers(2, 5), seed=st.integers(0, 2**31 - 1))
def test_drift_gradient(m, seed):
    rng = np.random.default_rng(seed)
    w = simplex(rng, m).reshape(m, 1, 1)
    xi = rng.uniform(0.8, 1.2, m)
    c = rng.normal(size=(m, 1, 1))
    from wavecorr.tensor import hadamard, sum_all
    (g,) = tape_grads(lambda x: sum_all(hadamard(env.drift_tensor(x, xi), Tensor3(c))), w)
    (fd,) = central_diff(lambda x: float((env.drift_tensor(Tensor3(x), xi).data * c).sum()), [w])
    assert_close_rel(g, fd, 1e-6, 1e-10)


def test_reward_approx_versus_exact_log_return():
    # The approximation is not one-sided: measure both directions and check the
    # gap against |f(1) - f(nu)| <= max(c_s, c_p) * (1 - nu).
    import logging
    rng = np.random.default_rng(0)
    below = above = 0
    first = None
    for _ in range(10_000):
        m = int(rng.integers(2, 9))
        wp, w = simplex(rng, m), simplex(rng, m)
        xi = rng.uniform(0.8, 1.2, m)
        r = CommissionRates(*rng.uniform(0, 0.05, 2))
        approx = env.reward_approx(Tensor3(wp.reshape(m, 1, 1)), Tensor3(w.reshape(m, 1, 1)), xi, r).item()
        nu = env.solve_nu(wp, w, r)
        exact = math.log(nu) + math.log(xi @ w)
        f1 = env.netting_f(1.0, wp, w, r)
        bound = math.log1p(max(r.c_s, r.c_p) * (1 - nu) / min(f1, nu)) + 1e-12
        assert abs(approx - exact) <= bound
        if approx < exact - 1e-12:
            below += 1
            first = first or (wp.round(4).tolist(), w.round(4).tolist(), r, approx - exact)
        above += approx > exact + 1e-12
    logging.getLogger("wavecorr.env").warning(
        "reward_approx below exact log return in %d of 10000 cases, above in %d; first: %s", below, above, first)
    assert below + above > 0
