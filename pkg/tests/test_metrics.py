import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wavecorr import env, metrics
from wavecorr.blocks import AssetPermutation
from wavecorr.data import MarketWindow
from wavecorr.env import CommissionRates
from wavecorr.policy import PolicySpec, init_params, network_witness


def window(m, n, seed, vol=0.02):
    rng = np.random.default_rng(seed)
    xi = np.exp(rng.normal(0.0003, vol, size=(m, n, 1)))
    return MarketWindow(xi, [f"S{i}" for i in range(m)], ["close"])


def brute_mdd(pv):
    best = 0.0
    for j in range(len(pv)):
        for i in range(j + 1):
            best = max(best, (pv[i] - pv[j]) / pv[i])
    return best


def test_drawdown_examples():
    assert metrics.max_drawdown([1, 1.2, 0.9, 1.1]) == pytest.approx(0.25, abs=1e-15)
    assert metrics.max_drawdown([1, 1.1, 1.3, 2.0]) == 0.0


@given(seed=st.integers(0, 10**6), n=st.integers(2, 40))
def test_drawdown_matches_brute_force(seed, n):
    pv = np.exp(np.cumsum(np.random.default_rng(seed).normal(0, 0.05, n)))
    assert metrics.max_drawdown(pv) == pytest.approx(brute_mdd(pv), abs=1e-12)


def test_sharpe_value_cases():
    assert metrics.sharpe_value([0.01, 0.02, 0.03]) == (pytest.approx(2.0), False)
    assert metrics.sharpe_value([0.1, 0.1]) == (0.0, True)
    assert np.std([0.1, 0.2], ddof=1) == pytest.approx(0.0707106781, abs=1e-9)


def test_no_rebalance_has_zero_turnover():
    w = np.array([[0.5, 0.5], [0.3, 0.7]])
    rep = metrics.annualized_metrics([0.01, -0.01], [1.0, math.e ** 0.01, 1.0], w, w)
    assert rep.turnover == 0.0
    assert rep.annual_return == pytest.approx(0.0, abs=1e-15)


def test_turnover_is_half_l1():
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    wd = np.array([[0.0, 1.0], [0.0, 1.0]])
    rep = metrics.annualized_metrics([0.01, 0.02], [1.0, 1.01, 1.03], w, wd)
    assert rep.turnover == pytest.approx(0.5)


def test_simulation_matches_step_loop():
    win = window(3, 60, 1)
    rng = np.random.default_rng(0)
    acts = rng.dirichlet(np.ones(3), size=60 - 29)
    rates = CommissionRates(0.002, 0.003)
    z, pv, wd = metrics.simulate(acts, win.close(), 29, rates)
    w_prev, p = np.full(3, 1 / 3), 1.0
    for k, a in enumerate(acts):
        nu = env.solve_nu(w_prev, a, rates)
        growth = float(win.close()[:, 29 + k] @ a)
        p_new = p * nu * growth
        assert z[k] == pytest.approx(math.log(nu * growth), abs=1e-12)
        assert pv[k + 1] == pytest.approx(p_new, rel=1e-9)
        w_prev = a * win.close()[:, 29 + k] / growth
        p = p_new
    # telescoping: value equals the exponentiated sum of log returns
    assert pv[-1] == pytest.approx(math.exp(z.sum()), rel=1e-10)


def test_equal_weight_with_constant_prices_is_degenerate():
    win = MarketWindow(np.ones((3, 50, 1)), ["a", "b", "c"], ["close"])
    rep = metrics.ew_backtest(win, CommissionRates(), 29)
    assert rep.degenerate and rep.sharpe == 0.0 and rep.annual_return == 0.0 and rep.mdd == 0.0


def test_single_asset_policy_holds_it():
    win = window(1, 50, 2)
    p = init_params(PolicySpec(m=1, h=29), 0)
    rep = metrics.backtest(p, win, CommissionRates())
    assert np.allclose(rep.weights, 1.0) and rep.turnover == 0.0
    assert rep.pv_series[-1] == pytest.approx(np.prod(win.close()[0, 29:]), rel=1e-12)


def test_hit_rate_compares_with_equal_weight():
    win = window(3, 70, 5)
    p = init_params(PolicySpec(m=3, h=29), 1)
    ew = metrics.ew_backtest(win, CommissionRates(), 29)
    rep = metrics.backtest(p, win, CommissionRates(), ew=ew)
    assert rep.daily_hit_rate == pytest.approx(np.mean(rep.log_returns > ew.log_returns))


def test_metrics_invariant_under_witness_permutation():
    win = window(4, 80, 6)
    p = init_params(PolicySpec(m=4, h=29), 3)
    sigma = AssetPermutation(np.array([3, 1, 0, 2]))
    a = metrics.backtest(p, win, CommissionRates(0.001, 0.001))
    b = metrics.backtest(network_witness(p, sigma), win.permute(sigma), CommissionRates(0.001, 0.001))
    for k in metrics.METRIC_COLUMNS:
        assert getattr(b, k) == pytest.approx(getattr(a, k), abs=1e-10)


def test_backtest_fn_agrees_with_network_pass():
    from wavecorr.policy import forward_policy
    win = window(3, 50, 7)
    p = init_params(PolicySpec(m=3, h=29), 2)
    a = metrics.backtest(p, win, CommissionRates())
    b = metrics.backtest_fn(lambda s, w: forward_policy(p, s, w), win, CommissionRates(), 29)
    np.testing.assert_allclose(b.log_returns, a.log_returns, atol=1e-10)


def test_short_window_rejected():
    with pytest.raises(ValueError):
        metrics.ew_backtest(window(2, 29, 0), CommissionRates(), 29)


def test_summary_csv_layout(tmp_path):
    win = window(3, 60, 8)
    reps = [metrics.ew_backtest(win, CommissionRates(c, c), 29) for c in (0.0, 0.001)]
    s = metrics.ExperimentSummary(reps, ["r0", "r1"])
    s.write_csv(tmp_path / "s.csv")
    rows = list(csv.reader((tmp_path / "s.csv").open()))
    assert rows[0] == ["model", "run", "Annual return", "Annual vol", "SR", "MDD", "Daily hit rate", "Turnover"]
    assert [r[1] for r in rows[1:]] == ["r0", "r1", "mean", "std"]
    assert rows[1][6] == ""  # no hit rate for the benchmark itself
    assert float(rows[3][2]) == pytest.approx(np.mean([r.annual_return for r in reps]))


def test_dispersion():
    assert metrics.permutation_dispersion([0.1, 0.2]) == pytest.approx(0.0707106781, abs=1e-9)
    with pytest.raises(ValueError):
        metrics.permutation_dispersion([0.1])


def test_report_json(tmp_path):
    rep = metrics.ew_backtest(window(2, 40, 1), CommissionRates(), 29)
    rep.write(tmp_path / "r.json", tmp_path / "pv.csv")
    import json
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["schema"] == metrics.REPORT_SCHEMA and d["days"] == 11
    assert len((tmp_path / "pv.csv").read_text().splitlines()) == 13
