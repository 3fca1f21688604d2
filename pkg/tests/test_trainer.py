import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import tape_grads
from wavecorr import metrics
from wavecorr.blocks import AssetPermutation
from wavecorr.data import MarketWindow, generate_synthetic, planted_config, to_relatives
from wavecorr.policy import PolicyParams, PolicySpec, init_params, network_witness
from wavecorr.tensor import ParamStore, Tensor3
from wavecorr.trainer import (AdamAscent, DegenerateVarianceError, EpisodeState, TrainConfig, asset_ranks,
                              episode_gradient, episode_objective, episode_starts, holding_penalty,
                              sgd_step, sharpe_ratio, train)


def col(values):
    return Tensor3(np.asarray(values, dtype=np.float64).reshape(1, -1, 1))


def random_window(m, n, seed, vol=0.02):
    rng = np.random.default_rng(seed)
    xi = np.exp(rng.normal(0.0, vol, size=(m, n, 1)))
    return MarketWindow(xi, [f"S{i}" for i in range(m)], ["close"], [], {"train": (0, n)})


def small_params(m, seed=0, h=29):
    return init_params(PolicySpec(m=m, h=h), seed)


def test_sharpe_examples():
    assert sharpe_ratio(col([0.01, 0.02, 0.03])).item() == pytest.approx(2.0, abs=1e-12)
    assert sharpe_ratio(col([0.004, -0.004])).item() == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DegenerateVarianceError):
        sharpe_ratio(col([0.01, 0.01, 0.01]))
    with pytest.raises(DegenerateVarianceError):
        sharpe_ratio(col([0.01]))


@given(a=st.floats(-1, 1), b=st.floats(-1, 1))
def test_sharpe_two_point_antisymmetry(a, b):
    if abs(a - b) < 1e-6:
        return
    s = sharpe_ratio(col([a, b])).item()
    assert sharpe_ratio(col([-a, -b])).item() == pytest.approx(-s, abs=1e-12)
    # two-point closed form: mean / (|a - b| / sqrt 2)
    assert s == pytest.approx((a + b) / 2 / (abs(a - b) / math.sqrt(2)), rel=1e-10, abs=1e-12)


@given(a=st.floats(-1, 1), b=st.floats(-1, 1))
def test_sharpe_gradient_at_two_points(a, b):
    if abs(a - b) < 1e-3:
        return
    (g,) = tape_grads(sharpe_ratio, np.array([a, b]).reshape(1, 2, 1))
    ga, gb = g[0, 0, 0], g[0, 1, 0]
    # SR = (a + b) / (sqrt2 |a - b|): closed-form partials, and zero directional
    # derivative along r itself (SR is scale-free)
    d = math.sqrt(2) * (a - b) * abs(a - b)
    assert ga == pytest.approx(-2 * b / d, rel=1e-9, abs=1e-12)
    assert gb == pytest.approx(2 * a / d, rel=1e-9, abs=1e-12)
    assert a * ga + b * gb == pytest.approx(0.0, abs=1e-9 * (abs(a * ga) + abs(b * gb)) + 1e-12)


def test_holding_penalty_value():
    acts = [Tensor3(np.array([0.5, 0.3, 0.2]).reshape(3, 1, 1)), Tensor3(np.array([0.1, 0.1, 0.8]).reshape(3, 1, 1))]
    expected = 1e3 / 2 * ((0.3 + 0.1) + 0.6)
    assert holding_penalty(acts, 0.2, 1e3).item() == pytest.approx(expected, rel=1e-12)


def test_penalty_shifts_objective_by_its_value():
    win = random_window(3, 80, 1)
    p = small_params(3)
    plain = TrainConfig(h=29, T=8)
    pen = TrainConfig(h=29, T=8, w_max=0.2, penalty=1e3)
    ep = EpisodeState(0, np.full(3, 1 / 3))
    res = episode_gradient(p, win, ep, plain, train=False)
    gap = episode_objective(p, win, ep, plain, train=False) - episode_objective(p, win, ep, pen, train=False)
    expected = 1e3 / 8 * np.maximum(res.actions - 0.2, 0).sum()
    assert gap == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_constant_window_episode_is_skipped():
    xi = np.ones((3, 120, 1))
    win = MarketWindow(xi, ["a", "b", "c"], ["close"], [], {"train": (0, 120)})
    cfg = TrainConfig(h=29, T=8, max_epochs=1, c_s=0.0, c_p=0.0)
    p0 = small_params(3)
    p1, log = train(p0, win, cfg, validation=None)
    assert log.episodes and all(e["skipped"] for e in log.episodes)
    for name in p0.store:
        assert np.array_equal(p0.store[name], p1.store[name])


def test_adam_zero_gradient_keeps_params():
    p = small_params(3)
    before = p.copy()
    opt = AdamAscent(TrainConfig())
    for _ in range(3):
        opt.step(p, {n: np.zeros_like(p.store[n]) for n in p.store})
    for n in p.store:
        assert np.array_equal(before.store[n], p.store[n])


def test_adam_quadratic_reaches_optimum():
    store = ParamStore()
    store.add("x", np.full((1, 1, 1), 3.05))
    p = PolicyParams(PolicySpec(m=3), store)
    opt = AdamAscent(TrainConfig())
    for _ in range(5000):
        opt.step(p, {"x": -2.0 * (p.store["x"] - 3.0)})
    assert abs(p.store["x"].item() - 3.0) <= 1e-6


@given(k=st.integers(0, 10**7))
def test_rate_schedule_monotone_and_floored(k):
    cfg = TrainConfig()
    assert cfg.min_rate <= cfg.rate_at(k + 1) <= cfg.rate_at(k) <= cfg.learning_rate
    assert cfg.rate_at(0) == cfg.learning_rate


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(T=1)
    with pytest.raises(ValueError):
        TrainConfig(h=20)
    with pytest.raises(ValueError):
        TrainConfig(c_s=1.5)


def test_episode_starts_cover_train_split():
    assert episode_starts(100, 29, 8) == [0, 8, 16, 24, 32, 40, 48, 56]
    assert episode_starts(37, 29, 8) == [0]


def test_asset_ranks():
    assert asset_ranks(["b", "c", "a"]).tolist() == [1, 2, 0]


@pytest.mark.parametrize("train_mode", [False, True])
def test_sgd_step_commutes_with_permutation(train_mode):
    m = 4
    win = random_window(m, 60, 3)
    cfg = TrainConfig(h=29, T=8, learning_rate=1e-3, min_rate=1e-6)
    sigma = AssetPermutation(np.array([2, 0, 3, 1]))
    p = small_params(m, 5)
    q = network_witness(p, sigma)
    w0 = np.array([0.1, 0.2, 0.3, 0.4])
    ra = episode_gradient(p, win, EpisodeState(0, w0), cfg, rng=np.random.default_rng(9), train=train_mode)
    rb = episode_gradient(q, win.permute(sigma), EpisodeState(0, w0[sigma.pi]), cfg,
                          rng=np.random.default_rng(9), train=train_mode)
    assert ra.sharpe == pytest.approx(rb.sharpe, abs=1e-10)
    np.testing.assert_allclose(rb.actions, ra.actions[:, sigma.pi], atol=1e-10)
    pa = sgd_step(p.copy(), ra.grads, cfg, 0)
    pb = sgd_step(q.copy(), rb.grads, cfg, 0)
    expect = network_witness(pa, sigma)
    for n in pb.store:
        np.testing.assert_allclose(pb.store[n], expect.store[n], atol=1e-8, rtol=0)


def test_training_is_deterministic():
    win = random_window(3, 140, 4).with_splits((0.7, 0.3, 0.0), ("train", "validation", "test"))
    cfg = TrainConfig(h=29, T=8, max_epochs=3, validate_every=1, seed=2, learning_rate=1e-3)
    a, la = train(small_params(3, 1), win, cfg)
    b, lb = train(small_params(3, 1), win, cfg)
    assert la.epochs == lb.epochs and la.episodes == lb.episodes
    for n in a.store:
        assert np.array_equal(a.store[n], b.store[n])


def test_training_learns_planted_signal():
    win = to_relatives(generate_synthetic(planted_config(m=5, days=900, seed=3))).with_splits()
    cfg = TrainConfig(learning_rate=1e-3, decay_rate=1.0, min_rate=1e-6, max_epochs=15, validate_every=5,
                      patience=1000, seed=0)
    p, log = train(init_params(PolicySpec(m=5), 0), win, cfg)
    val = win.split("validation")
    ew = metrics.ew_backtest(val, cfg.rates, 32)
    assert log.best_validation_sr == pytest.approx(metrics.backtest(p, val, cfg.rates).sharpe, abs=1e-12)
    assert log.best_validation_sr > ew.sharpe
