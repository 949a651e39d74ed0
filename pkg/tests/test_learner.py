import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjbq.env import make_lqr1d, make_rng, sample_domain
from hjbq.learner import (
    LearningCurve,
    TrainConfig,
    bellman_residual,
    build_target,
    network_policy,
    optimality_monitor,
    policy_direction,
    train,
)
from hjbq.errors import ContractError
from hjbq.odeint import IntegratorConfig, constant_policy
from hjbq.qnet import forward, init_params

CFG = IntegratorConfig(0.05, 5)


def constant_net(c):
    p, _, _ = init_params(1, 1, 0, hidden=(4, 4))
    for a in p.arrays():
        a[...] = 0.0
    p.biases[-1][...] = c
    return p


@pytest.mark.parametrize(
    "grad, M, expected",
    [((3.0, 4.0), 1.0, (-0.6, -0.8)), ((0.0, -5.0), 2.0, (0.0, 2.0))],
)
def test_policy_direction_examples(grad, M, expected):
    out = policy_direction(np.array(grad), M, 1e-12, make_rng(0))
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_policy_direction_random_branch():
    rng = make_rng(0)
    for _ in range(20):
        a = policy_direction(np.zeros(2), 1.0, 1e-12, rng)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)
    assert np.all(policy_direction(np.zeros(3), 0.0, 1e-12, rng) == 0.0)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3),
    st.floats(0.1, 5),
)
def test_policy_direction_minimises_inner_product(grad, M):
    g = np.array(grad)
    if np.linalg.norm(g) <= 1e-12:
        return
    a = policy_direction(g, M, 1e-12, make_rng(0))
    cand = np.random.default_rng(0).standard_normal((1000, 3))
    cand *= M * np.random.default_rng(1).random((1000, 1)) / np.linalg.norm(cand, axis=1, keepdims=True)
    assert g @ a <= np.min(cand @ g) + 1e-9


def test_network_policy_magnitudes():
    env = make_lqr1d(M=1.3)
    p, _, _ = init_params(1, 1, 0)
    Z = sample_domain(env, 500, make_rng(1))
    norms = np.linalg.norm(network_policy(p, env, 1e-12, make_rng(2))(Z), axis=1)
    assert np.all((norms == 0) | (np.abs(norms - 1.3) <= 1e-9))


def test_build_target_examples():
    assert build_target(0.0, np.zeros(2), constant_net(0.0), 0.1, 0.05) == 0.0
    y = build_target(0.1, np.zeros(2), constant_net(2.0), 0.1, 0.05)
    assert y == pytest.approx(0.1 + 2.0 * 0.9950124791926823, rel=1e-15)
    assert build_target(0.3, np.ones(2), constant_net(2.0), 0.0, 0.05) == 2.3
    with pytest.raises(ContractError):
        build_target(np.nan, np.zeros(2), constant_net(0.0), 0.1, 0.05)


def test_bellman_residual_closed_forms(zero_cost_env):
    probe = sample_domain(zero_cost_env, 16, make_rng(0))
    assert bellman_residual(constant_net(0.0), zero_cost_env, probe, 0.5, CFG) == 0.0
    r = bellman_residual(constant_net(3.0), zero_cost_env, probe, 0.5, CFG)
    assert r == pytest.approx(3.0 * (1 - math.exp(-0.05)), rel=1e-12)


def test_optimality_monitor_zero_q_nondecreasing(env1d):
    s, g = optimality_monitor(
        lambda Z: np.zeros(len(Z)), env1d, np.array([1.0, 1.0]), constant_policy([1.0]), 2.0, CFG, 0.1
    )
    assert s[0] == 0 and g[0] == 0
    assert np.all(np.diff(g) >= 0)


def test_train_zero_iterations(env1d):
    res = train(env1d, TrainConfig(N=0))
    p0, _, _ = init_params(1, 1, 0)
    assert np.array_equal(res.params.flat(), p0.flat())
    assert len(res.curve.rows) == 1


def test_train_deterministic(env1d, tmp_path):
    cfg = TrainConfig(N=40, eval_every=10, seed=3)
    a, b = train(env1d, cfg), train(env1d, cfg)
    a.curve.to_csv(tmp_path / "a.csv")
    b.curve.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert np.array_equal(a.params.flat(), b.params.flat())


def test_target_lag_without_optimizer(env1d):
    p, t, adam = init_params(1, 1, 0)
    t2, _, _ = init_params(1, 1, 9)
    before = t2.flat().copy()
    res = train(env1d, TrainConfig(N=1, optimizer_enabled=False, tau=0.01), init=(p, t2, adam))
    assert np.array_equal(res.params.flat(), p.flat())
    np.testing.assert_allclose(res.target.flat(), 0.01 * p.flat() + 0.99 * before, rtol=0, atol=1e-15)


def test_policy_hold_iteration_start(env1d):
    res = train(env1d, TrainConfig(N=5, eval_every=5, policy_hold="iteration_start"))
    assert len(res.curve.rows) == 2


def test_curve_rows_strictly_increase():
    c = LearningCurve()
    c.append(0, 1.0, 1.0, 1.0)
    with pytest.raises(ContractError):
        c.append(0, 1.0, 1.0, 1.0)


def test_train_config_invariants():
    for bad in (dict(K=0), dict(h=0.0), dict(tau=1.5), dict(grad_zero_tol=0.0), dict(N=-1)):
        with pytest.raises(ContractError):
            TrainConfig(**bad)


@pytest.mark.slow
def test_zero_cost_values_contract():
    env = make_lqr1d(cost_scale=0.0, gamma=2.0)
    P = sample_domain(env, 100, make_rng(7))
    p0, _, _ = init_params(1, 1, 0)
    sups = [np.max(np.abs(forward(p0, P)))]
    cfg = TrainConfig(seed=0, N=1000, tau=0.1, eval_every=1000, checkpoint_every=100, eval_T=1.0)
    train(env, cfg, checkpoint_fn=lambda it, p, t, a: sups.append(np.max(np.abs(forward(p, P)))))
    slope = np.polyfit(np.arange(len(sups)), sups, 1)[0]
    assert slope < 0
    assert sups[-1] < 0.5 * sups[0]


@pytest.mark.slow
def test_trained_residual_below_untrained(env1d):
    probe = sample_domain(env1d, 64, make_rng(99))
    p0, _, _ = init_params(1, 1, 0)
    res = train(env1d, TrainConfig(seed=0, eval_every=1000))
    for t_span in (0.05, 0.5, 1.0):
        assert bellman_residual(res.params, env1d, probe, t_span, CFG) < bellman_residual(
            p0, env1d, probe, t_span, CFG
        )
    costs = res.curve.column("eval_cost")
    assert costs[-1] < 0.5 * costs[0]
