"""Acceptance gate. Each test records a PASS/FAIL line shown in the terminal summary.

Run alone with ``pytest -m acceptance``.
"""

import math

import numpy as np
import pytest

from conftest import record
from oracles import RICCATI_P, fd_gradient, rate_limited_q, rk4_reference
from hjbq.cli import compare_report, main
from hjbq.env import EnvironmentSpec, make_lqr1d, make_random_lqr, make_rng
from hjbq.learner import TrainConfig, default_eval_start, network_policy, optimality_monitor, train
from hjbq.odeint import IntegratorConfig, constant_policy, rollout_step, trajectory_record
from hjbq.oracle import (
    GridSpec,
    SemiLagrangianOperator,
    default_delta,
    greedy_policy,
    interpolate,
    make_rate_set,
    monotonicity_in_M,
    scheme_error_estimate,
    solve_finite,
    solve_infinite,
)
from hjbq.qnet import forward, init_params, input_gradient, mse_loss_and_grads

pytestmark = [pytest.mark.acceptance]

SEEDS = range(5)
GRID201 = GridSpec.box(2, 2.0, 201)


def min_preactivation(params, Z):
    h, low = np.atleast_2d(Z), math.inf
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        pre = h @ w.T + b
        low = min(low, float(np.min(np.abs(pre))))
        h = np.maximum(pre, 0.0)
    return low


@pytest.fixture(scope="module")
def gap1d():
    gap, fine, _ = scheme_error_estimate(make_lqr1d(), GRID201, inner=0.6)
    return gap, fine


@pytest.fixture(scope="module")
def trained1d():
    env = make_lqr1d()
    out = {}
    for seed in SEEDS:
        cfg = TrainConfig(seed=seed, eval_every=1000)
        init = init_params(env.n, env.m, seed)[0]
        out[seed] = (train(env, cfg), init)
    return env, out


def test_1_gradients():
    rng = np.random.default_rng(2024)
    worst_in = worst_par = 0.0
    done = 0
    while done < 100:
        params = init_params(1, 1, int(rng.integers(1 << 30)))[0]
        Z = rng.uniform(-1, 1, (4, 2))
        if min_preactivation(params, Z) < 1e-3:
            continue
        for z in Z:
            fd = fd_gradient(lambda v: forward(params, v), z)
            worst_in = max(worst_in, np.linalg.norm(input_gradient(params, z) - fd) / np.linalg.norm(fd))
        y = rng.normal(size=4)
        _, grads = mse_loss_and_grads(params, Z, y)
        g = np.concatenate([a.ravel() for a in grads])
        flat = params.flat()
        idx = rng.choice(flat.size, 20, replace=False)
        idx = np.concatenate([idx, np.argsort(-np.abs(g))[:5]])
        fd = np.empty(idx.size)
        for k, i in enumerate(idx):
            e = np.zeros_like(flat)
            e[i] = 1e-5
            plus = mse_loss_and_grads(params.with_flat(flat + e), Z, y)[0]
            minus = mse_loss_and_grads(params.with_flat(flat - e), Z, y)[0]
            fd[k] = (plus - minus) / 2e-5
        worst_par = max(worst_par, np.linalg.norm(g[idx] - fd) / np.linalg.norm(fd))
        done += 1
    ok = worst_in <= 1e-4 and worst_par <= 1e-4
    record(1, "gradient finite-difference check", ok,
           f"worst rel err input {worst_in:.2e}, parameters {worst_par:.2e} (limit 1e-4, 100 instances)")
    assert ok


def test_2_integrator_order():
    env = make_lqr1d()
    policy = lambda z: -np.tanh(z[:, :1] + z[:, 1:])  # noqa: E731
    z0 = np.array([1.0, 1.0])
    T = 2.0

    def rhs(y, t):
        return np.array([y[1], -math.tanh(y[0] + y[1])])

    ref = rk4_reference(rhs, z0, T, 4000)
    errs = [np.max(np.abs(rollout_step(env, z0, policy, IntegratorConfig(T, k)).z_end - ref)) for k in (5, 10, 20)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    ok = min(ratios) >= 8.0
    record(2, "RK4 self-convergence", ok, f"error ratios on halving {ratios[0]:.2f}, {ratios[1]:.2f} (need >= 8)")
    assert ok


def test_3_oracle_closed_form():
    env = EnvironmentSpec([[0.0]], [[0.0]], gamma=0.1, M=1.0)
    gap, fine, _ = scheme_error_estimate(env, GRID201, inner=0.6)
    mask = GRID201.inner_mask(0.6)
    pts = GRID201.points()[mask]
    exact = np.array([rate_limited_q(x, u) for x, u in pts])
    err = float(np.max(np.abs(fine.values.ravel()[mask] - exact)))
    ok = fine.converged and err <= 2.0 * gap
    record(3, "oracle vs closed form (f = 0)", ok, f"max err {err:.4f} vs 2 x scheme gap {2 * gap:.4f}")
    assert ok


def test_4_contraction():
    env = make_lqr1d()
    grid = GridSpec.box(2, 2.0, 101)
    rates = make_rate_set(1, env.M)
    delta = default_delta(env, grid, rates)
    op = SemiLagrangianOperator(env, grid, delta, rates)
    rng = make_rng(7)
    worst = 0.0
    for scale in (1e-3, 1.0, 1e3):
        for _ in range(5):
            Q1 = scale * rng.standard_normal(grid.size)
            Q2 = scale * rng.standard_normal(grid.size)
            ratio = np.max(np.abs(op.apply(Q1) - op.apply(Q2))) / np.max(np.abs(Q1 - Q2))
            worst = max(worst, ratio / op.beta)
    ok = worst <= 1.0 + 1e-10
    record(4, "one sweep contracts by e^{-gamma delta}", ok, f"worst ratio / beta = {worst:.12f}")
    assert ok


def test_5_monotone_in_M(gap1d):
    gap, _ = gap1d
    Ms = [0.5, 1.0, 2.0, 4.0]
    sols = monotonicity_in_M(make_lqr1d(), GRID201, Ms)
    rise = max(float(np.max(b.values - a.values)) for a, b in zip(sols[:-1], sols[1:]))
    xs = np.array([-1.0, -0.5, 0.5, 1.0])
    probes = np.column_stack([xs, -RICCATI_P * xs])
    vals = np.array([interpolate(s, probes) for s in sols])
    target = RICCATI_P * xs**2
    decreasing = bool(np.all(np.diff(vals, axis=0) <= gap))
    above = bool(np.all(vals >= target - gap))
    closer = bool(np.all(np.abs(vals[-1] - target) < np.abs(vals[0] - target)))
    ok = all(s.converged for s in sols) and rise <= gap and decreasing and above and closer
    record(5, "monotone in M, approach to P x^2", ok,
           f"max rise {rise:.2e} (tol {gap:.3f}); Q(1,-P) over M = {np.round(vals[:, -1], 4).tolist()} "
           f"vs P = {RICCATI_P:.4f}")
    assert ok


def test_6_terminal_slice():
    env = make_lqr1d()
    grid = GridSpec.box(2, 2.0, 81, time=(1.0, 20))
    sol = solve_finite(env, grid)
    X = grid.points()[:, : env.n]
    exact = np.sum(X**2, axis=1).reshape(grid.shape)
    ok = bool(np.array_equal(sol.values[-1], exact))
    record(6, "terminal slice equals q", ok, f"max |Q(T) - q| = {np.max(np.abs(sol.values[-1] - exact)):.1e}")
    assert ok


def test_7_g_function(gap1d):
    gap, sol = gap1d
    env = make_lqr1d()
    cfg = IntegratorConfig(0.05, 5)
    q = lambda Z: interpolate(sol, Z)  # noqa: E731
    greedy = greedy_policy(sol, env)
    spread = 0.0
    for z0 in ([1.0, 1.0], [-1.0, -1.0], [0.5, -0.5], [-0.8, 0.3], [0.0, 1.0]):
        _, g = optimality_monitor(q, env, np.array(z0), greedy, 10.0, cfg, 0.05)
        spread = max(spread, float(g.max() - g.min()))
    worst_step = math.inf
    for z0 in ([-0.5, -1.0], [-1.0, -1.0], [0.0, -1.0], [0.5, 0.5]):
        _, g = optimality_monitor(q, env, np.array(z0), constant_policy([env.M]), 2.0, cfg, 0.05)
        worst_step = min(worst_step, float(np.min(np.diff(g))))
    ok = spread <= 5.0 * gap and worst_step >= -gap
    record(7, "g constant on greedy paths, non-decreasing for a = +M", ok,
           f"greedy spread {spread:.3f} (tol {5 * gap:.3f}); min step under a=+M {worst_step:.4f} (tol {-gap:.3f})")
    assert ok


@pytest.mark.slow
def test_8_learning_1d(trained1d):
    env, runs = trained1d
    cfg = IntegratorConfig(0.05, 5)
    lines, passed = [], 0
    for seed, (res, _) in runs.items():
        cost = res.curve.column("eval_cost")
        factor = cost[0] / cost[-1]
        pol = network_policy(res.params, env, 1e-12, make_rng(seed, 9))
        tr = trajectory_record(env, np.ones(2), pol, 10.0, cfg, 0.05)
        xe, ue = abs(tr.x[-1, 0]), abs(tr.u[-1, 0])
        good = factor >= 2.0 and xe < 0.2 and ue < 0.2
        passed += good
        lines.append(f"s{seed}: {cost[0]:.3g}->{cost[-1]:.3g} x{factor:.2f} |x|={xe:.2f} |u|={ue:.2f}")
    ok = passed == len(runs)
    record(8, "1D learning (factor >= 2, |x(10)|,|u(10)| < 0.2, 5 seeds)", ok,
           f"{passed}/5 seeds; " + "; ".join(lines))
    assert ok


@pytest.mark.slow
def test_9_learner_vs_oracle(trained1d):
    env, runs = trained1d
    sol = solve_infinite(env, GRID201)
    lines, ok = [], sol.converged
    for seed, (res, init) in runs.items():
        _, after = compare_report(res.params, sol, env, inner=0.5, per_axis=21)
        _, before = compare_report(init, sol, env, inner=0.5, per_axis=21)
        good = after["mean_abs_err"] < before["mean_abs_err"] and after["policy_agreement"] >= 0.8
        ok = ok and good
        lines.append(f"s{seed}: mean err {before['mean_abs_err']:.3f}->{after['mean_abs_err']:.3f}, "
                     f"agree {after['policy_agreement']:.3f}")
    record(9, "learner vs oracle on inner probes", ok, "; ".join(lines))
    assert ok


@pytest.mark.slow
@pytest.mark.parametrize("dim", [10, 20])
def test_10_high_dimensional(dim):
    decreased, lines = 0, []
    for seed in SEEDS:
        env = make_random_lqr(dim, dim, seed)
        cfg = TrainConfig(seed=seed, eval_every=1000, eval_start=tuple(default_eval_start(env, seed)))
        cost = train(env, cfg).curve.column("eval_cost")
        decreased += cost[-1] < cost[0]
        lines.append(f"{cost[0]:.3g}->{cost[-1]:.3g}")
    ok = decreased >= 4
    record(10 + dim / 100, f"n=m={dim} smoke (final < initial on >= 4/5)", ok,
           f"{decreased}/5; " + ", ".join(lines))
    assert ok


def test_11_determinism(tmp_path):
    same = True
    for preset in (["preset=lqr1d", "N=100"], ["preset=lqr_random", "n=10", "m=10", "N=50"]):
        args = ["train", "--seed", "3"] + [a for kv in preset for a in ("--set", kv)]
        tag = preset[0].split("=")[1]
        for run in ("a", "b"):
            assert main(args + ["--out-dir", str(tmp_path / tag / run)]) == 0
        same &= (tmp_path / tag / "a" / "curve.csv").read_bytes() == (tmp_path / tag / "b" / "curve.csv").read_bytes()
    record(11, "byte-identical curve CSV for identical config and seed", same, "lqr1d and 10D presets")
    assert same
