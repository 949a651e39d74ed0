"""Continuous-time Q-learning on sampled short rollouts.

Each iteration: build the feedback ``a(z) = -M grad_u Q / |grad_u Q|`` from
the live network, roll K uniformly drawn starts forward for ``h``, regress
``Q(z_i)`` onto ``R_i + e^{-gamma h} Q_target(z_i(h))`` with one Adam step,
then move the target network by ``tau``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .env import as_vector, make_rng, sample_domain
from .errors import ContractError, DivergenceError, TrainingDivergenceError
from .odeint import (
    IntegratorConfig,
    rollout_batch,
    rollout_horizon,
    trajectory_record,
    write_csv,
)
from .qnet import forward, init_params, input_gradient, mse_train_step, soft_update

log = logging.getLogger(__name__)

# rng stream ids under the run seed
_SAMPLES, _EXPLORE, _EVAL, _PROBE = 4, 2, 3, 5


@dataclass
class TrainConfig:
    N: int = 1000
    K: int = 10
    h: float = 0.05
    tau: float = 1e-2
    learning_rate: float = 1e-3
    grad_zero_tol: float = 1e-12
    substeps: int = 5
    seed: int = 0
    eval_every: int = 50
    eval_T: float = 10.0
    eval_start: tuple | None = None
    inner_steps: int = 1
    policy_hold: str = "feedback"  # or "iteration_start"
    probe_count: int = 32
    hidden: tuple = (128, 128)
    checkpoint_every: int = 0
    optimizer_enabled: bool = True  # test hook: False isolates the target update

    def __post_init__(self):
        if self.N < 0 or self.K < 1:
            raise ContractError(f"need N >= 0 and K >= 1, got N={self.N}, K={self.K}")
        if not self.h > 0:
            raise ContractError(f"h must be positive, got {self.h}")
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError(f"tau must lie in [0, 1], got {self.tau}")
        if not self.grad_zero_tol > 0:
            raise ContractError("grad_zero_tol must be positive")
        if self.eval_every < 1 or self.inner_steps < 1:
            raise ContractError("eval_every and inner_steps must be >= 1")
        if self.policy_hold not in ("feedback", "iteration_start"):
            raise ContractError(f"unknown policy_hold {self.policy_hold!r}")

    @property
    def integrator(self):
        return IntegratorConfig(self.h, self.substeps)


@dataclass
class LearningCurve:
    rows: list = field(default_factory=list)

    HEADER = ("iter", "loss", "eval_cost", "bellman_residual")

    def append(self, iteration, loss, eval_cost, residual):
        if self.rows and iteration <= self.rows[-1][0]:
            raise ContractError("learning-curve iterations must increase")
        self.rows.append((int(iteration), float(loss), float(eval_cost), float(residual)))

    def column(self, name):
        return np.array([r[self.HEADER.index(name)] for r in self.rows])

    def to_csv(self, path):
        write_csv(path, self.HEADER, self.rows)


@dataclass
class TrainResult:
    params: object
    target: object
    adam: object
    curve: LearningCurve
    eval_start: np.ndarray


def policy_direction(grad_u, M, grad_zero_tol, rng):
    """Rate of norm ``M`` opposing ``grad_u``; a random direction where the gradient vanishes.

    Accepts one gradient ``(m,)`` or a batch ``(B, m)``.
    """
    if M < 0:
        raise ContractError(f"M must be nonnegative, got {M}")
    g = np.asarray(grad_u, dtype=float)
    G = np.atleast_2d(g)
    norms = np.linalg.norm(G, axis=1)
    out = np.empty_like(G)
    big = norms > grad_zero_tol
    out[big] = -M * G[big] / norms[big, None]
    if np.any(~big):
        d = rng.standard_normal((int(np.sum(~big)), G.shape[1]))
        out[~big] = M * d / np.linalg.norm(d, axis=1, keepdims=True)
    return out[0] if g.ndim == 1 else out


def network_policy(params, env, grad_zero_tol, rng):
    """State feedback from the network's control gradient."""

    def policy(z):
        grad_u = input_gradient(params, z)[..., env.n :]
        return policy_direction(grad_u, env.M, grad_zero_tol, rng)

    return policy


def _held_policy(rates):
    def policy(z):
        return rates

    return policy


def build_target(R, z_end, target_params, gamma, h):
    """``R + e^{-gamma h} Q_target(z_end)``; vectorised over a batch."""
    R = np.asarray(R, dtype=float)
    z_end = np.asarray(z_end, dtype=float)
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(z_end))):
        raise ContractError("non-finite rollout data in target")
    y = R + math.exp(-gamma * h) * forward(target_params, z_end)
    return float(y) if np.ndim(y) == 0 else y


def bellman_residual(params, env, probe, t_span, cfg, rng=None, grad_zero_tol=1e-12):
    """Mean ``|Q(z0) - (cost + e^{-gamma t} Q(z(t)))|`` under the greedy network policy."""
    Z = np.atleast_2d(as_vector(env, probe))
    if Z.shape[0] == 0:
        raise ContractError("probe set is empty")
    rng = make_rng(0, _PROBE) if rng is None else rng
    policy = network_policy(params, env, grad_zero_tol, rng)
    res = rollout_horizon(env, Z, policy, t_span, cfg)
    lhs = forward(params, Z)
    rhs = res.discounted_cost + math.exp(-env.gamma * t_span) * forward(params, res.z_end)
    return float(np.mean(np.abs(lhs - rhs)))


def optimality_monitor(q_eval, env, z0, policy, T_eval, cfg, sample_dt):
    """Samples of ``g(s) = int_0^s e^{-gamma t} r dt + e^{-gamma s} Q(z(s))``.

    ``q_eval`` maps a batch of augmented states to values. Returns ``(s, g)``.
    """
    traj = trajectory_record(env, z0, policy, T_eval, cfg, sample_dt)
    Z = np.column_stack([traj.x, traj.u])
    g = traj.cost + np.exp(-env.gamma * traj.t) * np.asarray(q_eval(Z), dtype=float)
    return traj.t, g


def default_eval_start(env, seed):
    """(1, ..., 1) in one dimension; otherwise one draw from [0, 0.1]^{n+m}."""
    if env.n == 1 and env.m == 1:
        return np.ones(2)
    return 0.1 * make_rng(seed, _EVAL, 0).random(env.dim)


def _evaluate(params, env, cfg, z0, iteration):
    policy = network_policy(params, env, cfg.grad_zero_tol, make_rng(cfg.seed, _EVAL, iteration + 1))
    try:
        return rollout_horizon(env, z0, policy, cfg.eval_T, cfg.integrator).discounted_cost
    except DivergenceError:
        return math.inf


def _residual(params, env, cfg, probe, iteration):
    rng = make_rng(cfg.seed, _PROBE, iteration + 1)
    try:
        return bellman_residual(params, env, probe, cfg.h, cfg.integrator, rng, cfg.grad_zero_tol)
    except DivergenceError:
        return math.inf


def train(env, cfg, checkpoint_fn=None, init=None):
    """Run the Q-learning loop for ``cfg.N`` iterations.

    ``checkpoint_fn(iteration, params, target, adam)`` is called every
    ``cfg.checkpoint_every`` iterations when both are set. ``init`` optionally
    supplies ``(params, target, adam)`` in place of a fresh initialisation.
    A curve row is logged at iteration 0, every ``eval_every`` iterations and
    at ``N``; evaluation divergence is recorded as an infinite cost.
    """
    if init is None:
        params, target, adam = init_params(env.n, env.m, cfg.seed, cfg.hidden, cfg.learning_rate)
    else:
        params, target, adam = init
    z_eval = (
        np.asarray(cfg.eval_start, dtype=float)
        if cfg.eval_start is not None
        else default_eval_start(env, cfg.seed)
    )
    z_eval = as_vector(env, z_eval)
    sample_rng = make_rng(cfg.seed, _SAMPLES)
    explore_rng = make_rng(cfg.seed, _EXPLORE)
    probe = sample_domain(env, cfg.probe_count, make_rng(cfg.seed, _PROBE))
    icfg = cfg.integrator
    discount = math.exp(-env.gamma * cfg.h)

    curve = LearningCurve()
    curve.append(
        0, math.nan, _evaluate(params, env, cfg, z_eval, 0), _residual(params, env, cfg, probe, 0)
    )

    for it in range(1, cfg.N + 1):
        Z = sample_domain(env, cfg.K, sample_rng)
        policy = network_policy(params, env, cfg.grad_zero_tol, explore_rng)
        if cfg.policy_hold == "iteration_start":
            policy = _held_policy(policy(Z))
        try:
            R, Z_end = rollout_batch(env, Z, policy, icfg)
        except DivergenceError as exc:
            raise TrainingDivergenceError(
                f"rollout diverged at iteration {it}: {exc}", it, (params, target, adam)
            ) from exc
        y = R + discount * forward(target, Z_end)

        loss = math.nan
        if cfg.optimizer_enabled:
            for _ in range(cfg.inner_steps):
                try:
                    _, _, step_loss = mse_train_step(params, adam, Z, y)
                except TrainingDivergenceError as exc:
                    exc.iteration, exc.state = it, (params, target, adam)
                    raise
                if math.isnan(loss):
                    loss = step_loss
        soft_update(params, target, cfg.tau)

        if it % cfg.eval_every == 0 or it == cfg.N:
            cost = _evaluate(params, env, cfg, z_eval, it)
            curve.append(it, loss, cost, _residual(params, env, cfg, probe, it))
            log.debug("iter %d loss %.4g eval %.6g", it, loss, cost)
        if checkpoint_fn is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            checkpoint_fn(it, params, target, adam)

    return TrainResult(params, target, adam, curve, z_eval)
