"""Fixed-step RK4 integration of the augmented system z' = (A x + B u, a).

The discounted running cost is carried as one extra ODE component so that the
cost integral and the end state share the same integrator accuracy. Policies
are callables mapping a batch of augmented states ``(B, n + m)`` to control
rates ``(B, m)``; they are queried at every RK4 stage.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .env import as_vector, dynamics_eval, running_cost
from .errors import ContractError, DivergenceError

DIVERGENCE_RADIUS = 1e6
RATE_TOL = 1e-9


@dataclass(frozen=True)
class IntegratorConfig:
    h: float = 0.05
    substeps: int = 5

    def __post_init__(self):
        if not self.h > 0:
            raise ContractError(f"h must be positive, got {self.h}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ContractError(f"substeps must be a positive integer, got {self.substeps}")


@dataclass
class RolloutResult:
    discounted_cost: np.ndarray | float
    z_end: np.ndarray


@dataclass
class Trajectory:
    """Closed-loop samples; ``cost[k]`` is the discounted cost accrued up to ``t[k]``."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    a: np.ndarray
    cost: np.ndarray

    def rows(self):
        return np.column_stack([self.t, self.x, self.u, self.a])

    def header(self):
        n, m = self.x.shape[1], self.u.shape[1]
        return (
            ["t"]
            + [f"x_{i}" for i in range(n)]
            + [f"u_{i}" for i in range(m)]
            + [f"a_{i}" for i in range(m)]
        )

    def to_csv(self, path):
        write_csv(path, self.header(), self.rows())


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format(float(v), ".17g") for v in row])


def rk4_step(deriv, y, t, dt):
    k1 = deriv(y, t)
    k2 = deriv(y + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = deriv(y + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = deriv(y + dt * k3, t + dt)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def constant_policy(a):
    a = np.atleast_1d(np.asarray(a, dtype=float))

    def policy(z):
        return np.broadcast_to(a, z.shape[:-1] + a.shape).copy()

    return policy


def _checked_rates(env, policy, z):
    a = np.asarray(policy(z), dtype=float).reshape(z.shape[0], env.m)
    if env.M == 0:
        bad = np.any(a != 0.0, axis=-1) & (np.linalg.norm(a, axis=-1) > RATE_TOL)
    else:
        bad = np.linalg.norm(a, axis=-1) > env.M + RATE_TOL
    if np.any(bad):
        worst = float(np.max(np.linalg.norm(a, axis=-1)))
        raise ContractError(f"policy rate norm {worst!r} exceeds M={env.M}")
    return a


def _augmented_rhs(env, policy):
    n, d = env.n, env.dim

    def rhs(y, t):
        z = y[:, :d]
        out = np.empty_like(y)
        out[:, :n] = dynamics_eval(env, z)
        out[:, n:d] = _checked_rates(env, policy, z)
        out[:, d] = math.exp(-env.gamma * t) * running_cost(env, z)
        return out

    return rhs


def _advance(env, rhs, y, t0, duration, substeps, step_offset=0):
    dt = duration / substeps
    d = env.dim
    for k in range(substeps):
        y = rk4_step(rhs, y, t0 + k * dt, dt)
        z = y[:, :d]
        if not np.all(np.isfinite(y)) or np.max(np.abs(z)) > DIVERGENCE_RADIUS:
            raise DivergenceError(
                f"state diverged at substep {step_offset + k}", step=step_offset + k
            )
    return y


def rollout_batch(env, z0, policy, cfg, duration=None, step_offset=0):
    """Integrate a batch of starts ``(B, n + m)`` over ``duration`` (default ``cfg.h``).

    Returns ``(costs (B,), z_end (B, n + m))`` where ``costs`` are discounted
    from the start of the window.
    """
    z0 = np.atleast_2d(as_vector(env, z0))
    duration = cfg.h if duration is None else duration
    y = np.concatenate([z0, np.zeros((z0.shape[0], 1))], axis=1)
    y = _advance(env, _augmented_rhs(env, policy), y, 0.0, duration, cfg.substeps, step_offset)
    return y[:, env.dim], y[:, : env.dim]


def rollout_step(env, z0, policy, cfg):
    """One horizon-``h`` rollout: discounted cost over ``[0, h]`` and ``z(h)``.

    Works for a single state (scalar cost) or a batch.
    """
    z0 = as_vector(env, z0)
    costs, z_end = rollout_batch(env, z0, policy, cfg)
    if z0.ndim == 1:
        return RolloutResult(float(costs[0]), z_end[0])
    return RolloutResult(costs, z_end)


def _windows(total, h):
    count = max(1, math.ceil(total / h - 1e-9))
    starts = [k * h for k in range(count)]
    lengths = [h] * (count - 1) + [total - (count - 1) * h]
    return starts, lengths


def rollout_horizon(env, z0, policy, T, cfg):
    """Chain ``h``-windows over ``[0, T]``; cost is discounted from time 0.

    Each window's cost is scaled by ``e^{-gamma * start}``. The final window is
    shortened when ``T`` is not a multiple of ``h``.
    """
    if not T > 0:
        raise ContractError(f"horizon must be positive, got {T}")
    z = as_vector(env, z0)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    total = np.zeros(z.shape[0])
    for k, (start, length) in enumerate(zip(*_windows(T, cfg.h))):
        costs, z = rollout_batch(env, z, policy, cfg, length, k * cfg.substeps)
        total += math.exp(-env.gamma * start) * costs
    if single:
        return RolloutResult(float(total[0]), z[0])
    return RolloutResult(total, z)


def evaluate_policy(env, z0, policy, T_eval, cfg):
    """Discounted cost ``int_0^T e^{-gamma t} r dt`` along the closed loop.

    Batched starts give one cost per start.
    """
    if not T_eval > 0:
        raise ContractError(f"T_eval must be positive, got {T_eval}")
    return rollout_horizon(env, z0, policy, T_eval, cfg).discounted_cost


def trajectory_record(env, z0, policy, T_eval, cfg, sample_dt):
    """Closed-loop trajectory sampled every ``sample_dt`` (last sample at ``T_eval``).

    The integrator step never exceeds ``cfg.h / cfg.substeps``.
    """
    if not sample_dt > 0:
        raise ContractError(f"sample_dt must be positive, got {sample_dt}")
    if not T_eval > 0:
        raise ContractError(f"T_eval must be positive, got {T_eval}")
    z = np.atleast_2d(as_vector(env, z0)).astype(float)
    if z.shape[0] != 1:
        raise ContractError("trajectory_record takes a single start state")
    rhs = _augmented_rhs(env, policy)
    max_dt = cfg.h / cfg.substeps
    starts, lengths = _windows(T_eval, sample_dt)

    y = np.concatenate([z, np.zeros((1, 1))], axis=1)
    ts, ys, rates = [0.0], [y[0].copy()], [_checked_rates(env, policy, z)[0]]
    steps_done = 0
    for start, length in zip(starts, lengths):
        sub = max(1, math.ceil(length / max_dt - 1e-9))
        y = _advance(env, rhs, y, start, length, sub, step_offset=steps_done)
        steps_done += sub
        ts.append(start + length)
        ys.append(y[0].copy())
        rates.append(_checked_rates(env, policy, y[:, : env.dim])[0])
    ys = np.array(ys)
    n, d = env.n, env.dim
    return Trajectory(
        t=np.array(ts),
        x=ys[:, :n],
        u=ys[:, n:d],
        a=np.array(rates),
        cost=ys[:, d],
    )
