"""Linear-quadratic control environments on the augmented state z = (x, u).

States are carried as flat float64 arrays of length ``n + m`` (or batches of
shape ``(..., n + m)``), state block first. :class:`AugmentedState` is a thin
named view for callers that prefer separate ``x`` and ``u``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def make_rng(seed, *stream):
    """Counter-based generator (Philox) keyed by ``seed`` and optional stream ids.

    Distinct ``stream`` tuples give statistically independent sequences from
    the same seed, which keeps sampling, exploration and evaluation decoupled.
    """
    ss = np.random.SeedSequence([int(seed), *(int(s) for s in stream)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class AugmentedState:
    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        self.u = np.atleast_1d(np.asarray(self.u, dtype=float))

    @property
    def z(self):
        return np.concatenate([self.x, self.u])

    @classmethod
    def from_vector(cls, z, n):
        z = np.asarray(z, dtype=float)
        return cls(z[:n].copy(), z[n:].copy())


@dataclass
class EnvironmentSpec:
    """Dynamics ``x' = A x + B u`` with running cost ``scale * (|x|^2 + |u|^2)``.

    ``M`` bounds the control rate ``|u'|`` and ``gamma`` is the discount rate.
    The box ``[x_min, x_max]^n x [u_min, u_max]^m`` is the sampling domain.
    ``cost_scale`` exists so tests can build the zero-cost variant.
    """

    A: np.ndarray
    B: np.ndarray
    gamma: float = 0.1
    M: float = 1.0
    x_min: float = -1.0
    x_max: float = 1.0
    u_min: float = -1.0
    u_max: float = 1.0
    cost_scale: float = 1.0
    name: str = field(default="lqr", compare=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.check()

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def dim(self):
        return self.n + self.m

    def check(self):
        n, m = self.A.shape[0], self.B.shape[1]
        if n < 1 or m < 1:
            raise ContractError(f"need n >= 1 and m >= 1, got n={n}, m={m}")
        if self.A.shape != (n, n):
            raise ContractError(f"A must be square, got {self.A.shape}")
        if self.B.shape != (n, m):
            raise ContractError(f"B must be {n}x{m}, got {self.B.shape}")
        if not self.gamma > 0:
            raise ContractError(f"gamma must be positive, got {self.gamma}")
        if not self.M >= 0:
            raise ContractError(f"M must be nonnegative, got {self.M}")
        if not self.x_min < self.x_max:
            raise ContractError(f"empty state box [{self.x_min}, {self.x_max}]")
        if not self.u_min < self.u_max:
            raise ContractError(f"empty control box [{self.u_min}, {self.u_max}]")

    def box(self):
        """Per-coordinate lower and upper bounds of the sampling domain."""
        lo = np.r_[np.full(self.n, self.x_min), np.full(self.m, self.u_min)]
        hi = np.r_[np.full(self.n, self.x_max), np.full(self.m, self.u_max)]
        return lo, hi


def as_vector(env, z):
    if isinstance(z, AugmentedState):
        z = z.z
    z = np.asarray(z, dtype=float)
    if z.shape[-1:] != (env.dim,):
        raise ContractError(f"expected trailing dimension {env.dim}, got shape {z.shape}")
    return z


def dynamics_eval(env, z):
    """``A x + B u`` for a single augmented state or a batch."""
    z = as_vector(env, z)
    x, u = z[..., : env.n], z[..., env.n :]
    return x @ env.A.T + u @ env.B.T


def running_cost(env, z):
    z = as_vector(env, z)
    return env.cost_scale * np.sum(z * z, axis=-1)


def make_random_lqr(n, m, seed, **overrides):
    """Random LQR instance with ``A = 0.1 X`` and ``B = 5 Y``, X, Y ~ U[0, 1) i.i.d."""
    if n < 1 or m < 1:
        raise ContractError(f"need n >= 1 and m >= 1, got n={n}, m={m}")
    rng = make_rng(seed, 0)
    A = 0.1 * rng.random((n, n))
    B = 5.0 * rng.random((n, m))
    return EnvironmentSpec(A, B, name=f"lqr_random_{n}x{m}_s{seed}", **overrides)


def make_lqr1d(**overrides):
    """Scalar integrator ``x' = u``."""
    return EnvironmentSpec([[0.0]], [[1.0]], name="lqr1d", **overrides)


def sample_domain(env, count, rng):
    """``count`` uniform draws from the sampling box, shape ``(count, n + m)``.

    ``rng`` is a :class:`numpy.random.Generator` and is advanced in place.
    """
    env.check()
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    lo, hi = env.box()
    return lo + (hi - lo) * rng.random((count, env.dim))
