"""Semi-Lagrangian grid solver for the Q-function HJB equations.

The control value ``u`` is treated as part of the state and its rate ``a`` as
the input, so the Q-function is the value function of the augmented system
``z' = (A x + B u, a)`` with ``|a| <= M``. The discounted problem is solved by
value iteration of

    (T Q)(z) = r(z) (1 - e^{-gamma delta}) / gamma
               + e^{-gamma delta} min_a Q(z + delta F(z, a))

with the foot point from one RK4 step and read by multilinear interpolation
(clamped to the box). Interpolation weights are nonnegative and sum to one, so
T is monotone and a sup-norm contraction with modulus e^{-gamma delta}.
The undiscounted finite-horizon problem is marched backward from Q(., T) = q.
"""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .env import as_vector, make_rng, running_cost
from .errors import ArtifactError, ContractError, NonConvergenceError
from .odeint import rk4_step

log = logging.getLogger(__name__)

MAX_GRID_DIM = 4
SOLUTION_FORMAT = "hjbq-grid/1"


class CapacityError(ContractError):
    """Grid dimension beyond what the tensor-product solver supports."""


@dataclass
class GridSpec:
    """Tensor-product grid over the augmented axes (x first, then u).

    ``time`` is ``(T, steps)`` for finite-horizon problems.
    """

    axes: list
    time: tuple | None = None

    def __post_init__(self):
        self.axes = [(float(lo), float(hi), int(c)) for lo, hi, c in self.axes]
        for lo, hi, c in self.axes:
            if c < 2 or not lo < hi:
                raise ContractError(f"bad grid axis ({lo}, {hi}, {c})")
        if self.time is not None:
            T, steps = self.time
            if not T > 0 or int(steps) < 1:
                raise ContractError(f"bad time axis {self.time}")
            self.time = (float(T), int(steps))

    @classmethod
    def box(cls, dim, extent, count, time=None):
        """Symmetric grid ``[-extent, extent]^dim`` with ``count`` nodes per axis."""
        return cls([(-extent, extent, count)] * dim, time)

    @property
    def dim(self):
        return len(self.axes)

    @property
    def shape(self):
        return tuple(c for _, _, c in self.axes)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def spacing(self):
        return np.array([(hi - lo) / (c - 1) for lo, hi, c in self.axes])

    @property
    def lo(self):
        return np.array([lo for lo, _, _ in self.axes])

    @property
    def hi(self):
        return np.array([hi for _, hi, _ in self.axes])

    def nodes(self):
        return [np.linspace(lo, hi, c) for lo, hi, c in self.axes]

    def points(self):
        """All nodes as ``(size, dim)``, row-major (last axis fastest)."""
        mesh = np.meshgrid(*self.nodes(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def inner_mask(self, fraction):
        """Nodes within the central ``fraction`` of the box on every axis."""
        pts = self.points()
        mid = 0.5 * (self.lo + self.hi)
        half = 0.5 * fraction * (self.hi - self.lo)
        return np.all(np.abs(pts - mid) <= half + 1e-12, axis=1)

    def coarsened(self):
        """Every other node (odd counts keep the endpoints exactly)."""
        axes = [(lo, hi, (c - 1) // 2 + 1) for lo, hi, c in self.axes]
        time = None if self.time is None else (self.time[0], max(1, self.time[1] // 2))
        return GridSpec(axes, time)

    def to_dict(self):
        return {"axes": [list(a) for a in self.axes], "time": list(self.time) if self.time else None}

    @classmethod
    def from_dict(cls, d):
        return cls([tuple(a) for a in d["axes"]], tuple(d["time"]) if d.get("time") else None)


@dataclass
class GridSolution:
    """Node values; shape ``grid.shape`` or ``(steps + 1, *grid.shape)`` with time."""

    grid: GridSpec
    values: np.ndarray
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def __post_init__(self):
        expected = self.grid.shape if self.grid.time is None else (
            self.grid.time[1] + 1,
            *self.grid.shape,
        )
        self.values = np.asarray(self.values, dtype=float).reshape(expected)

    @property
    def converged(self):
        return bool(self.meta.get("converged", True))

    def times(self):
        if self.grid.time is None:
            return None
        T, steps = self.grid.time
        return np.linspace(0.0, T, steps + 1)


def make_rate_set(m, M, directions=16):
    """Candidate control rates, shape ``(k, m)``.

    ``m == 1``: ``[-M, 0, +M]`` in that order. ``m == 2``: ``directions``
    equally spaced angles, then 0. ``m >= 3``: ``+-M e_i`` followed by
    ``directions`` fixed pseudo-random unit directions, then 0.
    """
    if M < 0:
        raise ContractError(f"M must be nonnegative, got {M}")
    if M == 0:
        return np.zeros((1, m))
    if m == 1:
        return np.array([[-M], [0.0], [M]])
    if m == 2:
        ang = 2.0 * np.pi * np.arange(directions) / directions
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        eye = np.eye(m)
        g = make_rng(0, 7).standard_normal((directions, m))
        dirs = np.concatenate([-eye, eye, g / np.linalg.norm(g, axis=1, keepdims=True)])
    return np.concatenate([M * dirs, np.zeros((1, m))])


def _check_capacity(env, grid):
    if grid.dim != env.dim:
        raise ContractError(f"grid has {grid.dim} axes but n+m={env.dim}")
    if env.dim > MAX_GRID_DIM:
        raise CapacityError(f"grid oracle supports n+m <= {MAX_GRID_DIM}, got {env.dim}")
    if env.dim > 2:
        warnings.warn(f"grid oracle on {env.dim} dimensions is expensive", stacklevel=3)


def _cell_coords(grid, pts):
    """Lower-corner indices and in-cell fractions of (clamped) points."""
    P, d = pts.shape
    idx = np.empty((P, d), dtype=np.int64)
    frac = np.empty((P, d))
    for k, (lo, hi, c) in enumerate(grid.axes):
        s = (np.clip(pts[:, k], lo, hi) - lo) / ((hi - lo) / (c - 1))
        i = np.clip(np.floor(s).astype(np.int64), 0, c - 2)
        idx[:, k] = i
        frac[:, k] = np.clip(s - i, 0.0, 1.0)
    return idx, frac


def _corners(grid, pts):
    """Yield ``(flat node index, weight)`` arrays for each of the 2^d cell corners."""
    idx, frac = _cell_coords(grid, pts)
    d = grid.dim
    shape = grid.shape
    strides = np.array([int(np.prod(shape[k + 1 :])) for k in range(d)], dtype=np.int64)
    for corner in range(2**d):
        bits = np.array([(corner >> (d - 1 - k)) & 1 for k in range(d)])
        yield (idx + bits) @ strides, np.prod(np.where(bits, frac, 1.0 - frac), axis=1)


def interp_matrix(grid, points):
    """Sparse ``(P, size)`` multilinear interpolation weights; points are clamped to the box."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    P = pts.shape[0]
    rows, cols, vals = [], [], []
    for col, w in _corners(grid, pts):
        rows.append(np.arange(P))
        cols.append(col)
        vals.append(w)
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(P, grid.size),
    )


def _interp_flat(grid, flat, points):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros(pts.shape[0])
    for col, w in _corners(grid, pts):
        out += w * flat[col]
    return out


def interpolate(sol, z, t=None):
    """Multilinear interpolation of ``sol`` at ``z`` (single point or batch).

    For time-indexed solutions ``t`` selects the slice, linear between slices.
    """
    z = np.asarray(z, dtype=float)
    if sol.grid.time is None:
        out = _interp_flat(sol.grid, sol.values.ravel(), z)
    else:
        if t is None:
            raise ContractError("time-indexed solution needs t")
        T, steps = sol.grid.time
        s = np.clip(t, 0.0, T) / T * steps
        k = min(int(math.floor(s)), steps - 1)
        w = s - k
        flat = sol.values.reshape(steps + 1, -1)
        out = (1.0 - w) * _interp_flat(sol.grid, flat[k], z) + w * _interp_flat(
            sol.grid, flat[k + 1], z
        )
    return float(out[0]) if z.ndim == 1 else out


def foot_points(env, Z, a, delta):
    """One RK4 step of ``z' = (A x + B u, a)`` with the rate held at ``a``."""
    n = env.n
    rate = np.broadcast_to(np.asarray(a, dtype=float), (Z.shape[0], env.m))

    def rhs(y, t):
        out = np.empty_like(y)
        out[:, :n] = y[:, :n] @ env.A.T + y[:, n:] @ env.B.T
        out[:, n:] = rate
        return out

    return rk4_step(rhs, Z, 0.0, delta)


def default_delta(env, grid, rates):
    """Half the finest spacing over the largest augmented speed on the box."""
    pts = grid.points()
    fx = pts[:, : env.n] @ env.A.T + pts[:, env.n :] @ env.B.T
    speed = np.sqrt(np.max(np.sum(fx * fx, axis=1)) + np.max(np.sum(rates * rates, axis=1)))
    hmin = float(np.min(grid.spacing))
    return 0.5 * hmin / speed if speed > 0 else 0.5 * hmin


class SemiLagrangianOperator:
    """Discounted one-step DPP operator on a fixed grid (Jacobi sweeps)."""

    def __init__(self, env, grid, delta, rates):
        if not delta > 0:
            raise ContractError(f"delta must be positive, got {delta}")
        self.env, self.grid, self.delta = env, grid, float(delta)
        self.rates = np.atleast_2d(np.asarray(rates, dtype=float))
        pts = grid.points()
        self.beta = math.exp(-env.gamma * delta)
        self.stage = running_cost(env, pts) * (1.0 - self.beta) / env.gamma
        self.mats = [interp_matrix(grid, foot_points(env, pts, a, delta)) for a in self.rates]

    def continuations(self, Q):
        q = np.asarray(Q, dtype=float).ravel()
        return np.stack([P @ q for P in self.mats])

    def apply(self, Q):
        return self.stage + self.beta * self.continuations(Q).min(axis=0)

    def greedy_index(self, Q):
        return np.argmin(self.continuations(Q), axis=0)


def solve_infinite(env, grid, delta=None, rates=None, tol=1e-10, max_iter=1_000_000, Q0=None):
    """Fixed point of the discounted semi-Lagrangian operator by value iteration.

    Stops when the sup-norm update drops below ``tol``. Raises
    :class:`NonConvergenceError` (carrying the partial solution) otherwise.
    """
    _check_capacity(env, grid)
    if not tol > 0:
        raise ContractError("tol must be positive")
    rates = make_rate_set(env.m, env.M) if rates is None else np.atleast_2d(rates)
    delta = default_delta(env, grid, rates) if delta is None else float(delta)
    op = SemiLagrangianOperator(env, grid, delta, rates)
    Q = np.zeros(grid.size) if Q0 is None else np.asarray(Q0, dtype=float).ravel().copy()
    history = []
    update = math.inf
    it = 0
    while it < max_iter:
        it += 1
        Qn = op.apply(Q)
        update = float(np.max(np.abs(Qn - Q)))
        Q = Qn
        history.append((it, update))
        if update < tol:
            break
    meta = {
        "mode": "infinite",
        "gamma": env.gamma,
        "M": env.M,
        "delta": delta,
        "iterations": it,
        "last_update": update,
        "tol": tol,
        "converged": update < tol,
        "rates": rates.tolist(),
        "n": env.n,
        "m": env.m,
    }
    sol = GridSolution(grid, Q, meta, history)
    if not sol.converged:
        raise NonConvergenceError(
            f"no convergence after {it} sweeps (last update {update:.3e})", update, sol
        )
    log.info("converged in %d sweeps, delta=%.4g", it, delta)
    return sol


def quadratic_terminal(env):
    return lambda X: np.sum(X * X, axis=-1)


def solve_finite(env, grid, terminal_cost=None, rates=None):
    """Backward march ``Q(t - dt) = min_a {r dt + Q(z + dt F(z, a), t)}`` from ``Q(T) = q(x)``.

    Undiscounted; ``env.gamma`` is ignored. ``terminal_cost`` maps a batch of
    states ``(P, n)`` to values (default ``|x|^2``).
    """
    _check_capacity(env, grid)
    if grid.time is None:
        raise ContractError("finite-horizon solve needs a time axis on the grid")
    rates = make_rate_set(env.m, env.M) if rates is None else np.atleast_2d(rates)
    q = quadratic_terminal(env) if terminal_cost is None else terminal_cost
    T, steps = grid.time
    dt = T / steps
    pts = grid.points()
    stage = running_cost(env, pts) * dt
    mats = [interp_matrix(grid, foot_points(env, pts, a, dt)) for a in rates]
    values = np.empty((steps + 1, grid.size))
    values[steps] = np.asarray(q(pts[:, : env.n]), dtype=float)
    for k in range(steps - 1, -1, -1):
        cont = np.min(np.stack([P @ values[k + 1] for P in mats]), axis=0)
        values[k] = stage + cont
    if not np.all(np.isfinite(values)):
        raise NonConvergenceError("non-finite values in backward march")
    meta = {
        "mode": "finite",
        "M": env.M,
        "delta": dt,
        "T": T,
        "steps": steps,
        "converged": True,
        "rates": rates.tolist(),
        "n": env.n,
        "m": env.m,
        "gamma": env.gamma,
    }
    return GridSolution(grid, values, meta)


def greedy_policy(sol, env, rates=None):
    """Rate minimising the interpolated one-step continuation (ties: first listed).

    Only for infinite-horizon solutions; uses the solution's ``delta``.
    """
    if sol.grid.time is not None:
        raise ContractError("greedy_policy needs an infinite-horizon solution")
    rates = np.asarray(sol.meta["rates"] if rates is None else rates, dtype=float)
    rates = np.atleast_2d(rates)
    delta = sol.meta["delta"]
    q = sol.values.ravel()

    def policy(z):
        Z = np.atleast_2d(as_vector(env, z))
        cont = np.stack([_interp_flat(sol.grid, q, foot_points(env, Z, a, delta)) for a in rates])
        out = rates[np.argmin(cont, axis=0)]
        return out[0] if np.ndim(z) == 1 else out

    return policy


def monotonicity_in_M(env, grid, M_list, delta=None, rates_per_M=None, tol=1e-10, **kw):
    """Infinite-horizon solutions for each rate bound in ``M_list`` (strictly increasing).

    A common ``delta`` (sized for the largest bound) is used unless given.
    """
    M_list = [float(M) for M in M_list]
    if any(b <= a for a, b in zip(M_list[:-1], M_list[1:])):
        raise ContractError("M_list must be strictly increasing")
    envs = [_with_M(env, M) for M in M_list]
    rate_sets = rates_per_M or [make_rate_set(e.m, e.M) for e in envs]
    if delta is None:
        delta = min(default_delta(e, grid, r) for e, r in zip(envs, rate_sets))
    return [solve_infinite(e, grid, delta, r, tol, **kw) for e, r in zip(envs, rate_sets)]


def _with_M(env, M):
    from dataclasses import replace

    return replace(env, M=M)


def scheme_error_estimate(env, grid, inner=0.6, **solve_kw):
    """Sup gap between solutions on ``grid`` and its 2x coarsening, over the inner region.

    For a first-order scheme this gap tracks the fine-grid error. Returns
    ``(gap, fine, coarse)``.
    """
    fine = solve_infinite(env, grid, **solve_kw)
    coarse_kw = dict(solve_kw)
    if coarse_kw.get("delta") is not None:
        coarse_kw["delta"] = 2.0 * coarse_kw["delta"]
    coarse = solve_infinite(env, grid.coarsened(), **coarse_kw)
    mask = grid.inner_mask(inner)
    pts = grid.points()[mask]
    gap = float(np.max(np.abs(fine.values.ravel()[mask] - interpolate(coarse, pts))))
    return gap, fine, coarse


def save_solution(path, sol, fmt="csv"):
    """Write ``<path>`` (JSON header) plus ``<stem>.csv`` or ``<stem>.f64`` with the values."""
    if fmt not in ("csv", "raw"):
        raise ContractError(f"unknown value format {fmt!r}")
    stem, _ = os.path.splitext(path)
    data_path = stem + (".csv" if fmt == "csv" else ".f64")
    flat = sol.values.ravel()
    if fmt == "csv":
        with open(data_path, "w") as fh:
            fh.write("value\n")
            fh.writelines(format(float(v), ".17g") + "\n" for v in flat)
    else:
        flat.astype("<f8").tofile(data_path)
    header = {
        "format": SOLUTION_FORMAT,
        "grid": sol.grid.to_dict(),
        "meta": sol.meta,
        "value_format": fmt,
        "values_file": os.path.basename(data_path),
        "length": int(flat.size),
    }
    with open(path, "w") as fh:
        json.dump(header, fh, indent=1)
    return data_path


def load_solution(path):
    try:
        with open(path) as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read grid solution {path}: {exc}") from exc
    if header.get("format") != SOLUTION_FORMAT:
        raise ArtifactError(f"unknown grid format {header.get('format')!r}")
    data_path = os.path.join(os.path.dirname(os.path.abspath(path)), header["values_file"])
    if header["value_format"] == "csv":
        flat = np.loadtxt(data_path, skiprows=1, ndmin=1)
    else:
        flat = np.fromfile(data_path, dtype="<f8")
    if flat.size != header["length"]:
        raise ArtifactError(f"value file has {flat.size} entries, header says {header['length']}")
    grid = GridSpec.from_dict(header["grid"])
    return GridSolution(grid, flat, header["meta"])
