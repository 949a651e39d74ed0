"""Flat ``key=value`` run configuration: parsing, validation, fingerprinting.

One namespace covers environment, training, grid-oracle and comparison keys.
Lines starting with ``#`` are comments. Matrices ``A`` and ``B`` may be given
inline as row-major comma-separated numbers.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .env import EnvironmentSpec, make_lqr1d, make_random_lqr
from .errors import ContractError
from .learner import TrainConfig, default_eval_start


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def _floats(text):
    return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
SCHEMA = {
    # environment
    "preset": (str, "lqr1d"),
    "n": (int, 1),
    "m": (int, 1),
    "seed": (int, 0),
    "env_seed": (int, None),
    "gamma": (float, 0.1),
    "M": (float, 1.0),
    "x_min": (float, -1.0),
    "x_max": (float, 1.0),
    "u_min": (float, -1.0),
    "u_max": (float, 1.0),
    "cost_scale": (float, 1.0),
    "A": (_floats, None),
    "B": (_floats, None),
    # learner
    "N": (int, 1000),
    "K": (int, 10),
    "h": (float, 0.05),
    "tau": (float, 0.01),
    "learning_rate": (float, 1e-3),
    "grad_zero_tol": (float, 1e-12),
    "substeps": (int, 5),
    "eval_every": (int, 50),
    "eval_T": (float, 10.0),
    "eval_start": (_floats, None),
    "inner_steps": (int, 1),
    "policy_hold": (str, "feedback"),
    "probe_count": (int, 32),
    "checkpoint_every": (int, 0),
    "sample_dt": (float, 0.05),
    # grid oracle
    "mode": (str, "infinite"),
    "grid_extent": (float, 2.0),
    "grid_points": (int, 201),
    "delta": (float, None),
    "hjb_tol": (float, 1e-10),
    "max_iter": (int, 1_000_000),
    "T": (float, 1.0),
    "time_steps": (int, 100),
    "value_format": (str, "csv"),
    # comparison
    "inner": (float, 0.5),
    "probe_per_axis": (int, 21),
}

_CHOICES = {
    "preset": ("lqr1d", "lqr_random"),
    "policy_hold": ("feedback", "iteration_start"),
    "mode": ("infinite", "finite"),
    "value_format": ("csv", "raw"),
}


def parse_lines(lines, source="<config>"):
    raw = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def load_file(path):
    try:
        with open(path) as fh:
            return parse_lines(fh, path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def resolve(raw, overrides=None):
    """Merge file values, overrides and defaults into a typed dict.

    Unknown keys raise :class:`ConfigError` naming the key.
    """
    merged = dict(raw)
    merged.update(overrides or {})
    out = {k: default for k, (_, default) in SCHEMA.items()}
    for key, value in merged.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", key)
        parser = SCHEMA[key][0]
        if value is None or isinstance(value, (int, float, list)) and parser is not str:
            out[key] = value
            continue
        try:
            out[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})", key) from exc
    for key, choices in _CHOICES.items():
        if out[key] not in choices:
            raise ConfigError(f"{key} must be one of {choices}, got {out[key]!r}", key)
    return out


def fingerprint(cfg):
    """Content hash of a resolved config; key order does not matter."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def build_env(cfg):
    bounds = {k: cfg[k] for k in ("gamma", "M", "x_min", "x_max", "u_min", "u_max", "cost_scale")}
    n, m = cfg["n"], cfg["m"]
    try:
        if cfg["A"] is not None or cfg["B"] is not None:
            if cfg["A"] is None or cfg["B"] is None:
                raise ConfigError("inline matrices need both A and B", "A" if cfg["A"] is None else "B")
            A = np.asarray(cfg["A"], dtype=float)
            B = np.asarray(cfg["B"], dtype=float)
            if A.size != n * n or B.size != n * m:
                raise ConfigError(f"A needs {n * n} entries and B {n * m}", "A")
            return EnvironmentSpec(A.reshape(n, n), B.reshape(n, m), name="custom", **bounds)
        if cfg["preset"] == "lqr1d":
            if (n, m) != (1, 1):
                raise ConfigError("preset lqr1d has n=m=1", "n")
            return make_lqr1d(**bounds)
        env_seed = cfg["seed"] if cfg["env_seed"] is None else cfg["env_seed"]
        return make_random_lqr(n, m, env_seed, **bounds)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def build_train_config(cfg, env=None):
    eval_start = cfg["eval_start"]
    if eval_start is None and env is not None:
        eval_start = default_eval_start(env, cfg["seed"]).tolist()
    if env is not None and eval_start is not None and len(eval_start) != env.dim:
        raise ConfigError(f"eval_start needs {env.dim} entries", "eval_start")
    try:
        return TrainConfig(
            N=cfg["N"],
            K=cfg["K"],
            h=cfg["h"],
            tau=cfg["tau"],
            learning_rate=cfg["learning_rate"],
            grad_zero_tol=cfg["grad_zero_tol"],
            substeps=cfg["substeps"],
            seed=cfg["seed"],
            eval_every=cfg["eval_every"],
            eval_T=cfg["eval_T"],
            eval_start=None if eval_start is None else tuple(eval_start),
            inner_steps=cfg["inner_steps"],
            policy_hold=cfg["policy_hold"],
            probe_count=cfg["probe_count"],
            checkpoint_every=cfg["checkpoint_every"],
        )
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
