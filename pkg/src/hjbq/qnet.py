"""Numpy multilayer perceptron Q(x, u) with hand-written backprop and Adam.

Layout: ``input (n+m) -> 128 -> 128 -> 1`` with ReLU on the hidden layers.
Weights are stored as ``(fan_out, fan_in)`` matrices. Everything is float64.
The ReLU derivative at exactly zero is taken to be 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .env import make_rng
from .errors import ArtifactError, ContractError, TrainingDivergenceError

HIDDEN = (128, 128)
CHECKPOINT_FORMAT = "hjbq-qnet/1"


@dataclass
class QNetworkParams:
    weights: list
    biases: list

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    def shapes(self):
        return [w.shape for w in self.weights]

    def copy(self):
        return QNetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self):
        """Parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self):
        return np.concatenate([p.ravel() for p in self.arrays()])

    def with_flat(self, vec):
        new = self.copy()
        i = 0
        for p in new.arrays():
            p[...] = vec[i : i + p.size].reshape(p.shape)
            i += p.size
        return new

    def same_shape(self, other):
        return self.shapes() == other.shapes() and [b.shape for b in self.biases] == [
            b.shape for b in other.biases
        ]


# theta^- has the same structure as the live network
TargetParams = QNetworkParams


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper):
        return cls(
            m=[np.zeros_like(p) for p in params.arrays()],
            v=[np.zeros_like(p) for p in params.arrays()],
            **hyper,
        )

    def copy(self):
        return AdamState(
            [a.copy() for a in self.m],
            [a.copy() for a in self.v],
            self.t,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )


def init_params(n, m, seed, hidden=HIDDEN, lr=1e-3):
    """Fresh network, an exact target copy and zeroed Adam moments.

    Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the
    usual default for dense layers. The small output scale matters here: the
    target network only forgets its initial shape slowly, so a large random
    initial Q keeps steering the policy for hundreds of iterations.
    """
    rng = make_rng(seed, 1)
    sizes = [n + m, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    params = QNetworkParams(weights, biases)
    return params, params.copy(), AdamState.zeros_like(params, lr=lr)


def _check_input(params, z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1:] != (params.input_dim,):
        raise ContractError(f"network expects input width {params.input_dim}, got shape {z.shape}")
    return z


def _forward_cache(params, Z):
    acts, pres = [Z], []
    h = Z
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w.T + b
        pres.append(pre)
        h = pre if i == last else np.maximum(pre, 0.0)
        acts.append(h)
    return pres, acts


def forward(params, z):
    """Q value for one augmented state (float) or a batch (array of shape (B,))."""
    z = _check_input(params, z)
    Z = np.atleast_2d(z)
    _, acts = _forward_cache(params, Z)
    out = acts[-1][:, 0]
    return float(out[0]) if z.ndim == 1 else out


def input_gradient(params, z):
    """dQ/dz by reverse mode; shape matches ``z``."""
    z = _check_input(params, z)
    Z = np.atleast_2d(z)
    pres, _ = _forward_cache(params, Z)
    g = np.ones((Z.shape[0], 1))
    for i in range(len(params.weights) - 1, -1, -1):
        if i != len(params.weights) - 1:
            g = g * (pres[i] > 0.0)
        g = g @ params.weights[i]
    return g[0] if z.ndim == 1 else g


def mse_loss_and_grads(params, Z, y):
    """``mean((Q(Z) - y)^2)`` and its gradient, in :meth:`QNetworkParams.arrays` order."""
    Z = np.atleast_2d(_check_input(params, Z))
    y = np.asarray(y, dtype=float).reshape(-1)
    if Z.shape[0] == 0 or Z.shape[0] != y.shape[0]:
        raise ContractError(f"batch mismatch: {Z.shape[0]} inputs vs {y.shape[0]} targets")
    pres, acts = _forward_cache(params, Z)
    resid = acts[-1][:, 0] - y
    loss = float(np.mean(resid**2))
    g = (2.0 / Z.shape[0]) * resid[:, None]
    grads = [None] * (2 * len(params.weights))
    for i in range(len(params.weights) - 1, -1, -1):
        if i != len(params.weights) - 1:
            g = g * (pres[i] > 0.0)
        grads[2 * i] = g.T @ acts[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params.weights[i]
    return loss, grads


def adam_update(params, adam, grads):
    adam.t += 1
    b1, b2 = adam.beta1, adam.beta2
    c1 = 1.0 - b1**adam.t
    c2 = 1.0 - b2**adam.t
    for p, g, m, v in zip(params.arrays(), grads, adam.m, adam.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= adam.lr * (m / c1) / (np.sqrt(v / c2) + adam.eps)


def mse_train_step(params, adam, Z, y):
    """One Adam step on the batch MSE. Mutates ``params``/``adam`` in place.

    Returns ``(params, adam, loss)`` with the loss measured before the update.
    """
    with np.errstate(invalid="ignore", over="ignore"):
        loss, grads = mse_loss_and_grads(params, Z, y)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDivergenceError(f"non-finite loss or gradient (loss={loss!r})")
    adam_update(params, adam, grads)
    return params, adam, loss


def soft_update(theta, target, tau):
    """``target <- tau * theta + (1 - tau) * target``, in place; returns ``target``."""
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    if not theta.same_shape(target):
        raise ContractError("live and target networks have different shapes")
    for p, q in zip(theta.arrays(), target.arrays()):
        if tau == 1.0:
            q[...] = p
        else:
            q *= 1.0 - tau
            q += tau * p
    return target


def _params_to_json(params):
    return [
        {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
        for w, b in zip(params.weights, params.biases)
    ]


def _params_from_json(layers):
    weights, biases = [], []
    for layer in layers:
        shape = tuple(layer["shape"])
        w = np.asarray(layer["weight"], dtype=float)
        b = np.asarray(layer["bias"], dtype=float)
        if w.size != shape[0] * shape[1] or b.shape != (shape[0],):
            raise ArtifactError(f"layer arrays do not match declared shape {shape}")
        weights.append(w.reshape(shape))
        biases.append(b)
    for prev, nxt in zip(weights[:-1], weights[1:]):
        if prev.shape[0] != nxt.shape[1]:
            raise ArtifactError("consecutive layer shapes do not chain")
    if weights[-1].shape[0] != 1:
        raise ArtifactError("output layer must have width 1")
    return QNetworkParams(weights, biases)


def save_checkpoint(path, params, target, adam, fingerprint="", meta=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "input_dim": params.input_dim,
        "layers": _params_to_json(params),
        "target": _params_to_json(target),
        "adam": {
            "t": adam.t,
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "m": [a.ravel().tolist() for a in adam.m],
            "v": [a.ravel().tolist() for a in adam.v],
        },
        "config_fingerprint": fingerprint,
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


@dataclass
class Checkpoint:
    params: QNetworkParams
    target: QNetworkParams
    adam: AdamState
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)


def load_checkpoint(path, input_dim=None):
    """Read a checkpoint; ``input_dim`` (n + m) is enforced when given."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ArtifactError(f"unknown checkpoint format {doc.get('format')!r}")
    try:
        params = _params_from_json(doc["layers"])
        target = _params_from_json(doc["target"])
        ad = doc["adam"]
        shapes = [p.shape for p in params.arrays()]
        m = [np.asarray(a, dtype=float).reshape(s) for a, s in zip(ad["m"], shapes)]
        v = [np.asarray(a, dtype=float).reshape(s) for a, s in zip(ad["v"], shapes)]
    except (KeyError, ValueError, TypeError) as exc:
        raise ArtifactError(f"malformed checkpoint {path}: {exc}") from exc
    if not params.same_shape(target):
        raise ArtifactError("target network shape differs from live network")
    if input_dim is not None and params.input_dim != input_dim:
        raise ArtifactError(
            f"checkpoint input width {params.input_dim} does not match environment n+m={input_dim}"
        )
    adam = AdamState(m, v, int(ad["t"]), ad["lr"], ad["beta1"], ad["beta2"], ad["eps"])
    return Checkpoint(params, target, adam, doc.get("config_fingerprint", ""), doc.get("meta", {}))
