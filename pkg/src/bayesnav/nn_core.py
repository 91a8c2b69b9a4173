"""
Small dense network engine on plain numpy.

Forward pass with inverted dropout, exact backward pass, Adam, and the two
losses the pipeline trains with (Gaussian NLL with predicted log-variance and
the KL of a diagonal Gaussian to N(0, I)).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, InputShapeError, NumericDomainError

FORMAT_VERSION = 1

TRAIN_DROPOUT = "train_dropout"
EVAL_DROPOUT_ON = "eval_dropout_on"
EVAL_DROPOUT_OFF = "eval_dropout_off"
MODES = (TRAIN_DROPOUT, EVAL_DROPOUT_ON, EVAL_DROPOUT_OFF)

ACTIVATIONS = ("relu", "identity")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


class DenseNet:
    """Fully connected net: ReLU hidden layers, identity output layer.

    Dropout (rate ``dropout_rate``) follows every hidden activation. ``rng`` is
    the default generator for dropout masks when a call does not pass its own.
    """

    def __init__(self, weights, biases, activations, dropout_rate=0.0, rng=None):
        if not (len(weights) == len(biases) == len(activations)) or not weights:
            raise InputShapeError("weights, biases and activations must have equal, nonzero length")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in biases]
        self.activations = list(activations)
        self.dropout_rate = float(dropout_rate)
        self.rng = rng
        self.version = 0
        self._check()

    @classmethod
    def init(cls, layer_dims: Sequence[int], dropout_rate=0.0, rng=None, seed=None):
        """He-initialised net for ``layer_dims`` = [in, hidden..., out]."""
        if rng is None:
            rng = np.random.default_rng(seed)
        weights, biases, acts = [], [], []
        for k, (n_in, n_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
            acts.append("identity" if k == len(layer_dims) - 2 else "relu")
        return cls(weights, biases, acts, dropout_rate=dropout_rate, rng=rng)

    def _check(self):
        for k, (w, b, a) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InputShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise InputShapeError(
                    f"layer {k} expects {w.shape[1]} inputs, previous layer emits {self.weights[k - 1].shape[0]}")
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericDomainError(f"layer {k} has non-finite parameters")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params: Sequence[np.ndarray]):
        if len(params) != 2 * len(self.weights):
            raise InputShapeError("parameter list length does not match the network")
        for k in range(len(self.weights)):
            w, b = np.asarray(params[2 * k], dtype=float), np.asarray(params[2 * k + 1], dtype=float)
            if w.shape != self.weights[k].shape or b.shape != self.biases[k].shape:
                raise InputShapeError(f"layer {k}: parameter shape mismatch")
            self.weights[k], self.biases[k] = w, b
        self.version += 1

    def copy(self, rng=None) -> "DenseNet":
        return DenseNet(self.weights, self.biases, self.activations, self.dropout_rate, rng)

    def __call__(self, x, mode=EVAL_DROPOUT_OFF, rng=None):
        return forward(self, x, mode, rng)[0]

    # persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "layer_dims": self.layer_dims,
            "activations": self.activations,
            "dropout_rate": self.dropout_rate,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict, rng=None) -> "DenseNet":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported weight format_version {d.get('format_version')!r}")
        net = cls(d["weights"], d["biases"], d["activations"], d["dropout_rate"], rng)
        if net.layer_dims != list(d["layer_dims"]):
            raise InputShapeError(f"layer_dims {d['layer_dims']} do not match stored weights {net.layer_dims}")
        return net


def save_net(net: DenseNet, path):
    Path(path).write_text(json.dumps(net.to_dict()))


def load_net(path, rng=None) -> DenseNet:
    return DenseNet.from_dict(json.loads(Path(path).read_text()), rng)


@dataclass
class ForwardCache:
    net_id: int
    version: int
    squeeze: bool
    inputs: list = field(default_factory=list)   # input to each layer
    pre: list = field(default_factory=list)      # pre-activations
    masks: list = field(default_factory=list)    # scaled dropout masks or None


def forward(net: DenseNet, x, mode=EVAL_DROPOUT_OFF, rng=None):
    """Run ``net`` on ``x`` (shape (in,) or (batch, in)).

    Returns ``(output, cache)``. In ``train_dropout`` and ``eval_dropout_on``
    every hidden unit is dropped with probability ``dropout_rate`` and
    survivors are scaled by ``1 / (1 - dropout_rate)``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise InputShapeError(f"expected input of width {net.n_in}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericDomainError("non-finite network input")
    p = net.dropout_rate
    use_dropout = mode != EVAL_DROPOUT_OFF and p > 0.0
    if use_dropout:
        rng = rng if rng is not None else net.rng
        if rng is None:
            raise ContractError("dropout is active but no RNG was supplied")

    cache = ForwardCache(id(net), net.version, squeeze)
    a = x
    last = len(net.weights) - 1
    for k, (w, b, act) in enumerate(zip(net.weights, net.biases, net.activations)):
        cache.inputs.append(a)
        z = a @ w.T + b
        cache.pre.append(z)
        a = np.maximum(z, 0.0) if act == "relu" else z
        mask = None
        if k < last and use_dropout:
            mask = (rng.random(a.shape) >= p) / (1.0 - p)
            a = a * mask
        cache.masks.append(mask)
    return (a[0] if squeeze else a), cache


def backward(net: DenseNet, cache: ForwardCache, output_grad, input_grad=False):
    """Gradients of a scalar loss w.r.t. ``net.params()`` given dL/d(output).

    Batch contributions are summed; scale ``output_grad`` for a mean loss.
    With ``input_grad=True`` returns ``(grads, dL/d(input))``.
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise ContractError("cache does not belong to this network state")
    g = np.asarray(output_grad, dtype=float)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.pre[-1].shape:
        raise InputShapeError(f"output_grad shape {g.shape} != output shape {cache.pre[-1].shape}")
    grads: list = [None] * (2 * len(net.weights))
    for k in range(len(net.weights) - 1, -1, -1):
        if cache.masks[k] is not None:
            g = g * cache.masks[k]
        if net.activations[k] == "relu":
            g = g * (cache.pre[k] > 0.0)
        grads[2 * k] = g.T @ cache.inputs[k]
        grads[2 * k + 1] = g.sum(axis=0)
        if k or input_grad:
            g = g @ net.weights[k]
    if input_grad:
        return grads, (g[0] if cache.squeeze else g)
    return grads


def adam_init(params: Sequence[np.ndarray]) -> dict:
    return {"step": 0,
            "m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params]}


def adam_step(params, grads, opt_state: dict, config: TrainConfig):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(opt_state["m"]):
        raise InputShapeError("params, grads and optimizer state differ in length")
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = opt_state["step"] + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, opt_state["m"], opt_state["v"]):
        if p.shape != g.shape or p.shape != m.shape:
            raise InputShapeError(f"shape mismatch {p.shape} vs {g.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"step": t, "m": new_m, "v": new_v}


class Adam:
    """Stateful wrapper binding ``adam_step`` to one network."""

    def __init__(self, net: DenseNet, config: TrainConfig):
        self.net = net
        self.config = config
        self.state = adam_init(net.params())

    def step(self, grads):
        params, self.state = adam_step(self.net.params(), grads, self.state, self.config)
        self.net.set_params(params)


def _as_batch(*arrays):
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=float)
        out.append(a[None, :] if a.ndim == 1 else a)
    shapes = {a.shape for a in out}
    if len(shapes) != 1:
        raise InputShapeError(f"argument shapes differ: {sorted(shapes)}")
    for a in out:
        if not np.all(np.isfinite(a)):
            raise NumericDomainError("non-finite loss input")
    return out


def heteroscedastic_nll(mu, log_var, target) -> float:
    """Gaussian NLL without the constant: 0.5 e^-s (y - mu)^2 + 0.5 s.

    Summed over output dimensions, averaged over the batch.
    """
    return heteroscedastic_nll_grad(mu, log_var, target)[0]


def heteroscedastic_nll_grad(mu, log_var, target):
    """Loss plus gradients w.r.t. ``mu`` and ``log_var`` (batch-mean scaled)."""
    mu, s, y = _as_batch(mu, log_var, target)
    n = mu.shape[0]
    prec = np.exp(-s)
    r = y - mu
    loss = 0.5 * np.sum(prec * r * r + s) / n
    d_mu = -prec * r / n
    d_s = 0.5 * (1.0 - prec * r * r) / n
    return float(loss), d_mu, d_s


def kl_to_standard_normal(mu, log_var) -> float:
    """KL(N(mu, e^s) || N(0, I)) = 0.5 sum(e^s + mu^2 - 1 - s), batch-averaged."""
    return kl_to_standard_normal_grad(mu, log_var)[0]


def kl_to_standard_normal_grad(mu, log_var):
    mu, s = _as_batch(mu, log_var)
    n = mu.shape[0]
    es = np.exp(s)
    loss = 0.5 * np.sum(np.expm1(s) - s + mu * mu) / n
    return float(loss), mu / n, 0.5 * (es - 1.0) / n


def mse_grad(pred, target):
    """Squared error summed over dimensions, averaged over batch."""
    pred, target = _as_batch(pred, target)
    r = pred - target
    n = pred.shape[0]
    return float(np.sum(r * r) / n), 2.0 * r / n


def minibatches(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> Iterator[np.ndarray]:
    """Index batches over ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
