"""
Control policies over perception latents and the ensemble that turns a latent
set into a discrete posterior predictive (one Gaussian per member x latent).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core
from .errors import ContractError, InputShapeError
from .nn_core import TRAIN_DROPOUT, DenseNet, TrainConfig
from .perception import LATENT_DIM, GaussianVec, LatentSet, PerceptionModel, encode

log = logging.getLogger(__name__)

CMD_DIM = 4
PROBABILISTIC = "probabilistic"
DETERMINISTIC = "deterministic"
KINDS = (PROBABILISTIC, DETERMINISTIC)

V_MAX = 3.0
YAW_RATE_MAX = 1.5
# expert commands live in this box, so predicted means are projected onto it
CMD_LIMITS = np.array([V_MAX, V_MAX, V_MAX, YAW_RATE_MAX])
# predicted log-variances are clamped so variances stay positive and finite
LOG_VAR_RANGE = (-20.0, 20.0)


@dataclass
class PolicyModel:
    kind: str
    net: DenseNet
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        want = 2 * CMD_DIM if self.kind == PROBABILISTIC else CMD_DIM
        if self.net.n_out != want or self.net.n_in != LATENT_DIM:
            raise InputShapeError(f"{self.kind} policy needs a {LATENT_DIM} -> {want} net")

    @classmethod
    def init(cls, kind=PROBABILISTIC, seed=0, hidden=64):
        n_out = 2 * CMD_DIM if kind == PROBABILISTIC else CMD_DIM
        return cls(kind, DenseNet.init([LATENT_DIM, hidden, hidden, n_out], seed=seed), seed)


@dataclass
class Ensemble:
    members: list

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if len({m.kind for m in self.members}) != 1:
            raise ValueError("ensemble members must share one kind")
        if len({m.seed for m in self.members}) != len(self.members):
            raise ValueError("ensemble member seeds must be distinct")

    @property
    def kind(self):
        return self.members[0].kind

    def __len__(self):
        return len(self.members)

    def subset(self, n):
        return Ensemble(self.members[:n])

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for i, m in enumerate(self.members):
            name = f"member_{i}.json"
            nn_core.save_net(m.net, directory / name)
            files.append(name)
        manifest = {"format_version": nn_core.FORMAT_VERSION, "kind": self.kind,
                    "seeds": [m.seed for m in self.members], "members": files}
        (directory / "ensemble.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "ensemble.json").read_text())
        return cls([PolicyModel(manifest["kind"], nn_core.load_net(directory / f), seed)
                    for f, seed in zip(manifest["members"], manifest["seeds"])])


@dataclass
class PredictiveSet:
    """Member x latent grid of Gaussian command predictions.

    ``mu`` and ``var`` have shape (N, M, 4). Deterministic policies store
    ``var == 0``; those sets are excluded from density-based decisions.
    """
    mu: np.ndarray
    var: np.ndarray
    kind: str = PROBABILISTIC
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.var = np.asarray(self.var, dtype=float)
        if self.mu.ndim != 3 or self.mu.shape != self.var.shape or self.mu.shape[0] < 1 or self.mu.shape[1] < 1:
            raise InputShapeError(f"predictive set must be (N, M, D) pairs, got {self.mu.shape} / {self.var.shape}")

    @property
    def n_members(self):
        return self.mu.shape[0]

    @property
    def n_latents(self):
        return self.mu.shape[1]

    def __len__(self):
        return self.mu.shape[0] * self.mu.shape[1]

    def member(self, n):
        return PredictiveSet(self.mu[n:n + 1], self.var[n:n + 1], self.kind)

    def permuted(self, order):
        return PredictiveSet(self.mu[list(order)], self.var[list(order)], self.kind)


def _check_latents(z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != LATENT_DIM:
        raise InputShapeError(f"latent must have {LATENT_DIM} entries, got shape {z.shape}")
    return z


def policy_predict(policy: PolicyModel, z) -> GaussianVec:
    """Command Gaussian for latent ``z`` (single or batch); var is 0 for deterministic policies.

    Means are clipped to the command box and log-variances to ``LOG_VAR_RANGE``;
    training fits the raw outputs.
    """
    out = policy.net(_check_latents(z))
    mu = np.clip(out[..., :CMD_DIM], -CMD_LIMITS, CMD_LIMITS)
    if policy.kind == DETERMINISTIC:
        return GaussianVec(mu, np.zeros_like(mu))
    return GaussianVec(mu, np.exp(np.clip(out[..., CMD_DIM:], *LOG_VAR_RANGE)))


def ensemble_predict(ensemble: Ensemble, latents) -> PredictiveSet:
    samples = latents.samples if isinstance(latents, LatentSet) else np.atleast_2d(_check_latents(latents))
    preds = [policy_predict(m, samples) for m in ensemble.members]
    return PredictiveSet(np.stack([p.mu for p in preds]), np.stack([p.var for p in preds]), ensemble.kind)


def encode_dataset(perception: PerceptionModel, obs) -> np.ndarray:
    """Training latents for control: deterministic encoder means."""
    return encode(perception, np.atleast_2d(obs)).mu


def _member_seed(seed, n):
    return int(np.random.SeedSequence([seed, 0xC0, n]).generate_state(1)[0])


def train_policy(latents, commands, config: TrainConfig, kind=PROBABILISTIC, seed=0, hidden=64,
                 train_idx=None, val_idx=None) -> PolicyModel:
    """Fit one policy: heteroscedastic NLL (probabilistic) or MSE (deterministic)."""
    z, y = np.asarray(latents, dtype=float), np.asarray(commands, dtype=float)
    train_idx = np.arange(len(z)) if train_idx is None else train_idx
    rng = np.random.default_rng(seed)
    policy = PolicyModel(kind, DenseNet.init([LATENT_DIM, hidden, hidden, 2 * CMD_DIM if kind == PROBABILISTIC
                                              else CMD_DIM], rng=rng), seed)
    if kind == PROBABILISTIC:
        # start with unit variance so early NLL gradients stay bounded
        policy.net.biases[-1][CMD_DIM:] = 0.0
    opt = nn_core.Adam(policy.net, config)
    history = []
    for _ in range(config.epochs):
        tot = 0.0
        for idx in nn_core.minibatches(len(train_idx), config.batch_size, rng):
            b = train_idx[idx]
            out, cache = nn_core.forward(policy.net, z[b], TRAIN_DROPOUT, rng)
            loss, d_out = _loss_grad(kind, out, y[b])
            opt.step(nn_core.backward(policy.net, cache, d_out))
            tot += loss * len(b)
        history.append(tot / len(train_idx))
    policy.metrics = {"loss_history": history, "train_loss": history[-1]}
    if val_idx is not None and len(val_idx):
        policy.metrics["val_loss"] = policy_loss(policy, z[val_idx], y[val_idx])
        policy.metrics["val_mse"] = policy_mse(policy, z[val_idx], y[val_idx])
    return policy


def _loss_grad(kind, out, y):
    if kind == DETERMINISTIC:
        return nn_core.mse_grad(out, y)
    loss, d_mu, d_s = nn_core.heteroscedastic_nll_grad(out[:, :CMD_DIM], out[:, CMD_DIM:], y)
    return loss, np.concatenate([d_mu, d_s], axis=1)


def policy_loss(policy: PolicyModel, z, y) -> float:
    return _loss_grad(policy.kind, policy.net(np.atleast_2d(z)), np.atleast_2d(y))[0]


def policy_mse(policy: PolicyModel, z, y) -> float:
    mu = policy_predict(policy, np.atleast_2d(z)).mu
    return float(np.mean(np.sum((mu - np.atleast_2d(y)) ** 2, axis=1)))


def train_ensemble(latents, commands, N: int, config: TrainConfig, kind=PROBABILISTIC, hidden=64,
                   train_frac=0.9) -> Ensemble:
    """Train ``N`` independent policies on (latent, expert command) pairs.

    Members share the train/validation split but differ in initialisation and
    shuffling order, both derived from ``config.seed`` and the member index.
    """
    if N < 1:
        raise ContractError("ensemble size N must be >= 1")
    z, y = np.asarray(latents, dtype=float), np.asarray(commands, dtype=float)
    if len(z) == 0:
        raise ValueError("dataset is empty")
    if len(z) != len(y):
        raise InputShapeError("latents and commands differ in length")
    order = np.random.default_rng(config.seed).permutation(len(z))
    n_train = min(len(z), max(1, int(round(train_frac * len(z)))))
    tr, va = order[:n_train], order[n_train:]
    members = []
    for n in range(N):
        p = train_policy(z, y, config, kind, _member_seed(config.seed, n), hidden, tr, va)
        log.info("policy %d/%d (%s): train loss %.4f", n + 1, N, kind, p.metrics["train_loss"])
        members.append(p)
    ens = Ensemble(members)
    ens.metrics = {"n_train": int(len(tr)), "n_val": int(len(va)),
                   "members": [{k: v for k, v in m.metrics.items() if k != "loss_history"} for m in members]}
    return ens
