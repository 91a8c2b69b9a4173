"""
CMVAE-lite: a stochastic encoder from 16-d sensor vectors to a 10-d latent,
with a decoder to the relative gate pose (x, y, z, yaw).

Epistemic spread in the latent comes from Monte Carlo dropout in the encoder;
aleatoric spread from the encoder's predicted variance.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core
from .errors import ContractError, InputShapeError
from .nn_core import EVAL_DROPOUT_OFF, EVAL_DROPOUT_ON, TRAIN_DROPOUT, DenseNet, TrainConfig

log = logging.getLogger(__name__)

OBS_DIM = 16
POSE_DIM = 4
LATENT_DIM = 10
DEFAULT_BETA = 0.001
DEFAULT_DROPOUT = 0.1

MCD = "mcd"
LATENT_NOISE = "latent_noise"
MEAN_ONLY = "mean_only"
SAMPLING_MODES = (MCD, LATENT_NOISE, MEAN_ONLY)


@dataclass
class GaussianVec:
    """Diagonal Gaussian; ``mu`` and ``var`` have equal shape."""
    mu: np.ndarray
    var: np.ndarray


@dataclass
class LatentSet:
    samples: np.ndarray  # (M, LATENT_DIM)
    mode: str

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[1] != LATENT_DIM or len(self.samples) < 1:
            raise InputShapeError(f"latent samples must have shape (M>=1, {LATENT_DIM})")
        if self.mode == MEAN_ONLY and len(self.samples) != 1:
            raise ContractError("mean_only latent sets hold exactly one sample")

    def __len__(self):
        return len(self.samples)


@dataclass
class PerceptionModel:
    encoder: DenseNet
    decoder: DenseNet
    beta: float = DEFAULT_BETA
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(OBS_DIM))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(OBS_DIM))
    noise: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoder.n_out != 2 * LATENT_DIM or self.decoder.n_in != LATENT_DIM:
            raise InputShapeError("encoder must emit 2 x latent dim and decoder consume latent dim")

    @classmethod
    def init(cls, seed=0, beta=DEFAULT_BETA, dropout_rate=DEFAULT_DROPOUT, hidden=64):
        rng = np.random.default_rng(seed)
        enc = DenseNet.init([OBS_DIM, hidden, hidden, 2 * LATENT_DIM], dropout_rate, rng=rng)
        dec = DenseNet.init([LATENT_DIM, hidden, POSE_DIM], 0.0, rng=rng)
        return cls(enc, dec, beta)

    def normalize(self, obs):
        return (np.asarray(obs, dtype=float) - self.input_mean) / self.input_std

    def to_dict(self):
        return {
            "format_version": nn_core.FORMAT_VERSION,
            "latent_dim": LATENT_DIM,
            "beta": self.beta,
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "noise": self.noise,
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("latent_dim") != LATENT_DIM:
            raise InputShapeError(f"stored latent_dim {d.get('latent_dim')} != {LATENT_DIM}")
        return cls(DenseNet.from_dict(d["encoder"]), DenseNet.from_dict(d["decoder"]), d["beta"],
                   np.asarray(d["input_mean"]), np.asarray(d["input_std"]), d.get("noise", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_obs(obs):
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != OBS_DIM:
        raise InputShapeError(f"observation must have {OBS_DIM} features, got shape {obs.shape}")
    return obs


def _encode_raw(model, obs, mode, rng):
    out, cache = nn_core.forward(model.encoder, model.normalize(obs), mode, rng)
    return out[..., :LATENT_DIM], out[..., LATENT_DIM:], cache


def encode(model: PerceptionModel, obs, mode=EVAL_DROPOUT_OFF, rng=None) -> GaussianVec:
    """Encoder posterior (mu, sigma^2) for one observation or a batch."""
    obs = _check_obs(obs)
    mu, log_var, _ = _encode_raw(model, obs, mode, rng)
    return GaussianVec(mu, np.exp(log_var))


def sample_latents(model: PerceptionModel, obs, M: int, mode: str, rng, noise_scale=1.0) -> LatentSet:
    """Draw a set of latent samples for ``obs``.

    ``mcd``: M dropout-on passes, each followed by a reparameterised draw.
    ``latent_noise``: one deterministic pass, M draws from its Gaussian.
    ``mean_only``: the encoder mean of a deterministic pass.
    ``noise_scale`` multiplies the standard-normal draws (0 disables them).
    """
    if M < 1:
        raise ContractError("M must be >= 1")
    if mode not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    obs = _check_obs(obs)
    if obs.ndim != 1:
        raise InputShapeError("sample_latents takes a single observation")
    if mode == MEAN_ONLY:
        g = encode(model, obs)
        return LatentSet(g.mu[None, :], mode)
    if mode == MCD:
        # one batch row per stochastic pass; each row draws its own dropout masks
        g = encode(model, np.broadcast_to(obs, (M, OBS_DIM)), EVAL_DROPOUT_ON, rng)
        mu, var = g.mu, g.var
    else:
        g = encode(model, obs)
        mu, var = np.broadcast_to(g.mu, (M, LATENT_DIM)), np.broadcast_to(g.var, (M, LATENT_DIM))
    eps = rng.standard_normal((M, LATENT_DIM)) * noise_scale
    return LatentSet(mu + np.sqrt(var) * eps, mode)


def decode_pose(model: PerceptionModel, z) -> np.ndarray:
    """Deterministic gate pose [x, y, z, yaw] for latent ``z`` (or a batch)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != LATENT_DIM:
        raise InputShapeError(f"latent must have {LATENT_DIM} entries, got shape {z.shape}")
    return model.decoder(z)


def _split(n, frac, rng):
    order = rng.permutation(n)
    n_train = min(n, max(1, int(round(frac * n))))
    return order[:n_train], order[n_train:]


def _as_arrays(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 2 and np.ndim(dataset[0]) == 2:
        obs, target = dataset
    else:
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        obs, target = zip(*dataset)
    obs, target = np.asarray(obs, dtype=float), np.asarray(target, dtype=float)
    if len(obs) == 0:
        raise ValueError("dataset is empty")
    return obs, target


def _loss_terms(model, obs_n, pose, rng, mode):
    """Forward through encoder, reparameterised draw and decoder."""
    enc_out, enc_cache = nn_core.forward(model.encoder, obs_n, mode, rng)
    mu, s = enc_out[:, :LATENT_DIM], enc_out[:, LATENT_DIM:]
    eps = rng.standard_normal(mu.shape)
    sd = np.exp(0.5 * s)
    z = mu + sd * eps
    pred, dec_cache = nn_core.forward(model.decoder, z, TRAIN_DROPOUT, rng)
    mse, d_pred = nn_core.mse_grad(pred, pose)
    kl, d_mu_kl, d_s_kl = nn_core.kl_to_standard_normal_grad(mu, s)
    return mse, kl, (enc_cache, dec_cache, d_pred, d_mu_kl, d_s_kl, sd, eps)


def pose_mse(model, obs, pose) -> float:
    """Mean squared pose error of decode(encoder mean), summed over pose dims."""
    pred = decode_pose(model, encode(model, obs).mu)
    return float(np.mean(np.sum((pred - pose) ** 2, axis=1)))


def train_cmvae_lite(dataset, config: TrainConfig, beta=DEFAULT_BETA, dropout_rate=DEFAULT_DROPOUT,
                     hidden=64, train_frac=0.8) -> PerceptionModel:
    """Fit encoder and decoder on (observation, gate pose) pairs.

    Loss per batch: pose MSE of the decoded reparameterised latent plus
    ``beta`` times KL to N(0, I). Final losses land in ``model.metrics``.
    """
    obs, pose = _as_arrays(dataset)
    rng = np.random.default_rng(config.seed)
    model = PerceptionModel.init(seed=rng.integers(2**63), beta=beta, dropout_rate=dropout_rate, hidden=hidden)
    tr, va = _split(len(obs), train_frac, rng)
    model.input_mean = obs[tr].mean(axis=0)
    std = obs[tr].std(axis=0)
    model.input_std = np.where(std > 1e-8, std, 1.0)
    obs_n = model.normalize(obs)

    enc_opt = nn_core.Adam(model.encoder, config)
    dec_opt = nn_core.Adam(model.decoder, config)
    untrained_val = pose_mse(model, obs[va], pose[va]) if len(va) else float("nan")
    history = []
    for epoch in range(config.epochs):
        tot = 0.0
        for idx in nn_core.minibatches(len(tr), config.batch_size, rng):
            b = tr[idx]
            mse, kl, (enc_cache, dec_cache, d_pred, d_mu_kl, d_s_kl, sd, eps) = _loss_terms(
                model, obs_n[b], pose[b], rng, TRAIN_DROPOUT)
            dec_grads, d_z = nn_core.backward(model.decoder, dec_cache, d_pred, input_grad=True)
            d_mu = d_z + beta * d_mu_kl
            d_s = d_z * 0.5 * sd * eps + beta * d_s_kl
            enc_grads = nn_core.backward(model.encoder, enc_cache, np.concatenate([d_mu, d_s], axis=1))
            dec_opt.step(dec_grads)
            enc_opt.step(enc_grads)
            tot += (mse + beta * kl) * len(b)
        history.append(tot / len(tr))
    val_loss = float("nan")
    if len(va):
        mse, kl, _ = _loss_terms(model, obs_n[va], pose[va], np.random.default_rng(config.seed + 1), EVAL_DROPOUT_OFF)
        val_loss = mse + beta * kl
    model.metrics = {
        "n_train": int(len(tr)),
        "n_val": int(len(va)),
        "train_loss": float(history[-1]),
        "val_loss": float(val_loss),
        "train_pose_mse": pose_mse(model, obs[tr], pose[tr]),
        "val_pose_mse": pose_mse(model, obs[va], pose[va]) if len(va) else float("nan"),
        "untrained_val_pose_mse": untrained_val,
        "loss_history": [float(h) for h in history],
    }
    log.info("cmvae-lite: train loss %.4f, val pose mse %.4f", history[-1], model.metrics["val_pose_mse"])
    return model

