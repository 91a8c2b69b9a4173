"""
Decision strategies that collapse a predictive set into one command.

``de_mean``   uniform-mixture mean over every member x latent component.
``mi_mode``   pick the member with the smallest sampled MI lower bound, then
              read a conservative command off that member's densities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .control import CMD_LIMITS, DETERMINISTIC, PredictiveSet
from .errors import NumericDomainError, UnsupportedStrategyError

DEFAULT_MC_SAMPLES = 1024
DEFAULT_GRID_N = 512
MODE_PRUNE_FRACTION = 0.1

SMALLEST_ABS = "smallest_abs"
SIGNED_MIN = "signed_min"

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ControlCommand:
    vx: float
    vy: float
    vz: float
    yaw_rate: float

    @classmethod
    def from_array(cls, a, clip=True):
        a = np.asarray(a, dtype=float)
        if not np.all(np.isfinite(a)):
            raise NumericDomainError(f"non-finite command {a}")
        if clip:
            a = np.clip(a, -CMD_LIMITS, CMD_LIMITS)
        return cls(*(float(v) for v in a))

    def as_array(self):
        return np.array([self.vx, self.vy, self.vz, self.yaw_rate])


@dataclass
class MixtureDensity1D:
    means: np.ndarray
    vars: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_1d(np.asarray(self.means, dtype=float))
        self.vars = np.atleast_1d(np.asarray(self.vars, dtype=float))
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if not (self.means.shape == self.vars.shape == self.weights.shape) or self.means.size == 0:
            raise ValueError("mixture arrays must share one nonzero length")
        if np.any(self.vars <= 0):
            raise NumericDomainError("mixture component variances must be positive")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("mixture weights must be non-negative and sum to 1")

    @classmethod
    def uniform(cls, means, vars_):
        means = np.ravel(means)
        return cls(means, np.ravel(vars_), np.full(means.size, 1.0 / means.size))


@dataclass
class MiScores:
    per_member_per_dim: np.ndarray  # (N, D) nats

    @property
    def per_member(self):
        return self.per_member_per_dim.sum(axis=1)


def _moments(pset: PredictiveSet):
    mu = pset.mu.reshape(-1, pset.mu.shape[-1])
    var = pset.var.reshape(-1, pset.var.shape[-1])
    mean = mu.mean(axis=0)
    # equals mean(var + mu^2) - mean^2, written so it stays >= mean(var)
    mix_var = var.mean(axis=0) + ((mu - mean) ** 2).mean(axis=0)
    return mean, mix_var


def de_mean(pset: PredictiveSet):
    """Uniform-mixture mean command and per-dimension mixture variance."""
    if len(pset) == 0:
        raise ValueError("empty predictive set")
    mean, mix_var = _moments(pset)
    return ControlCommand.from_array(mean), mix_var


def mixture_log_pdf(mix: MixtureDensity1D, y):
    y = np.asarray(y, dtype=float)[..., None]
    logc = (np.log(mix.weights, where=mix.weights > 0, out=np.full(mix.weights.shape, -np.inf))
            - 0.5 * np.log(mix.vars) - _HALF_LOG_2PI - 0.5 * (y - mix.means) ** 2 / mix.vars)
    m = np.max(logc, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(logc - m), axis=-1, keepdims=True)))[..., 0]


def mixture_pdf(mix: MixtureDensity1D, y):
    return np.exp(mixture_log_pdf(mix, y))


def _standard_draws(rng, shape, S):
    """Antithetic standard-normal draws along the last axis (length S)."""
    half = rng.standard_normal(shape + ((S + 1) // 2,))
    return np.concatenate([half, -half], axis=-1)[..., :S]


def _log_mean_exp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.mean(np.exp(a - m), axis=axis))


def _log_ratios(g_mu, g_var, eps, mix_mu, mix_var, mix_logw=None, chunk_elems=2_000_000):
    """Per-draw log(g(y) / mixture(y)) at y = g_mu + sqrt(g_var) * eps.

    g_mu, g_var: (K,); eps: (K, S); mixture: (C,). The Gaussian's own log
    density is computed exactly like a mixture component's, so a mixture made
    of copies of the Gaussian gives a log ratio of exactly zero.
    """
    K, S = eps.shape
    step = max(1, chunk_elems // (S * mix_mu.size))
    out = np.empty((K, S))
    for lo in range(0, K, step):
        sl = slice(lo, lo + step)
        y = g_mu[sl, None] + np.sqrt(g_var[sl, None]) * eps[sl]         # (k, S)
        r = y - g_mu[sl, None]
        log_g = -0.5 * np.log(g_var[sl, None]) - 0.5 * r * r / g_var[sl, None]
        d = y[:, :, None] - mix_mu                                       # (k, S, C)
        a = -0.5 * np.log(mix_var) - 0.5 * d * d / mix_var - log_g[:, :, None]
        if mix_logw is None:
            log_ratio = _log_mean_exp(a, axis=2)
        else:
            a = a + mix_logw
            m = np.max(a, axis=2, keepdims=True)
            log_ratio = m[..., 0] + np.log(np.sum(np.exp(a - m), axis=2))
        out[sl] = -log_ratio
    return out


@numba.njit(cache=True)
def _kl_rows(g_mu, g_var, eps, mix_mu, mix_var):
    """KL(g_k || uniform mixture) per row k, averaging log ratios over eps[k % len(eps)].

    Same arithmetic as ``_log_ratios``: a component equal to g contributes a
    log ratio of exactly zero.
    """
    n_eps, S = eps.shape
    C = mix_mu.size
    half_log_v = 0.5 * np.log(mix_var)
    inv_2v = 0.5 / mix_var
    log_c = np.log(C)
    a = np.empty(C)
    out = np.empty(g_mu.size)
    for k in range(g_mu.size):
        sd = np.sqrt(g_var[k])
        hl = 0.5 * np.log(g_var[k])
        gi = 0.5 / g_var[k]
        e = eps[k % n_eps]
        tot = 0.0
        for s in range(S):
            y = g_mu[k] + sd * e[s]
            r = y - g_mu[k]
            log_g = -hl - r * r * gi
            top = -np.inf
            for c in range(C):
                d = y - mix_mu[c]
                a[c] = -half_log_v[c] - d * d * inv_2v[c] - log_g
                if a[c] > top:
                    top = a[c]
            acc = 0.0
            for c in range(C):
                acc += np.exp(a[c] - top)
            tot -= top + np.log(acc) - log_c
        out[k] = tot / S
    return out


def kl_gaussian_to_mixture(g, mix: MixtureDensity1D, S: int, rng, return_se=False):
    """Monte Carlo KL(g || mix) with ``S`` antithetic draws from ``g = (mean, var)``.

    With ``return_se`` also returns the standard error, computed from the
    antithetic pair averages.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    mean, var = float(g[0]), float(g[1])
    if not var > 0:
        raise NumericDomainError("Gaussian variance must be positive")
    eps = _standard_draws(rng, (1,), S)
    uniform = np.allclose(mix.weights, mix.weights[0])
    logw = None if uniform else np.log(mix.weights)
    lr = _log_ratios(np.array([mean]), np.array([var]), eps, mix.means, mix.vars, logw)[0]
    kl = float(lr.mean())
    if not return_se:
        return kl
    half = S // 2
    units = 0.5 * (lr[:half] + lr[(S + 1) // 2:(S + 1) // 2 + half]) if half else lr
    se = float(units.std(ddof=1) / np.sqrt(len(units))) if len(units) > 1 else float("inf")
    return kl, se


def mi_lower_bound(pset: PredictiveSet, S: int = DEFAULT_MC_SAMPLES, rng=None) -> MiScores:
    """Per-member, per-dimension sampled MI lower bound.

    Score(n, d) = mean over latents m of KL(g[n, m, d] || mix_d), where mix_d
    is the uniform mixture of all N x M component Gaussians in dimension d.
    Draws are shared across members (one antithetic set per latent) so
    mirrored or shifted members see identical noise.
    """
    if pset.kind == DETERMINISTIC or np.any(pset.var <= 0):
        raise UnsupportedStrategyError("MI scores need probabilistic predictions with positive variance")
    if S < 1:
        raise ValueError("S must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    N, M, D = pset.mu.shape
    eps = _standard_draws(rng, (D, M), S)                       # (D, M, S)
    scores = np.empty((N, D))
    for d in range(D):
        mu = np.ascontiguousarray(pset.mu[:, :, d]).ravel()
        var = np.ascontiguousarray(pset.var[:, :, d]).ravel()
        # row n * M + m uses the draws of latent m
        kl = _kl_rows(mu, var, eps[d], mu, var)
        scores[:, d] = kl.reshape(N, M).mean(axis=1)
    return MiScores(scores)


def select_member_min_mi(scores) -> int:
    """Index of the member with the smallest total score (lowest index on ties)."""
    total = scores.per_member if isinstance(scores, MiScores) else np.asarray(scores, dtype=float)
    return int(np.argmin(total))


def mixture_grid(mix: MixtureDensity1D, grid_n: int = DEFAULT_GRID_N):
    sd = np.sqrt(mix.vars.max())
    return np.linspace(mix.means.min() - 3 * sd, mix.means.max() + 3 * sd, grid_n)


def extract_modes(mix: MixtureDensity1D, grid_n: int = DEFAULT_GRID_N):
    """Local maxima of the mixture density on a grid, as (location, density) sorted by location.

    Plateaus count once, at their centre. Modes below 10% of the highest grid
    density are dropped.
    """
    if grid_n < 64:
        raise ValueError("grid_n must be >= 64")
    y = mixture_grid(mix, grid_n)
    p = mixture_pdf(mix, y)
    # collapse runs of equal density so flat tops are handled once
    starts = np.flatnonzero(np.r_[True, p[1:] != p[:-1]])
    ends = np.r_[starts[1:], len(p)] - 1
    vals = p[starts]
    modes = []
    for i, (s, e) in enumerate(zip(starts, ends)):
        left = vals[i - 1] if i > 0 else -np.inf
        right = vals[i + 1] if i + 1 < len(vals) else -np.inf
        if vals[i] > left and vals[i] > right:
            c = (s + e) // 2
            modes.append((float(y[c]), float(p[c])))
    peak = p.max()
    return [m for m in modes if m[1] >= MODE_PRUNE_FRACTION * peak]


def _pick_mode(modes, rule):
    locs = np.array([m[0] for m in modes])
    if rule == SIGNED_MIN:
        return float(locs.min())
    return float(locs[np.argmin(np.abs(locs))])


def mi_mode_command(pset: PredictiveSet, selected: int, grid_n: int = DEFAULT_GRID_N,
                    mode_rule: str = SMALLEST_ABS) -> ControlCommand:
    """Conservative command from one member's predictions.

    Forward speed: the smallest predicted mean over that member's latents.
    Lateral, vertical and yaw rate: the lowest-velocity mode of the member's
    uniform mixture over latents (smallest magnitude, or smallest signed value
    with ``mode_rule="signed_min"``).
    """
    if pset.kind == DETERMINISTIC or np.any(pset.var <= 0):
        raise UnsupportedStrategyError("mode extraction needs probabilistic predictions")
    if mode_rule not in (SMALLEST_ABS, SIGNED_MIN):
        raise ValueError(f"unknown mode rule {mode_rule!r}")
    mu, var = pset.mu[selected], pset.var[selected]                # (M, D)
    cmd = np.empty(mu.shape[1])
    cmd[0] = mu[:, 0].min()
    for d in range(1, mu.shape[1]):
        modes = extract_modes(MixtureDensity1D.uniform(mu[:, d], var[:, d]), grid_n)
        cmd[d] = _pick_mode(modes, mode_rule)
    return ControlCommand.from_array(cmd)


def mi_mode(pset: PredictiveSet, S: int = DEFAULT_MC_SAMPLES, rng=None, grid_n: int = DEFAULT_GRID_N,
            mode_rule: str = SMALLEST_ABS):
    """Full MI-mode strategy; returns (command, selected member, scores)."""
    scores = mi_lower_bound(pset, S, rng)
    sel = select_member_min_mi(scores)
    return mi_mode_command(pset, sel, grid_n, mode_rule), sel, scores
