"""
Closed-loop evaluation of the learned stack:
observe -> sample latents -> ensemble predictions -> decision -> step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import sim
from .config import DE_MEAN, MI_MODE, RunConfig, check_compatible, derive_seed
from .control import Ensemble, ensemble_predict
from .decision import DEFAULT_GRID_N, DEFAULT_MC_SAMPLES, SMALLEST_ABS, de_mean, mi_mode
from .perception import PerceptionModel, sample_latents

log = logging.getLogger(__name__)


@dataclass
class Models:
    perception: PerceptionModel
    ensemble: Ensemble                      # probabilistic, N >= 5
    deterministic: Optional[Ensemble] = None

    def ensemble_for(self, variant) -> Ensemble:
        if variant.policy_kind == "deterministic":
            if self.deterministic is None:
                raise ValueError(f"{variant.id} needs a deterministic policy")
            ens = self.deterministic
        else:
            ens = self.ensemble
        if len(ens) < variant.N:
            raise ValueError(f"{variant.id} needs {variant.N} members, have {len(ens)}")
        return ens.subset(variant.N)


def decide(pset, strategy, rng, mc_samples=DEFAULT_MC_SAMPLES, grid_n=DEFAULT_GRID_N, mode_rule=SMALLEST_ABS):
    """Apply a strategy; returns (command, info)."""
    if strategy == DE_MEAN:
        cmd, var = de_mean(pset)
        return cmd, {"mixture_var": var}
    if strategy == MI_MODE:
        cmd, sel, scores = mi_mode(pset, mc_samples, rng, grid_n, mode_rule)
        return cmd, {"selected": sel, "mi_scores": scores.per_member}
    raise ValueError(f"unknown strategy {strategy!r}")


def learned_controller(models: Models, variant, strategy, track, rng, mc_samples=DEFAULT_MC_SAMPLES,
                       grid_n=DEFAULT_GRID_N, mode_rule=SMALLEST_ABS) -> Callable:
    variant = check_compatible(variant, strategy)
    ens = models.ensemble_for(variant)

    def controller(state):
        obs = sim.observe(state, track, rng, noise_on=True)
        latents = sample_latents(models.perception, obs, variant.M, variant.perception_mode, rng)
        pset = ensemble_predict(ens, latents)
        return decide(pset, strategy, rng, mc_samples, grid_n, mode_rule)

    return controller


def run_episode(models: Models, strategy, variant, track, seed=0, dt=sim.DT,
                timeout_per_gate=sim.TIMEOUT_PER_GATE, mc_samples=DEFAULT_MC_SAMPLES, grid_n=DEFAULT_GRID_N,
                mode_rule=SMALLEST_ABS, controller: Optional[Callable] = None, record=False) -> sim.EpisodeResult:
    """One mission on ``track``. ``controller`` (state -> (cmd, info)) replaces the learned stack."""
    if controller is None:
        rng = np.random.default_rng(seed)
        controller = learned_controller(models, variant, strategy, track, rng, mc_samples, grid_n, mode_rule)
    return sim.fly(track, controller, dt, timeout_per_gate, log_fn=sim.log_record if record else None)


def episode_seeds(seed, n_tracks, trials):
    """Track seed per track index and inference seed per (track, trial)."""
    tracks = [derive_seed(seed, "track", i) for i in range(n_tracks)]
    infer = [[derive_seed(seed, "trial", i, j) for j in range(trials)] for i in range(n_tracks)]
    return tracks, infer


def evaluate(models: Models, variant, strategy, run: RunConfig, controller_factory=None, record=False):
    """Mean gates passed over ``run.n_tracks`` tracks x ``run.trials`` trials.

    Returns ``(mean, rows)`` with one row per episode, ordered by (track, trial).
    ``controller_factory(track)`` substitutes a non-learned controller.
    """
    if controller_factory is None:
        variant = check_compatible(variant, strategy)
    track_seeds, infer_seeds = episode_seeds(run.seed, run.n_tracks, run.trials)
    rows = []
    for i, ts in enumerate(track_seeds):
        track = sim.generate_track(run.grn, run.ghn, ts)
        for j, s in enumerate(infer_seeds[i]):
            ctl = controller_factory(track) if controller_factory is not None else None
            res = run_episode(models, strategy, variant, track, seed=s, mc_samples=run.mc_samples,
                              grid_n=run.grid_n, mode_rule=run.mode_rule, controller=ctl, record=record)
            rows.append({"track": i, "trial": j, "track_seed": ts, "inference_seed": s,
                         "gates_passed": res.gates_passed, "termination": res.termination,
                         "time": round(res.time, 6), "result": res})
            log.info("track %d trial %d: %d gates (%s)", i, j, res.gates_passed, res.termination)
    mean = float(np.mean([r["gates_passed"] for r in rows]))
    return mean, rows
