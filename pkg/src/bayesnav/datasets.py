"""
Synthetic training data from the simulator.

Perception pairs: (sensor vector, true pose of the visible gate that appears
closest to the heading). Control pairs: (sensor vector, expert command) along
perturbed expert rollouts so the data covers recovery states. Half of the
rollouts fly the left-right mirror image of their track (clockwise), so gates
on either side of the heading are equally represented. Those rollouts keep
only states with a gate in view: with nothing visible the expert's command
depends on the course direction, and that is always counter-clockwise at
evaluation.
"""

from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import sim
from .decision import ControlCommand

BEARING, FLAG = 4, 7          # offsets inside an observation slot

PERCEPTION = "perception"
CONTROL = "control"
DATA_FORMAT_VERSION = 1

MAX_GRN, MAX_GHN = 1.5, 3.0
SCENE_FRACTION = 0.3          # share of free-floating one/two-gate scenes in perception data
ROLLOUT_STRIDE = 5            # keep every k-th step of a rollout
EXEC_NOISE = np.array([0.4, 0.4, 0.3, 0.35])
EXEC_NOISE_CORR = 0.95
EXEC_NOISE_SCALE = (0.0, 1.0)  # per-rollout multiplier range for EXEC_NOISE
MIRROR_FRACTION = 0.5         # share of rollouts flown on the mirrored track
_FLIP_Y = np.array([1.0, -1.0, 1.0])


def target_slot(obs):
    """Visible slot with the smallest observed |bearing|.

    Choosing by the sensed rather than the true bearing keeps the label a
    function of the input, so near-ties stay learnable.
    """
    visible = [k for k in range(sim.N_SLOTS) if obs[k * sim.SLOT_DIM + FLAG] == 1]
    return min(visible, key=lambda k: abs(obs[k * sim.SLOT_DIM + BEARING]))


def _labelled(gates, rng):
    obs = sim.observation_from_gates(gates, rng)
    rel, rel_yaw = gates[target_slot(obs)]
    return obs, np.r_[rel, rel_yaw]


def mirror_track(track: sim.Track) -> sim.Track:
    """Reflection through the world x-z plane; the course then runs clockwise."""
    gates = [sim.Gate(g.center * _FLIP_Y, sim.wrap_angle(-g.yaw), g.radius) for g in track.gates]
    return sim.Track(gates, track.grn, track.ghn, track.seed)


def mirror_state(state: sim.UavState) -> sim.UavState:
    return replace(state, position=state.position * _FLIP_Y, yaw=sim.wrap_angle(-state.yaw))


def _rollout_states(rng, n_states):
    """States visited by the expert under correlated execution noise on random tracks."""
    out = []
    while len(out) < n_states:
        track = sim.generate_track(rng.uniform(0, MAX_GRN), rng.uniform(0, MAX_GHN), int(rng.integers(2**31)))
        start = sim.start_state(track)
        mirrored = rng.random() < MIRROR_FRACTION
        if mirrored:
            track, start = mirror_track(track), mirror_state(start)
        noise = np.zeros(4)
        scale = EXEC_NOISE * rng.uniform(*EXEC_NOISE_SCALE)

        def controller(state):
            nonlocal noise
            noise = EXEC_NOISE_CORR * noise + math.sqrt(1 - EXEC_NOISE_CORR ** 2) * rng.normal(0, scale)
            cmd = sim.expert_command(state, track)
            keep = not mirrored or sim.visible_gates(state, track)
            if int(round(state.time / sim.DT)) % ROLLOUT_STRIDE == 0 and keep:
                out.append((state, track))
            return ControlCommand.from_array(cmd.as_array() + noise), {}

        sim.fly(track, controller, timeout_per_gate=10.0, state=start)
    return out[:n_states]


def _random_scene(rng):
    """UAV at the origin facing +x with one or two gates inside the field of view."""
    gates = []
    for _ in range(1 + int(rng.random() < 0.7)):
        r = rng.uniform(2.0, 14.0)
        b = rng.uniform(-sim.FOV_H, sim.FOV_H) * 0.98
        e = rng.uniform(-sim.FOV_V, sim.FOV_V) * 0.98
        rel = r * np.array([math.cos(e) * math.cos(b), math.cos(e) * math.sin(b), math.sin(e)])
        gates.append((rel, rng.uniform(-math.pi / 2, math.pi / 2)))
    gates.sort(key=lambda g: float(np.linalg.norm(g[0])))
    return gates


def perception_dataset(count, seed):
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    n_scene = int(round(SCENE_FRACTION * count))
    obs, pose = [], []
    for _ in range(n_scene):
        o, p = _labelled(_random_scene(rng), rng)
        obs.append(o)
        pose.append(p)
    while len(obs) < count:
        for state, track in _rollout_states(rng, 2 * (count - len(obs))):
            gates = sim.visible_gates(state, track)
            if not gates:
                continue
            o, p = _labelled(gates, rng)
            obs.append(o)
            pose.append(p)
            if len(obs) == count:
                break
    order = rng.permutation(count)
    return np.array(obs)[order], np.array(pose)[order]


def control_dataset(count, seed):
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    obs, cmd = [], []
    for state, track in _rollout_states(rng, count):
        obs.append(sim.observe(state, track, rng, noise_on=True))
        cmd.append(sim.expert_command(state, track).as_array())
    return np.array(obs), np.array(cmd)


def generate(kind, count, seed):
    if kind == PERCEPTION:
        return perception_dataset(count, seed)
    if kind == CONTROL:
        return control_dataset(count, seed)
    raise ValueError(f"unknown dataset kind {kind!r}")


def save_dataset(path, kind, features, targets, seed):
    """Line-delimited JSON: one header line, then one record per pair."""
    key = "pose" if kind == PERCEPTION else "command"
    with open(path, "w") as fh:
        fh.write(json.dumps({"format_version": DATA_FORMAT_VERSION, "kind": kind, "count": len(features),
                             "seed": seed}) + "\n")
        for f, t in zip(features, targets):
            fh.write(json.dumps({"features": f.tolist(), key: t.tolist()}) + "\n")


def load_dataset(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != DATA_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format_version {header.get('format_version')!r}")
        key = "pose" if header["kind"] == PERCEPTION else "command"
        rows = [json.loads(line) for line in fh if line.strip()]
    feats = np.array([r["features"] for r in rows], dtype=float)
    targets = np.array([r[key] for r in rows], dtype=float)
    return header, feats, targets
