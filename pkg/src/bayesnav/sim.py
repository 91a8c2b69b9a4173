"""
Kinematic gate-track world.

Eight gates on a noisy circle, a velocity-integrating UAV, a field-of-view
sensor model, a proportional expert for imitation labels, and the episode
runner that scores gates passed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .decision import ControlCommand
from .errors import NumericDomainError

N_GATES = 8
BASE_RADIUS = 8.0
BASE_HEIGHT = 2.0
PASS_RADIUS = 0.75
MAX_GATES = 32
DT = 0.05
TIMEOUT_PER_GATE = 30.0
BOUNDS_RADIUS = 40.0

FOV_H = math.radians(45.0)
FOV_V = math.radians(30.0)
SLOT_DIM = 8
N_SLOTS = 2

POS_NOISE_FRAC = 0.05
ANGLE_NOISE = 0.02

K_F, K_L, K_Z, K_PSI = 0.6, 0.6, 0.8, 1.2
# the expert steers at a point this far past the gate centre along the gate normal
LEAD = 0.5

MISSION_COMPLETE = "mission_complete"
TIMEOUT = "timeout"
OUT_OF_BOUNDS = "out_of_bounds"


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    return math.pi if w == -math.pi else w


@dataclass
class Gate:
    center: np.ndarray
    yaw: float                # facing direction of travel
    radius: float = PASS_RADIUS

    @property
    def normal(self):
        return np.array([math.cos(self.yaw), math.sin(self.yaw), 0.0])


@dataclass
class Track:
    gates: list
    grn: float = 0.0
    ghn: float = 0.0
    seed: Optional[int] = None

    def to_dict(self):
        return {"grn": self.grn, "ghn": self.ghn, "seed": self.seed,
                "gates": [{"center": g.center.tolist(), "yaw": g.yaw, "radius": g.radius} for g in self.gates]}


@dataclass
class UavState:
    position: np.ndarray
    yaw: float
    time: float = 0.0
    gates_passed: int = 0
    next_gate: int = 0
    last_pass_time: float = 0.0


@dataclass
class EpisodeResult:
    gates_passed: int
    termination: str
    time: float
    log: list = field(default_factory=list)


def generate_track(grn=0.0, ghn=0.0, seed=None) -> Track:
    """Eight gates at 45 deg spacing; radius 8 + U(-grn, grn), height 2 + U(-ghn, ghn)."""
    if grn < 0 or ghn < 0:
        raise ValueError("noise half-ranges must be non-negative")
    rng = np.random.default_rng(seed)
    dr = rng.uniform(-grn, grn, N_GATES) if grn > 0 else np.zeros(N_GATES)
    dh = rng.uniform(-ghn, ghn, N_GATES) if ghn > 0 else np.zeros(N_GATES)
    gates = []
    for i in range(N_GATES):
        th = i * 2.0 * math.pi / N_GATES
        r = BASE_RADIUS + dr[i]
        gates.append(Gate(np.array([r * math.cos(th), r * math.sin(th), BASE_HEIGHT + dh[i]]),
                          wrap_angle(th + math.pi / 2)))
    return Track(gates, grn, ghn, seed)


def start_state(track: Track) -> UavState:
    """Nominal circle, halfway between the last and first gate, heading along the track."""
    th = -math.pi / N_GATES
    g0, g7 = track.gates[0], track.gates[-1]
    r = 0.5 * (np.hypot(*g0.center[:2]) + np.hypot(*g7.center[:2]))
    z = 0.5 * (g0.center[2] + g7.center[2])
    return UavState(np.array([r * math.cos(th), r * math.sin(th), z]), wrap_angle(th + math.pi / 2))


def step(state: UavState, cmd, dt=DT) -> UavState:
    """Euler step of body-frame velocities [vx, vy, vz, yaw_rate]."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    c = cmd.as_array() if isinstance(cmd, ControlCommand) else np.asarray(cmd, dtype=float)
    if not np.all(np.isfinite(c)):
        raise NumericDomainError(f"non-finite command {c}")
    cy, sy = math.cos(state.yaw), math.sin(state.yaw)
    dp = np.array([cy * c[0] - sy * c[1], sy * c[0] + cy * c[1], c[2]]) * dt
    return replace(state, position=state.position + dp, yaw=wrap_angle(state.yaw + c[3] * dt),
                   time=state.time + dt)


def to_body(state: UavState, p):
    d = np.asarray(p, dtype=float) - state.position
    cy, sy = math.cos(state.yaw), math.sin(state.yaw)
    return np.array([cy * d[0] + sy * d[1], -sy * d[0] + cy * d[1], d[2]])


def _slot(rel, rel_yaw):
    x, y, z = rel
    rng_ = float(np.linalg.norm(rel))
    return np.array([x, y, z, rel_yaw, math.atan2(y, x), math.atan2(z, math.hypot(x, y)), rng_, 1.0])


def in_fov(rel):
    x, y, z = rel
    return x > 0 and abs(math.atan2(y, x)) <= FOV_H and abs(math.atan2(z, math.hypot(x, y))) <= FOV_V


def visible_gates(state: UavState, track: Track):
    """Up to two (body-frame position, relative yaw) pairs of gates in the FoV, nearest first."""
    vis = []
    for g in track.gates:
        rel = to_body(state, g.center)
        if in_fov(rel):
            vis.append((float(np.linalg.norm(rel)), rel, wrap_angle(g.yaw - state.yaw)))
    vis.sort(key=lambda v: v[0])
    return [(rel, ry) for _, rel, ry in vis[:N_SLOTS]]


def observe(state: UavState, track: Track, rng=None, noise_on=True) -> np.ndarray:
    """16-d sensor vector: two slots (nearest visible gates by range) of
    [x, y, z, rel_yaw, bearing, elevation, range, flag]; empty slots are zero."""
    return observation_from_gates(visible_gates(state, track), rng, noise_on)


def observation_from_gates(gates, rng=None, noise_on=True) -> np.ndarray:
    """Build the sensor vector from up to two (body-frame position, relative yaw) pairs."""
    obs = np.zeros(N_SLOTS * SLOT_DIM)
    for k, (rel, rel_yaw) in enumerate(gates[:N_SLOTS]):
        rel = np.asarray(rel, dtype=float)
        ang_noise = np.zeros(3)
        if noise_on and rng is not None:
            rel = rel + rng.normal(0.0, POS_NOISE_FRAC * np.linalg.norm(rel), 3)
            ang_noise = rng.normal(0.0, ANGLE_NOISE, 3)
        s = _slot(rel, rel_yaw)
        s[3:6] += ang_noise
        obs[k * SLOT_DIM:(k + 1) * SLOT_DIM] = s
    return obs


def expert_command(state: UavState, track: Track) -> ControlCommand:
    """Proportional guidance at a point just beyond the next gate centre."""
    g = track.gates[state.next_gate]
    rel = to_body(state, g.center + LEAD * g.normal)
    bearing = math.atan2(rel[1], rel[0])
    rng_ = math.hypot(rel[0], rel[1])
    return ControlCommand.from_array([K_F * math.cos(bearing) * rng_, K_L * math.sin(bearing) * rng_,
                                      K_Z * rel[2], K_PSI * bearing])


def gate_passed(prev: UavState, curr: UavState, gate: Gate) -> bool:
    """Segment prev -> curr crosses the gate plane forwards within the pass radius."""
    n = gate.normal
    s0 = float(np.dot(prev.position - gate.center, n))
    s1 = float(np.dot(curr.position - gate.center, n))
    if not (s0 < 0.0 <= s1):
        return False
    t = s0 / (s0 - s1)
    hit = prev.position + t * (curr.position - prev.position)
    return float(np.linalg.norm(hit - gate.center)) <= gate.radius


def advance(prev: UavState, curr: UavState, track: Track) -> UavState:
    if gate_passed(prev, curr, track.gates[curr.next_gate]):
        return replace(curr, gates_passed=curr.gates_passed + 1,
                       next_gate=(curr.next_gate + 1) % N_GATES, last_pass_time=curr.time)
    return curr


def fly(track: Track, controller: Callable, dt=DT, timeout_per_gate=TIMEOUT_PER_GATE,
        state: Optional[UavState] = None, log_fn: Optional[Callable] = None) -> EpisodeResult:
    """Closed loop: ``controller(state) -> (ControlCommand, info dict)``."""
    state = start_state(track) if state is None else state
    termination = MISSION_COMPLETE
    log = []
    while state.gates_passed < MAX_GATES:
        cmd, info = controller(state)
        new = advance(state, step(state, cmd, dt), track)
        if log_fn is not None:
            log.append(log_fn(state, cmd, info))
        state = new
        if np.linalg.norm(state.position) > BOUNDS_RADIUS:
            termination = OUT_OF_BOUNDS
            break
        if state.time - state.last_pass_time > timeout_per_gate:
            termination = TIMEOUT
            break
    return EpisodeResult(state.gates_passed, termination, state.time, log)


def log_record(state, cmd, info):
    rec = {"time": round(state.time, 10), "position": state.position.tolist(), "yaw": state.yaw,
           "command": cmd.as_array().tolist(), "gates_passed": state.gates_passed}
    if "selected" in info:
        rec["selected_member"] = info["selected"]
    if "mi_scores" in info:
        rec["mi_scores"] = np.asarray(info["mi_scores"]).tolist()
    return rec


def write_episode_log(result: EpisodeResult, path):
    with open(path, "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec) + "\n")


def expert_controller(track: Track) -> Callable:
    return lambda state: (expert_command(state, track), {})
