import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesnav import sim
from bayesnav.config import NOISE_HIGH, NOISE_LOW
from bayesnav.decision import ControlCommand
from bayesnav.errors import NumericDomainError


def state_at(pos, yaw=0.0, **kw):
    return sim.UavState(np.asarray(pos, dtype=float), yaw, **kw)


# tracks ---------------------------------------------------------------------

def test_noiseless_track_on_circle():
    t = sim.generate_track(0.0, 0.0, seed=1)
    assert len(t.gates) == 8
    for i, g in enumerate(t.gates):
        assert math.hypot(*g.center[:2]) == pytest.approx(8.0, abs=1e-12)
        assert g.center[2] == 2.0
        assert math.atan2(g.center[1], g.center[0]) % (2 * math.pi) == pytest.approx(i * math.pi / 4, abs=1e-12)
        # travel is counter-clockwise: normal is the tangent
        np.testing.assert_allclose(g.normal[:2], [-math.sin(i * math.pi / 4), math.cos(i * math.pi / 4)], atol=1e-12)


@pytest.mark.parametrize("grn,ghn", [NOISE_LOW, NOISE_HIGH])
def test_track_noise_bounds(grn, ghn):
    for seed in range(10_000):
        t = sim.generate_track(grn, ghn, seed)
        c = np.array([g.center for g in t.gates])
        r = np.hypot(c[:, 0], c[:, 1])
        assert np.all(np.abs(r - 8.0) <= grn + 1e-12)
        assert np.all(np.abs(c[:, 2] - 2.0) <= ghn + 1e-12)


def test_track_seeded():
    a, b = sim.generate_track(1.0, 2.0, 7), sim.generate_track(1.0, 2.0, 7)
    assert all(np.array_equal(g.center, h.center) for g, h in zip(a.gates, b.gates))
    c = sim.generate_track(1.0, 2.0, 8)
    assert not all(np.array_equal(g.center, h.center) for g, h in zip(a.gates, c.gates))


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        sim.generate_track(-0.1, 0.0)


# step -----------------------------------------------------------------------

def test_zero_command_only_advances_time():
    s = state_at([1.0, 2.0, 3.0], 0.4)
    n = sim.step(s, ControlCommand(0, 0, 0, 0), 0.05)
    np.testing.assert_array_equal(n.position, s.position)
    assert n.yaw == s.yaw and n.time == pytest.approx(0.05)


def test_forward_step():
    n = sim.step(state_at([0, 0, 0]), ControlCommand(1, 0, 0, 0), 0.05)
    np.testing.assert_allclose(n.position, [0.05, 0, 0], atol=1e-15)


def test_body_frame_rotation():
    n = sim.step(state_at([0, 0, 0], math.pi / 2), ControlCommand(1, 1, 0.5, 0), 1.0)
    np.testing.assert_allclose(n.position, [-1.0, 1.0, 0.5], atol=1e-12)


def test_yaw_integration():
    s = state_at([0, 0, 0])
    for _ in range(20):
        s = sim.step(s, ControlCommand(0, 0, 0, math.pi / 2), 0.05)
    assert s.yaw == pytest.approx(math.pi / 2, abs=1e-9)


def test_yaw_wraps():
    s = sim.step(state_at([0, 0, 0], 3.1), ControlCommand(0, 0, 0, 1.0), 0.1)
    assert -math.pi < s.yaw <= math.pi
    assert s.yaw == pytest.approx(3.2 - 2 * math.pi)


def test_step_rejects_non_finite():
    with pytest.raises(NumericDomainError):
        sim.step(state_at([0, 0, 0]), np.array([np.nan, 0, 0, 0]))


@settings(max_examples=100, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi),
       st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_step_yaw_equivariant(theta, yaw, cmd, pos):
    def rot(p):
        c, s = math.cos(theta), math.sin(theta)
        return np.array([c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])

    a = sim.step(state_at(pos, yaw), cmd)
    b = sim.step(state_at(rot(pos), sim.wrap_angle(yaw + theta)), cmd)
    np.testing.assert_allclose(b.position, rot(a.position), atol=1e-9)
    assert abs(sim.wrap_angle(b.yaw - a.yaw - theta)) < 1e-9


# observe --------------------------------------------------------------------

def one_gate_track(center, yaw=0.0):
    t = sim.generate_track()
    t.gates = [sim.Gate(np.asarray(center, dtype=float), yaw)] + [sim.Gate(np.array([0.0, 0.0, -100.0]), 0.0)] * 7
    return t


def test_gate_dead_ahead():
    obs = sim.observe(state_at([0, 0, 2]), one_gate_track([5, 0, 2]), noise_on=False)
    np.testing.assert_allclose(obs[:8], [5, 0, 0, 0, 0, 0, 5, 1], atol=1e-12)
    assert not np.any(obs[8:])


def test_gate_dead_ahead_with_noise_is_close():
    obs = sim.observe(state_at([0, 0, 2]), one_gate_track([5, 0, 2]), np.random.default_rng(0))
    assert obs[7] == 1 and obs[0] == pytest.approx(5, abs=1.5) and abs(obs[1]) < 1.5


def test_facing_away_sees_nothing():
    obs = sim.observe(state_at([0, 0, 2], math.pi), one_gate_track([5, 0, 2]), np.random.default_rng(0))
    assert not np.any(obs)


def test_fov_edges():
    assert sim.in_fov([1.0, math.tan(math.radians(44)), 0.0])
    assert not sim.in_fov([1.0, math.tan(math.radians(46)), 0.0])
    assert not sim.in_fov([1.0, 0.0, math.tan(math.radians(31))])


def test_double_gate_fills_both_slots_nearest_first():
    t = sim.generate_track()
    # two gates ahead, the nearer one slightly right
    t.gates = [sim.Gate(np.array([6.0, 1.0, 2.0]), 0.0), sim.Gate(np.array([4.0, -1.0, 2.0]), 0.0)] + \
              [sim.Gate(np.array([0.0, 0.0, -100.0]), 0.0)] * 6
    obs = sim.observe(state_at([0, 0, 2]), t, noise_on=False)
    assert obs[7] == 1 and obs[15] == 1
    assert obs[6] < obs[14]
    np.testing.assert_allclose(obs[:3], [4, -1, 0])


def test_observation_invariants_along_expert_flight():
    track = sim.generate_track(1.0, 2.0, 3)
    rng = np.random.default_rng(0)

    def ctl(state):
        obs = sim.observe(state, track, rng)
        for k in range(2):
            slot = obs[8 * k:8 * k + 8]
            assert slot[7] in (0.0, 1.0)
            if slot[7] == 0:
                assert not np.any(slot)
            assert slot[6] >= 0
        return sim.expert_command(state, track), {}

    sim.fly(track, ctl, timeout_per_gate=5.0, state=None)


# expert ---------------------------------------------------------------------

def test_expert_signs_gate_left():
    t = one_gate_track([0, 5, 2], yaw=math.pi / 2)
    c = sim.expert_command(state_at([0, 0, 2]), t)
    assert c.vy > 0 and c.yaw_rate > 0


def test_expert_at_gate_centre_is_calm():
    t = one_gate_track([5, 0, 2])
    c = sim.expert_command(state_at([5, 0, 2]), t)
    assert abs(c.vy) < 1e-12 and abs(c.vz) < 1e-12 and abs(c.yaw_rate) < 1e-12
    assert c.vx > 0


def test_expert_climbs_to_gate():
    c = sim.expert_command(state_at([0, 0, 0]), one_gate_track([5, 0, 2]))
    assert c.vz == pytest.approx(0.8 * 2.0)


@pytest.mark.parametrize("seed", range(3))
def test_expert_flies_noiseless_mission(seed):
    track = sim.generate_track(0, 0, seed)
    res = sim.fly(track, sim.expert_controller(track))
    assert res.gates_passed == 32 and res.termination == sim.MISSION_COMPLETE


# gate passing ---------------------------------------------------------------

GATE = sim.Gate(np.array([0.0, 0.0, 2.0]), 0.0)


@pytest.mark.parametrize("a,b,expected", [
    ([-0.1, 0, 2], [0.1, 0, 2], True),
    ([-0.1, 1.5, 2], [0.1, 1.5, 2], False),
    ([0.1, 0, 2], [-0.1, 0, 2], False),
    ([-0.2, -0.7, 2], [0.0, -0.7, 2], True),
    ([-0.3, 0, 2], [-0.1, 0, 2], False),
])
def test_gate_passed(a, b, expected):
    assert sim.gate_passed(state_at(a), state_at(b), GATE) is expected


def test_gates_must_be_taken_in_order():
    track = sim.generate_track()
    g1 = track.gates[1]
    s0 = state_at(g1.center - 0.1 * g1.normal)
    s1 = state_at(g1.center + 0.1 * g1.normal)
    assert sim.advance(s0, s1, track).gates_passed == 0


# episodes -------------------------------------------------------------------

def test_zero_velocity_times_out():
    track = sim.generate_track(0, 0, 0)
    res = sim.fly(track, lambda s: (ControlCommand(0, 0, 0, 0), {}))
    assert res.gates_passed == 0 and res.termination == sim.TIMEOUT
    assert res.time == pytest.approx(30.0, abs=0.06)


def test_out_of_bounds():
    track = sim.generate_track(0, 0, 0)
    res = sim.fly(track, lambda s: (ControlCommand(0, 0, 3, 0), {}))
    assert res.termination == sim.OUT_OF_BOUNDS


def test_gates_non_decreasing_and_logged():
    track = sim.generate_track(1.0, 2.0, 2)
    res = sim.fly(track, sim.expert_controller(track), timeout_per_gate=5.0, log_fn=sim.log_record)
    counts = [r["gates_passed"] for r in res.log]
    assert counts == sorted(counts)
    assert set(res.log[0]) >= {"time", "position", "yaw", "command"}


def test_episode_deterministic():
    track = sim.generate_track(1.0, 2.0, 4)

    def run():
        rng = np.random.default_rng(5)

        def ctl(state):
            obs = sim.observe(state, track, rng)
            c = sim.expert_command(state, track).as_array() + 0.1 * obs[:4]
            return ControlCommand.from_array(c), {}

        return sim.fly(track, ctl, log_fn=sim.log_record)

    a, b = run(), run()
    assert (a.gates_passed, a.termination, a.time) == (b.gates_passed, b.termination, b.time)
    assert a.log == b.log


def test_episode_log_file(tmp_path):
    track = sim.generate_track(0, 0, 1)
    res = sim.fly(track, sim.expert_controller(track), timeout_per_gate=2.0, log_fn=sim.log_record)
    sim.write_episode_log(res, tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == len(res.log)
