import math

import numpy as np
import pytest

from cavmarl.traffic import (
    CollisionStateError,
    EMERGENCY_DECEL,
    IdmParams,
    LaneChangeParams,
    TrafficParams,
    detect_collisions,
    hdv_decide,
    idm_accel,
    step,
)
from cavmarl.world import (
    Action,
    RoadConfig,
    ScenarioSpec,
    Topology,
    VehicleKind,
    VehicleState,
    WorldState,
    forward_gap,
    immediate_leader,
    init_world,
)

TEXTBOOK = IdmParams(v0=30.0, T=1.5, a_max=2.0, b_comf=2.0, s0=2.0, delta=4.0)


def make_world(entries, road=None):
    road = road or RoadConfig(num_lanes=3, length=1000.0, topology=Topology.OPEN)
    vehicles = {}
    for i, e in enumerate(entries):
        kind, lane, pos, v = e
        vehicles[i] = VehicleState(id=i, kind=kind, lane=lane, pos=pos, velocity=v)
    return WorldState(road=road, vehicles=vehicles)


def equilibrium_gap(v: float, p: IdmParams) -> float:
    """Root of idm_accel(v, gap, v, p) = 0 in gap, solved in closed form."""
    s_star = p.s0 + v * p.T
    return s_star / math.sqrt(1.0 - (v / p.v0) ** p.delta)


class TestIdmAccel:
    def test_free_road_at_desired_speed(self):
        assert idm_accel(30.0, None, 0.0, TEXTBOOK) == pytest.approx(0.0, abs=1e-12)
        assert idm_accel(30.0, math.inf, 0.0, TEXTBOOK) == pytest.approx(0.0, abs=1e-12)

    def test_jam_equilibrium(self):
        # v = 0 at gap s0 with a stopped leader: both deficit terms cancel.
        assert idm_accel(0.0, TEXTBOOK.s0, 0.0, TEXTBOOK) == pytest.approx(0.0, abs=1e-12)

    def test_equilibrium_gap_root(self):
        gap = equilibrium_gap(15.0, TEXTBOOK)
        assert idm_accel(15.0, gap, 15.0, TEXTBOOK) == pytest.approx(0.0, abs=1e-9)

    def test_collision_state_rejected(self):
        with pytest.raises(CollisionStateError):
            idm_accel(5.0, 0.0, 0.0, TEXTBOOK)

    def test_clamped_to_emergency_floor(self):
        a = idm_accel(30.0, 1.0, 0.0, TEXTBOOK)
        assert a == -EMERGENCY_DECEL


class TestHdvDecide:
    def test_single_lane_keeps(self):
        road = RoadConfig(num_lanes=1, length=1000.0, topology=Topology.OPEN)
        world = make_world([(VehicleKind.HDV, 0, 100.0, 20.0)], road=road)
        assert hdv_decide(world, 0, TrafficParams()) is Action.KL

    def test_blocked_lane_triggers_change(self):
        world = make_world(
            [
                (VehicleKind.HDV, 1, 100.0, 20.0),
                (VehicleKind.HDV, 1, 114.5, 5.0),  # slow leader 10 m ahead
            ]
        )
        assert hdv_decide(world, 0, TrafficParams()) in (Action.CL, Action.CR)

    def test_small_lag_gap_rejected(self):
        # Follower on the only target lane just 2 m behind.
        road = RoadConfig(num_lanes=2, length=1000.0, topology=Topology.OPEN)
        world = make_world(
            [
                (VehicleKind.HDV, 0, 100.0, 20.0),
                (VehicleKind.HDV, 0, 114.5, 5.0),
                (VehicleKind.HDV, 1, 93.5, 20.0),  # lag gap 2 m
            ],
            road=road,
        )
        assert hdv_decide(world, 0, TrafficParams()) is Action.KL


class TestStep:
    def test_stationary_jammed_world_only_advances_time(self):
        # Stopped car exactly at its jam distance behind a static obstacle:
        # zero acceleration, so nothing but the clock moves.
        params = TrafficParams()
        gap = params.cav_gap_floor + params.idm_cav.s0
        world = make_world(
            [
                (VehicleKind.OBSTACLE, 0, 100.0, 0.0),
                (VehicleKind.CAV, 0, 100.0 - 4.5 - gap, 0.0),
            ]
        )
        new, events = step(world, {1: Action.KL}, 0.1, params)
        assert new.time == world.time + 1
        for i in world.ids():
            assert new.vehicles[i].pos == world.vehicles[i].pos
            assert new.vehicles[i].velocity == 0.0
        assert events.collisions == []

    def test_constant_speed_kinematics(self):
        # At the desired speed the acceleration is zero: pure kinematics.
        params = TrafficParams(idm_cav=IdmParams(v0=10.0))
        world = make_world([(VehicleKind.CAV, 0, 100.0, 10.0)])
        new, _ = step(world, {0: Action.KL}, 0.1, params)
        assert new.vehicles[0].pos == pytest.approx(101.0, abs=1e-12)

    def test_obstacles_never_move(self):
        world = make_world([(VehicleKind.OBSTACLE, 0, 100.0, 0.0)])
        for _ in range(5):
            world, _ = step(world, {}, 0.1)
        assert world.vehicles[0].pos == 100.0
        assert world.vehicles[0].velocity == 0.0

    def test_velocity_never_negative(self):
        world = make_world([(VehicleKind.CAV, 0, 100.0, 0.5)])
        for _ in range(10):
            world, _ = step(world, {0: Action.ES}, 0.1)
        assert world.vehicles[0].velocity == 0.0

    def test_platoon_converges_to_equilibrium_gap(self):
        # Leader pinned at 15 m/s via a desired speed of 15; follower textbook
        # IDM on the raw gap (no floor) so the closed form applies directly.
        params = TrafficParams(
            idm_cav=TEXTBOOK,
            idm_hdv=IdmParams(v0=15.0, T=1.5, s0=2.0),
            cav_gap_floor=0.0,
        )
        world = make_world(
            [
                (VehicleKind.CAV, 0, 0.0, 15.0),
                (VehicleKind.HDV, 0, 60.0, 15.0),
            ],
            road=RoadConfig(num_lanes=1, length=10000.0, topology=Topology.OPEN),
        )
        for _ in range(3000):
            world, _ = step(world, {0: Action.KL}, 0.1, params)
        leader_v = world.vehicles[1].velocity
        expect = equilibrium_gap(leader_v, TEXTBOOK)
        assert forward_gap(world, 0, 1) == pytest.approx(expect, rel=0.01)

    def test_lane_change_completion(self):
        world = make_world([(VehicleKind.CAV, 1, 100.0, 20.0)])
        lc = TrafficParams().lane_change
        steps = math.ceil(lc.duration / 0.1)
        acts = {0: Action.CL}
        completed = []
        for _ in range(steps):
            world, events = step(world, acts, 0.1)
            completed += events.lane_changes_completed
        assert world.vehicles[0].lane == 0
        assert world.vehicles[0].lateral_offset == 0.0
        assert world.vehicles[0].lane_change_target is None
        assert completed == [(0, 0)]

    def test_mid_change_locks_action(self):
        world = make_world([(VehicleKind.CAV, 1, 100.0, 20.0)])
        world, _ = step(world, {0: Action.CR}, 0.1)
        assert world.vehicles[0].mid_lane_change
        # New lateral commands are ignored until the maneuver completes.
        world, _ = step(world, {0: Action.CL}, 0.1)
        assert world.vehicles[0].current_action is Action.CR

    def test_determinism(self):
        spec = ScenarioSpec(road=RoadConfig(length=500.0), density=0.02, rng_seed=9)
        w1 = init_world(spec)
        w2 = init_world(spec)
        acts1 = {i: Action.KL for i in w1.cav_ids()}
        for _ in range(50):
            w1, _ = step(w1, acts1, 0.1)
            w2, _ = step(w2, acts1, 0.1)
        assert w1.vehicles == w2.vehicles

    def test_missing_cav_action_rejected(self):
        world = make_world([(VehicleKind.CAV, 0, 100.0, 10.0)])
        with pytest.raises(ValueError):
            step(world, {}, 0.1)


class TestDetectCollisions:
    def test_clear_world(self):
        world = make_world(
            [(VehicleKind.HDV, 0, 100.0, 0.0), (VehicleKind.HDV, 0, 200.0, 0.0)]
        )
        assert detect_collisions(world) == []

    def test_overlapping_pair(self):
        world = make_world(
            [(VehicleKind.HDV, 0, 100.0, 0.0), (VehicleKind.HDV, 0, 103.0, 0.0)]
        )
        assert detect_collisions(world) == [(0, 1)]

    def _brute_force(self, world):
        out = []
        width = world.road.lane_width
        ids = world.ids()
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                i, j = ids[a], ids[b]
                vi, vj = world.vehicles[i], world.vehicles[j]
                yi = vi.lane * width + vi.lateral_offset
                yj = vj.lane * width + vj.lateral_offset
                if abs(yi - yj) >= 0.5 * width:
                    continue
                if world.road.topology is Topology.RING:
                    d = (vj.pos - vi.pos) % world.road.length
                    gap = d - vj.vehicle_length if d <= world.road.length - d else (
                        world.road.length - d
                    ) - vi.vehicle_length
                else:
                    gap = (
                        vj.pos - vi.pos - vj.vehicle_length
                        if vj.pos >= vi.pos
                        else vi.pos - vj.pos - vi.vehicle_length
                    )
                if gap <= 0:
                    out.append((i, j))
        return out

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(40):
            road = RoadConfig(
                num_lanes=2,
                length=200.0,
                topology=Topology.RING if trial % 2 else Topology.OPEN,
            )
            entries = [
                (
                    VehicleKind.HDV,
                    int(rng.integers(0, 2)),
                    float(rng.uniform(0, 200)),
                    0.0,
                )
                for _ in range(int(rng.integers(2, 12)))
            ]
            world = make_world(entries, road=road)
            assert detect_collisions(world) == self._brute_force(world)


class TestIdmRingStability:
    def test_pure_idm_ring_never_collides(self):
        # Car-following-only traffic on a ring stays gap-positive. A slice of
        # seeds runs here; the full 20-seed sweep runs in the acceptance suite.
        for seed in range(3):
            road = RoadConfig(num_lanes=1, length=500.0, topology=Topology.RING)
            spec = ScenarioSpec(road=road, density=0.02, cav_ratio=0.0, rng_seed=seed)
            world = init_world(spec)
            for _ in range(2000):
                world, events = step(world, {}, 0.1)
                assert events.collisions == []
