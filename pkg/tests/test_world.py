import numpy as np
import pytest

from cavmarl.world import (
    Action,
    ConfigurationError,
    RoadConfig,
    RosterEntry,
    ScenarioSpec,
    Topology,
    VehicleKind,
    VehicleState,
    WorldState,
    forward_gap,
    immediate_follower,
    immediate_leader,
    init_world,
    wrap_pos,
)

RING_1KM = RoadConfig(num_lanes=3, length=1000.0, topology=Topology.RING)
OPEN_1KM = RoadConfig(num_lanes=3, length=1000.0, topology=Topology.OPEN)


def make_world(entries, road=OPEN_1KM):
    vehicles = {
        i: VehicleState(id=i, kind=kind, lane=lane, pos=pos, velocity=v)
        for i, (kind, lane, pos, v) in enumerate(entries)
    }
    return WorldState(road=road, vehicles=vehicles)


class TestInitWorld:
    def test_zero_vehicles_is_valid(self):
        spec = ScenarioSpec(road=RING_1KM, density=0.0)
        world = init_world(spec)
        assert world.vehicles == {}

    def test_capacity_feasible_and_infeasible(self):
        # Per-lane capacity at 18.5 m gaps and 4.5 m bodies: 1000 // 23 = 43 slots.
        ok = ScenarioSpec(road=RING_1KM, density=0.06, spawn_gap=18.5)  # 60 -> 20 per lane
        world = init_world(ok)
        assert len(world.vehicles) == 60
        bad = ScenarioSpec(road=RING_1KM, density=0.15, spawn_gap=18.5)  # 50 per lane
        with pytest.raises(ConfigurationError):
            init_world(bad)

    def test_determinism(self):
        spec = ScenarioSpec(road=RING_1KM, density=0.03, rng_seed=7)
        w1 = init_world(spec)
        w2 = init_world(spec)
        assert w1.vehicles == w2.vehicles
        assert w1.time == w2.time

    def test_spawn_gaps_respect_floor(self):
        spec = ScenarioSpec(road=RING_1KM, density=0.06, rng_seed=3, spawn_gap=18.5)
        world = init_world(spec, d_s=18.5)
        for i in world.ids():
            j = immediate_leader(world, i, world.vehicles[i].lane)
            if j is not None:
                assert forward_gap(world, i, j) >= 18.5

    def test_cav_ratio_counts(self):
        spec = ScenarioSpec(road=RING_1KM, density=0.03, cav_ratio=0.5, rng_seed=5)
        world = init_world(spec)
        assert len(world.cav_ids()) == round(0.5 * 30)


class TestWrapPos:
    def test_modular(self):
        assert wrap_pos(1050.0, RING_1KM) == 50.0

    def test_negative(self):
        assert wrap_pos(-10.0, RING_1KM) == 990.0

    def test_identity(self):
        assert wrap_pos(0.0, RING_1KM) == 0.0

    def test_open_road_passthrough(self):
        assert wrap_pos(1050.0, OPEN_1KM) == 1050.0


class TestForwardGap:
    def test_open_road(self):
        world = make_world(
            [(VehicleKind.HDV, 0, 100.0, 0.0), (VehicleKind.HDV, 0, 150.0, 0.0)]
        )
        assert forward_gap(world, 0, 1) == pytest.approx(45.5)

    def test_ring_wrap(self):
        world = make_world(
            [(VehicleKind.HDV, 0, 990.0, 0.0), (VehicleKind.HDV, 0, 10.0, 0.0)],
            road=RING_1KM,
        )
        assert forward_gap(world, 0, 1) == pytest.approx(15.5)

    def test_self_gap_rejected(self):
        world = make_world([(VehicleKind.HDV, 0, 100.0, 0.0)])
        with pytest.raises(ValueError):
            forward_gap(world, 0, 0)


class TestNeighborQueries:
    def test_single_vehicle_has_no_leader(self):
        world = make_world([(VehicleKind.HDV, 0, 100.0, 0.0)])
        assert immediate_leader(world, 0, 0) is None
        assert immediate_follower(world, 0, 0) is None

    def test_nearest_ahead_wins(self):
        world = make_world(
            [
                (VehicleKind.HDV, 0, 0.0, 0.0),
                (VehicleKind.HDV, 0, 30.0, 0.0),
                (VehicleKind.HDV, 0, 60.0, 0.0),
            ]
        )
        assert immediate_leader(world, 0, 0) == 1

    def _brute_force(self, world, i, k, ahead):
        from cavmarl.world import forward_delta

        vi = world.vehicles[i]
        best = None
        for j, vj in world.vehicles.items():
            if j == i or vj.lane != k:
                continue
            d = (
                forward_delta(world.road, vi.pos, vj.pos)
                if ahead
                else forward_delta(world.road, vj.pos, vi.pos)
            )
            if d <= 0:
                continue
            if best is None or (d, j) < best:
                best = (d, j)
        return None if best is None else best[1]

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(42)
        for trial in range(50):
            n = int(rng.integers(2, 21))
            road = RING_1KM if trial % 2 == 0 else OPEN_1KM
            entries = [
                (VehicleKind.HDV, int(rng.integers(0, 3)), float(rng.uniform(0, 1000)), 0.0)
                for _ in range(n)
            ]
            world = make_world(entries, road=road)
            for i in world.ids():
                for k in range(3):
                    assert immediate_leader(world, i, k) == self._brute_force(
                        world, i, k, True
                    )
                    assert immediate_follower(world, i, k) == self._brute_force(
                        world, i, k, False
                    )

    def test_leader_follower_inverse_open_road(self):
        rng = np.random.default_rng(11)
        entries = [
            (VehicleKind.HDV, int(rng.integers(0, 3)), float(rng.uniform(0, 1000)), 0.0)
            for _ in range(15)
        ]
        world = make_world(entries, road=OPEN_1KM)
        for j in world.ids():
            lane = world.vehicles[j].lane
            f = immediate_follower(world, j, lane)
            if f is not None:
                assert immediate_leader(world, f, lane) == j
