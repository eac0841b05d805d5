"""Road geometry, vehicle state, spawning, and neighbor queries."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Optional

import numpy as np

DEFAULT_VEHICLE_LENGTH = 4.5  # meters, typical sedan
MPH_PER_MPS = 2.23694

SPAWN_ATTEMPTS = 10_000


class Topology(Enum):
    RING = "ring"
    OPEN = "open"


class VehicleKind(Enum):
    CAV = "cav"
    HDV = "hdv"
    OBSTACLE = "obstacle"


class Action(IntEnum):
    """Lane-level behavior. ES is the emergency fallback, never proposed by a policy."""

    KL = 0
    CL = 1  # toward lane - 1 (left)
    CR = 2  # toward lane + 1 (right)
    ES = 3


POLICY_ACTIONS = (Action.KL, Action.CL, Action.CR)
NUM_ACTIONS = 4


class ConfigurationError(ValueError):
    """A scenario or config cannot be realized as stated."""


@dataclass(frozen=True)
class OcclusionZone:
    """Longitudinal interval hidden from vehicles on the far side of a blocking boundary.

    Sight lines crossing ``blocking_boundary`` are cut (a corner, wall, ...).
    """

    start: float
    end: float
    boundary: Optional[float] = None

    @property
    def blocking_boundary(self) -> float:
        return self.start if self.boundary is None else self.boundary


@dataclass(frozen=True)
class RoadConfig:
    num_lanes: int = 3
    lane_width: float = 3.5
    length: float = 400.0
    topology: Topology = Topology.RING
    occlusion_zones: tuple[OcclusionZone, ...] = ()

    def validate(self) -> None:
        if self.num_lanes < 1:
            raise ConfigurationError(f"num_lanes must be >= 1, got {self.num_lanes}")
        if self.length <= 0:
            raise ConfigurationError(f"road length must be > 0, got {self.length}")
        if self.lane_width <= 0:
            raise ConfigurationError(f"lane_width must be > 0, got {self.lane_width}")
        for z in self.occlusion_zones:
            if not (0.0 <= z.start < self.length and z.start < z.end <= self.length):
                raise ConfigurationError(
                    f"occlusion zone ({z.start}, {z.end}) outside road [0, {self.length})"
                )


@dataclass
class VehicleState:
    """Kinematic and behavioral state of one vehicle."""

    id: int
    kind: VehicleKind
    lane: int
    pos: float  # longitudinal coordinate of the front bumper, meters
    velocity: float
    accel: float = 0.0
    lateral_offset: float = 0.0  # nonzero only mid lane change
    heading: float = 0.0  # radians relative to the road tangent
    current_action: Action = Action.KL
    lane_change_progress: float = 0.0
    lane_change_target: Optional[int] = None
    lane_change_dir: int = 0  # -1 leftward, +1 rightward, 0 when not maneuvering
    vehicle_length: float = DEFAULT_VEHICLE_LENGTH

    @property
    def mid_lane_change(self) -> bool:
        return self.lane_change_target is not None

    def lateral_center(self, lane_width: float) -> float:
        return self.lane * lane_width + self.lateral_offset

    def occupied_lanes(self) -> tuple[int, ...]:
        """Lanes this vehicle can currently block: its own plus a pending target."""
        if self.lane_change_target is not None and self.lane_change_target != self.lane:
            return (self.lane, self.lane_change_target)
        return (self.lane,)


@dataclass(frozen=True)
class RosterEntry:
    kind: VehicleKind
    lane: int
    pos: float
    velocity: float


@dataclass
class ScenarioSpec:
    road: RoadConfig = RoadConfig()
    roster: tuple[RosterEntry, ...] = ()
    cav_ratio: float = 1.0
    density: float = 0.02  # vehicles per meter of road
    rng_seed: int = 0
    max_timesteps: int = 500
    dt: float = 0.1
    spawn_gap: float = 20.0  # minimum bumper-to-bumper gap at spawn
    spawn_speed: float = 15.0

    def vehicle_count(self) -> int:
        if self.roster:
            return len(self.roster)
        return int(round(self.density * self.road.length))

    def validate(self) -> None:
        self.road.validate()
        if not (0.0 <= self.cav_ratio <= 1.0):
            raise ConfigurationError(f"cav_ratio must lie in [0, 1], got {self.cav_ratio}")
        if self.density < 0:
            raise ConfigurationError(f"density must be >= 0, got {self.density}")
        if self.dt <= 0:
            raise ConfigurationError(f"dt must be > 0, got {self.dt}")
        if self.max_timesteps < 0:
            raise ConfigurationError("max_timesteps must be >= 0")
        for e in self.roster:
            if not (0 <= e.lane < self.road.num_lanes):
                raise ConfigurationError(f"roster lane {e.lane} outside road lanes")
            if self.road.topology is Topology.RING and not (0 <= e.pos < self.road.length):
                raise ConfigurationError(f"roster position {e.pos} outside ring [0, L)")


@dataclass
class WorldState:
    """Value-type snapshot of the whole simulation state."""

    road: RoadConfig
    vehicles: dict[int, VehicleState]
    time: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def copy(self) -> "WorldState":
        return WorldState(
            road=self.road,
            vehicles={i: replace(v) for i, v in self.vehicles.items()},
            time=self.time,
            rng=self.rng,
        )

    def ids(self) -> list[int]:
        return sorted(self.vehicles)

    def cav_ids(self) -> list[int]:
        return sorted(i for i, v in self.vehicles.items() if v.kind is VehicleKind.CAV)


def wrap_pos(s: float, road: RoadConfig) -> float:
    """Map a longitudinal coordinate into [0, length) on a ring; identity on open roads."""
    if road.topology is Topology.RING:
        return s % road.length
    return s


def forward_delta(road: RoadConfig, from_pos: float, to_pos: float) -> float:
    """Distance traveled driving forward from ``from_pos`` to ``to_pos``."""
    d = to_pos - from_pos
    if road.topology is Topology.RING:
        d %= road.length
    return d


def signed_delta(road: RoadConfig, from_pos: float, to_pos: float) -> float:
    """Shortest signed longitudinal offset (positive = ahead)."""
    d = to_pos - from_pos
    if road.topology is Topology.RING:
        d %= road.length
        if d > road.length / 2:
            d -= road.length
    return d


def forward_gap(world: WorldState, i: int, j: int) -> float:
    """Bumper-to-bumper distance from vehicle i to vehicle j ahead of it."""
    if i == j:
        raise ValueError("forward_gap of a vehicle with itself is undefined")
    vi = world.vehicles[i]
    vj = world.vehicles[j]
    return forward_delta(world.road, vi.pos, vj.pos) - vj.vehicle_length


def immediate_leader(world: WorldState, i: int, k: int) -> Optional[int]:
    """Nearest vehicle ahead of i on lane k, by lane attribute; None if lane k has none."""
    return _nearest_on_lane(world, i, k, ahead=True)


def immediate_follower(world: WorldState, i: int, k: int) -> Optional[int]:
    """Nearest vehicle behind i on lane k; mirror of immediate_leader."""
    return _nearest_on_lane(world, i, k, ahead=False)


def _nearest_on_lane(
    world: WorldState,
    i: int,
    k: int,
    ahead: bool,
    allowed: Optional[frozenset] = None,
    use_occupied: bool = False,
) -> Optional[int]:
    vi = world.vehicles[i]
    best: Optional[tuple[float, int]] = None
    for j, vj in world.vehicles.items():
        if j == i:
            continue
        if allowed is not None and j not in allowed:
            continue
        lanes = vj.occupied_lanes() if use_occupied else (vj.lane,)
        if k not in lanes:
            continue
        if ahead:
            d = forward_delta(world.road, vi.pos, vj.pos)
        else:
            d = forward_delta(world.road, vj.pos, vi.pos)
        if d <= 0:
            continue
        if best is None or (d, j) < best:
            best = (d, j)
    return None if best is None else best[1]


def init_world(spec: ScenarioSpec, d_s: float | None = None) -> WorldState:
    """Build the initial world: roster placement, or uniform sampling with min spacing.

    ``d_s`` optionally overrides the spawn gap floor so spawn gaps exceed the
    configured safe distance.
    """
    spec.validate()
    road = spec.road
    min_gap = max(spec.spawn_gap, d_s if d_s is not None else 0.0)
    rng = np.random.default_rng(spec.rng_seed)

    if spec.roster:
        vehicles = {
            idx: VehicleState(
                id=idx,
                kind=e.kind,
                lane=e.lane,
                pos=wrap_pos(e.pos, road),
                velocity=0.0 if e.kind is VehicleKind.OBSTACLE else e.velocity,
            )
            for idx, e in enumerate(spec.roster)
        }
        world = WorldState(road=road, vehicles=vehicles, rng=rng)
        _check_spawn_gaps(world, min_gap)
        return world

    n = spec.vehicle_count()
    if n == 0:
        return WorldState(road=road, vehicles={}, rng=rng)
    if road.topology is not Topology.RING:
        raise ConfigurationError("sampled spawning requires a ring road; use a roster for open roads")

    lanes = road.num_lanes
    per_lane = [n // lanes + (1 if k < n % lanes else 0) for k in range(lanes)]
    spacing = min_gap + DEFAULT_VEHICLE_LENGTH
    capacity = int(road.length // spacing)
    for k, need in enumerate(per_lane):
        if need > capacity:
            raise ConfigurationError(
                f"lane {k} needs {need} vehicles but fits only {capacity} "
                f"at spacing {spacing:.1f} m on {road.length:.0f} m"
            )

    vehicles: dict[int, VehicleState] = {}
    idx = 0
    for k, count in enumerate(per_lane):
        if count == 0:
            continue
        positions = _sample_lane_positions(rng, road.length, count, spacing)
        for pos in positions:
            vehicles[idx] = VehicleState(
                id=idx, kind=VehicleKind.HDV, lane=k, pos=pos, velocity=spec.spawn_speed
            )
            idx += 1

    cav_count = int(round(spec.cav_ratio * n))
    if cav_count > 0:
        chosen = rng.choice(n, size=cav_count, replace=False)
        for cid in sorted(int(c) for c in chosen):
            vehicles[cid].kind = VehicleKind.CAV

    world = WorldState(road=road, vehicles=vehicles, rng=rng)
    _check_spawn_gaps(world, min_gap)
    return world


def _sample_lane_positions(
    rng: np.random.Generator, length: float, count: int, spacing: float
) -> list[float]:
    """Uniform ring placement conditioned on all gaps >= spacing.

    Sampled directly (sorted uniforms on the slack plus a random rotation),
    which draws from exactly the rejection-sampling target distribution but
    stays feasible at any density the capacity check admits.
    """
    if count == 1:
        return [float(rng.uniform(0.0, length))]
    free = length - count * spacing
    if free < 0:
        raise ConfigurationError(
            f"cannot place {count} vehicles with spacing {spacing:.1f} m on {length:.0f} m"
        )
    u = np.sort(rng.uniform(0.0, free, size=count))
    offset = rng.uniform(0.0, length)
    pts = (u + spacing * np.arange(count) + offset) % length
    return sorted(float(p) for p in pts)


def _check_spawn_gaps(world: WorldState, min_gap: float) -> None:
    for i in world.ids():
        leader = immediate_leader(world, i, world.vehicles[i].lane)
        if leader is None:
            continue
        gap = forward_gap(world, i, leader)
        if gap < min_gap:
            raise ConfigurationError(
                f"spawn gap {gap:.2f} m between vehicles {i} and {leader} "
                f"is below the {min_gap:.2f} m floor"
            )
