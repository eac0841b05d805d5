"""Ground-truth perception oracle: visibility with occlusion, per-vehicle
neighbor features, the V2V share graph, observation assembly, and the
action-observation history buffer."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .world import (
    Action,
    NUM_ACTIONS,
    Topology,
    VehicleKind,
    WorldState,
    immediate_leader,
    signed_delta,
)

EGO_FIELDS = 4  # lane index, velocity, acceleration, lateral offset
SLOT_FIELDS = 5  # presence mask, relative lane, distance, observation angle, rotation


class FeatureSource(Enum):
    OWN_SENSOR = "own"
    SHARED_V2V = "shared"


@dataclass(frozen=True)
class PerceptionConfig:
    sensing_range: float = 100.0
    own_slots: int = 6  # nearest two per lane in {-1, 0, +1}
    shared_slots: int = 6
    history_len: int = 8
    noise_distance_std: float = 0.0  # optional zero-mean Gaussian sensor noise
    noise_angle_std: float = 0.0


def obs_width(cfg: PerceptionConfig) -> int:
    return (
        EGO_FIELDS
        + cfg.own_slots * SLOT_FIELDS
        + cfg.shared_slots * SLOT_FIELDS
        + cfg.shared_slots * NUM_ACTIONS
    )


@dataclass(frozen=True)
class NeighborFeature:
    lane_index: int  # relative lane w.r.t. the observer, in {-1, 0, +1}
    distance: float
    observation_angle: float  # bearing of the neighbor from the observer heading
    rotation: float  # neighbor heading minus observer heading
    source: FeatureSource
    neighbor_action: Optional[Action] = None  # known for CAV neighbors via V2V


@dataclass(frozen=True)
class SlotEntry:
    target_id: int
    feature: NeighborFeature


@dataclass(frozen=True)
class Observation:
    ego: tuple[float, float, float, float]  # lane, velocity, accel, lateral offset
    own: tuple[Optional[SlotEntry], ...]
    shared: tuple[Optional[SlotEntry], ...]
    shared_actions: tuple[Optional[Action], ...]

    def vector(self, cfg: PerceptionConfig) -> np.ndarray:
        out = np.zeros(obs_width(cfg))
        out[0:EGO_FIELDS] = self.ego
        k = EGO_FIELDS
        for slot in self.own:
            if slot is not None:
                f = slot.feature
                out[k : k + SLOT_FIELDS] = (
                    1.0,
                    f.lane_index,
                    f.distance,
                    f.observation_angle,
                    f.rotation,
                )
            k += SLOT_FIELDS
        for slot in self.shared:
            if slot is not None:
                f = slot.feature
                out[k : k + SLOT_FIELDS] = (
                    1.0,
                    f.lane_index,
                    f.distance,
                    f.observation_angle,
                    f.rotation,
                )
            k += SLOT_FIELDS
        for act in self.shared_actions:
            if act is not None:
                out[k + int(act)] = 1.0
            k += NUM_ACTIONS
        return out


def _norm_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    a = (a + math.pi) % (2.0 * math.pi) - math.pi
    return math.pi if a == -math.pi else a


def _geometry(world: WorldState, observer_id: int, target_id: int) -> tuple[float, float, float]:
    vo = world.vehicles[observer_id]
    vt = world.vehicles[target_id]
    ds = signed_delta(world.road, vo.pos, vt.pos)
    dy = vt.lateral_center(world.road.lane_width) - vo.lateral_center(world.road.lane_width)
    distance = math.hypot(ds, dy)
    angle = _norm_angle(math.atan2(dy, ds) - vo.heading)
    return distance, angle, ds


def visible(world: WorldState, observer: int, target: int, cfg: PerceptionConfig) -> bool:
    """True iff the target is in sensor range and no occlusion boundary cuts
    the sight line between the two vehicles."""
    if observer == target:
        return False
    distance, _, _ = _geometry(world, observer, target)
    if distance > cfg.sensing_range:
        return False
    po = world.vehicles[observer].pos
    pt = world.vehicles[target].pos
    if world.road.topology is Topology.RING:
        # Sight line along the shorter arc.
        ds = signed_delta(world.road, po, pt)
        lo, hi = (po, po + ds) if ds >= 0 else (po + ds, po)
        for z in world.road.occlusion_zones:
            b = z.blocking_boundary
            for shift in (0.0, world.road.length, -world.road.length):
                if lo < b + shift < hi:
                    return False
    else:
        lo, hi = min(po, pt), max(po, pt)
        for z in world.road.occlusion_zones:
            if lo < z.blocking_boundary < hi:
                return False
    return True


def _feature_for(
    world: WorldState,
    observer: int,
    target: int,
    source: FeatureSource,
    cfg: PerceptionConfig,
) -> NeighborFeature:
    vo = world.vehicles[observer]
    vt = world.vehicles[target]
    distance, angle, _ = _geometry(world, observer, target)
    if source is FeatureSource.OWN_SENSOR and cfg.noise_distance_std > 0.0:
        distance = max(0.0, distance + cfg.noise_distance_std * world.rng.standard_normal())
    if source is FeatureSource.OWN_SENSOR and cfg.noise_angle_std > 0.0:
        angle = _norm_angle(angle + cfg.noise_angle_std * world.rng.standard_normal())
    return NeighborFeature(
        lane_index=vt.lane - vo.lane,
        distance=distance,
        observation_angle=angle,
        rotation=_norm_angle(vt.heading - vo.heading),
        source=source,
        neighbor_action=vt.current_action if vt.kind is VehicleKind.CAV else None,
    )


def visible_ids(world: WorldState, i: int, cfg: PerceptionConfig) -> list[int]:
    """Every vehicle the onboard sensors can detect: lanes {-1, 0, +1} within range."""
    lane = world.vehicles[i].lane
    out = []
    for j in sorted(world.vehicles):
        if j == i or abs(world.vehicles[j].lane - lane) > 1:
            continue
        if visible(world, i, j, cfg):
            out.append(j)
    return out


def sense(world: WorldState, i: int, cfg: PerceptionConfig) -> list[SlotEntry]:
    """Own-sensor neighbor features: per lane offset in (-1, 0, +1), the nearest
    ``own_slots // 3`` visible vehicles, nearest first."""
    per_lane = max(1, cfg.own_slots // 3)
    lane = world.vehicles[i].lane
    groups: dict[int, list[tuple[float, int]]] = {-1: [], 0: [], 1: []}
    for j in visible_ids(world, i, cfg):
        rel = world.vehicles[j].lane - lane
        d, _, _ = _geometry(world, i, j)
        groups[rel].append((d, j))
    out: list[SlotEntry] = []
    for rel in (-1, 0, 1):
        for d, j in sorted(groups[rel])[:per_lane]:
            out.append(SlotEntry(j, _feature_for(world, i, j, FeatureSource.OWN_SENSOR, cfg)))
    return out[: cfg.own_slots]


def share_graph(world: WorldState) -> dict[int, list[int]]:
    """Receiver -> ordered senders. A CAV immediate leader on the receiver's
    current or adjacent lanes shares its processed vision; HDVs neither send
    nor receive."""
    graph: dict[int, list[int]] = {}
    for i in world.cav_ids():
        lane = world.vehicles[i].lane
        senders: list[int] = []
        for k in (lane - 1, lane, lane + 1):
            if not (0 <= k < world.road.num_lanes):
                continue
            j = immediate_leader(world, i, k)
            if j is None:
                continue
            if world.vehicles[j].kind is VehicleKind.CAV and j not in senders:
                senders.append(j)
        graph[i] = senders
    return graph


def assemble(
    world: WorldState,
    i: int,
    history: "HistoryBuffer",
    cfg: PerceptionConfig,
    sharing: bool = True,
) -> Observation:
    """Fixed-width observation: ego block, own-sensor slots, V2V-shared slots
    re-expressed in the receiver frame, and the sharing leaders' actions."""
    del history  # the observation itself is memoryless; histories wrap it
    veh = world.vehicles[i]
    ego = (float(veh.lane), veh.velocity, veh.accel, veh.lateral_offset)

    own = sense(world, i, cfg)
    own_ids = {s.target_id for s in own}

    candidates: list[tuple[float, int, int]] = []  # (distance to i, target, sender)
    if sharing:
        lane = veh.lane
        senders: list[int] = []
        for k in (lane - 1, lane, lane + 1):
            if not (0 <= k < world.road.num_lanes):
                continue
            j = immediate_leader(world, i, k)
            if j is not None and world.vehicles[j].kind is VehicleKind.CAV and j not in senders:
                senders.append(j)
        for j in senders:
            for entry in sense(world, j, cfg):
                t = entry.target_id
                if t == i or t in own_ids:
                    continue
                if abs(world.vehicles[t].lane - veh.lane) > 1:
                    continue
                d, _, _ = _geometry(world, i, t)
                candidates.append((d, t, j))

    candidates.sort()
    shared: list[SlotEntry] = []
    shared_actions: list[Action] = []
    kept: set[int] = set()
    for d, t, j in candidates:
        if t in kept:
            continue
        kept.add(t)
        shared.append(SlotEntry(t, _feature_for(world, i, t, FeatureSource.SHARED_V2V, cfg)))
        shared_actions.append(world.vehicles[j].current_action)
        if len(shared) == cfg.shared_slots:
            break

    pad_own = own + [None] * (cfg.own_slots - len(own))
    pad_shared = shared + [None] * (cfg.shared_slots - len(shared))
    pad_actions = shared_actions + [None] * (cfg.shared_slots - len(shared_actions))
    return Observation(
        ego=ego,
        own=tuple(pad_own),
        shared=tuple(pad_shared),
        shared_actions=tuple(pad_actions),
    )


def knowledge_map(
    world: WorldState, cfg: PerceptionConfig, sharing: bool = True
) -> dict[int, frozenset]:
    """Per CAV: every vehicle id it can act on (own sensing plus V2V shares).

    Untruncated, unlike the fixed observation slots: the detector sees all
    visible vehicles even when the learning interface keeps only the nearest.
    """
    shares = share_graph(world) if sharing else {}
    out: dict[int, frozenset] = {}
    for i in world.cav_ids():
        known = set(visible_ids(world, i, cfg))
        for j in shares.get(i, ()):
            known.add(j)
            for entry in sense(world, j, cfg):
                if entry.target_id != i:
                    known.add(entry.target_id)
        out[i] = frozenset(known)
    return out


@dataclass(frozen=True)
class HistoryBuffer:
    """FIFO of the last ``maxlen`` (observation vector, one-hot action) pairs."""

    maxlen: int
    items: tuple[tuple[np.ndarray, np.ndarray], ...] = ()

    def __len__(self) -> int:
        return len(self.items)


def action_onehot(a: Optional[Action]) -> np.ndarray:
    v = np.zeros(NUM_ACTIONS)
    if a is not None:
        v[int(a)] = 1.0
    return v


def push_history(buffer: HistoryBuffer, o, a: Optional[Action], cfg: PerceptionConfig) -> HistoryBuffer:
    """Append one (observation, action) pair, evicting the oldest at capacity."""
    vec = o.vector(cfg) if isinstance(o, Observation) else np.asarray(o, dtype=float)
    items = buffer.items + ((vec, action_onehot(a)),)
    if len(items) > buffer.maxlen:
        items = items[len(items) - buffer.maxlen :]
    return HistoryBuffer(maxlen=buffer.maxlen, items=items)


def history_arrays(
    buffer: HistoryBuffer, cfg: PerceptionConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Zero-padded [H, W] observations and [H, A] actions, oldest first."""
    h = buffer.maxlen
    obs = np.zeros((h, obs_width(cfg)))
    act = np.zeros((h, NUM_ACTIONS))
    for idx, (o, a) in enumerate(buffer.items[-h:]):
        row = h - len(buffer.items) + idx
        obs[row] = o
        act[row] = a
    return obs, act
