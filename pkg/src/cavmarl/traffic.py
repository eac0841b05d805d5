"""Time-stepped vehicle dynamics: IDM car following, lane-change kinematics,
HDV gap-acceptance decisions, collision detection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .world import (
    Action,
    Topology,
    VehicleKind,
    VehicleState,
    WorldState,
    forward_delta,
    wrap_pos,
    _nearest_on_lane,
)

EMERGENCY_DECEL = 8.0  # m/s^2; emergency-stop braking, also the assumed worst case of others


class CollisionStateError(ValueError):
    """IDM evaluated in an already-overlapping state."""


@dataclass(frozen=True)
class IdmParams:
    v0: float = 30.0  # desired speed
    T: float = 1.5  # time headway
    a_max: float = 2.0
    b_comf: float = 2.0
    s0: float = 2.0  # jam distance
    delta: float = 4.0

    def validate(self) -> None:
        for name in ("v0", "T", "a_max", "b_comf", "s0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IdmParams.{name} must be > 0")
        if self.delta < 1:
            raise ValueError("IdmParams.delta must be >= 1")


# CAV car following runs on the slack beyond a mandated 18.5 m gap floor (see
# TrafficParams.cav_gap_floor), so its jam distance is a small buffer past it;
# HDVs are ordinary drivers with a slightly lower free speed (~60 mph vs ~67 mph).
CAV_IDM = IdmParams(v0=30.0, s0=0.5)
HDV_IDM = IdmParams(v0=27.0, s0=2.0)


@dataclass(frozen=True)
class LaneChangeParams:
    duration: float = 3.0  # seconds for a full lateral transition
    accept_gap_lead: float = 15.0
    accept_gap_lag: float = 22.0

    def validate(self) -> None:
        if self.duration <= 0:
            raise ValueError("LaneChangeParams.duration must be > 0")
        if self.accept_gap_lead < 0 or self.accept_gap_lag < 0:
            raise ValueError("LaneChangeParams gaps must be >= 0")


@dataclass(frozen=True)
class TrafficParams:
    idm_cav: IdmParams = CAV_IDM
    idm_hdv: IdmParams = HDV_IDM
    lane_change: LaneChangeParams = LaneChangeParams()
    incentive_threshold: float = 0.2  # m/s^2 gain required before an HDV changes lane
    cav_gap_floor: float = 18.5  # CAVs follow the IDM on the slack beyond this gap

    def idm_for(self, kind: VehicleKind) -> IdmParams:
        return self.idm_cav if kind is VehicleKind.CAV else self.idm_hdv


def following_accel(
    v: float,
    gap: Optional[float],
    v_leader: float,
    kind: VehicleKind,
    params: "TrafficParams",
) -> float:
    """Car-following acceleration for one vehicle kind.

    CAVs treat the mandated minimum car-following distance as an impenetrable
    buffer: the IDM sees only the slack beyond it, so braking ramps up before
    the floor is reached instead of undershooting the jam distance.
    """
    p = params.idm_for(kind)
    if gap is not None and not math.isinf(gap) and kind is VehicleKind.CAV:
        gap = gap - params.cav_gap_floor
        if gap <= 0:
            return -EMERGENCY_DECEL
    return idm_accel(v, gap, v_leader, p)


@dataclass
class StepEvents:
    collisions: list[tuple[int, int]] = field(default_factory=list)
    lane_changes_completed: list[tuple[int, int]] = field(default_factory=list)
    es_executed: list[int] = field(default_factory=list)


def idm_accel(
    v: float,
    gap: Optional[float],
    v_leader: float,
    p: IdmParams,
    floor: float = -EMERGENCY_DECEL,
) -> float:
    """IDM acceleration; ``gap`` of None or +inf encodes a free road.

    Result is clamped to [floor, a_max]. The dynamic part of the desired gap is
    clamped at zero (standard form) so a fast receding leader cannot trigger
    spurious braking.
    """
    free = 1.0 - (v / p.v0) ** p.delta
    if gap is None or math.isinf(gap):
        a = p.a_max * free
    else:
        if gap <= 0:
            raise CollisionStateError(f"IDM called with non-positive gap {gap}")
        s_star = p.s0 + max(
            0.0, v * p.T + v * (v - v_leader) / (2.0 * math.sqrt(p.a_max * p.b_comf))
        )
        a = p.a_max * (free - (s_star / gap) ** 2)
    return max(floor, min(a, p.a_max))


def _leader_gap(world: WorldState, i: int, lane: int, allowed=None) -> tuple[Optional[int], float]:
    j = _nearest_on_lane(world, i, lane, ahead=True, allowed=allowed, use_occupied=True)
    if j is None:
        return None, math.inf
    vi, vj = world.vehicles[i], world.vehicles[j]
    return j, forward_delta(world.road, vi.pos, vj.pos) - vj.vehicle_length


def _follow_accel(world: WorldState, veh: VehicleState, lanes, params: "TrafficParams", allowed=None) -> float:
    """Car following toward the most constraining leader across the given lanes."""
    a = following_accel(veh.velocity, None, 0.0, veh.kind, params)
    for lane in lanes:
        j, gap = _leader_gap(world, veh.id, lane, allowed)
        if j is None:
            continue
        if gap <= 0:
            # Already overlapping (possible in unshielded runs): brake hard.
            return -EMERGENCY_DECEL
        a = min(a, following_accel(veh.velocity, gap, world.vehicles[j].velocity, veh.kind, params))
    return a


def hdv_decide(world: WorldState, i: int, params: TrafficParams) -> Action:
    """Gap-acceptance lane choice for a human-driven vehicle.

    CL/CR only when the target lane exists, lead/lag gaps are accepted (the lag
    requirement grows with the follower's closing speed), and the target-lane
    IDM acceleration beats the current lane by the incentive threshold.
    """
    veh = world.vehicles[i]
    if veh.kind is not VehicleKind.HDV or veh.mid_lane_change:
        return Action.KL
    idm = params.idm_for(veh.kind)
    lc = params.lane_change
    a_keep = _follow_accel(world, veh, (veh.lane,), params)

    best: Optional[tuple[float, Action]] = None
    for action, target in ((Action.CL, veh.lane - 1), (Action.CR, veh.lane + 1)):
        if not (0 <= target < world.road.num_lanes):
            continue
        lead, lead_gap = _leader_gap(world, i, target)
        if lead_gap < lc.accept_gap_lead:
            continue
        lag = _nearest_on_lane(world, i, target, ahead=False, use_occupied=True)
        if lag is not None:
            vlag = world.vehicles[lag]
            lag_gap = forward_delta(world.road, vlag.pos, veh.pos) - veh.vehicle_length
            closing = max(0.0, vlag.velocity - veh.velocity)
            if lag_gap < lc.accept_gap_lag + closing * lc.duration:
                continue
        if lead is None:
            a_target = idm_accel(veh.velocity, None, 0.0, idm)
        else:
            a_target = idm_accel(veh.velocity, lead_gap, world.vehicles[lead].velocity, idm)
        if a_target - a_keep <= params.incentive_threshold:
            continue
        if best is None or a_target > best[0]:
            best = (a_target, action)
    return best[1] if best else Action.KL


def step(
    world: WorldState,
    joint_actions: dict[int, Action],
    dt: float,
    params: TrafficParams = TrafficParams(),
    knowledge: Optional[dict[int, frozenset]] = None,
) -> tuple[WorldState, StepEvents]:
    """Advance every vehicle by one tick.

    All controls are computed from the pre-step snapshot, then integrated
    simultaneously. CAVs restrict car following to vehicles they know about
    (``knowledge``); HDVs and collision detection use ground truth.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    for cid in world.cav_ids():
        if not world.vehicles[cid].mid_lane_change and cid not in joint_actions:
            raise ValueError(f"missing action for CAV {cid}")

    new = world.copy()
    new.time = world.time + 1
    events = StepEvents()
    lc = params.lane_change

    plans: dict[int, tuple[Action, float]] = {}
    for i in world.ids():
        veh = world.vehicles[i]
        if veh.kind is VehicleKind.OBSTACLE:
            continue

        if veh.mid_lane_change:
            act = veh.current_action
        elif veh.kind is VehicleKind.CAV:
            act = joint_actions[i]
        else:
            act = hdv_decide(world, i, params)

        allowed = None
        if knowledge is not None and veh.kind is VehicleKind.CAV:
            allowed = knowledge.get(i, frozenset())

        if act is Action.ES:
            accel = -EMERGENCY_DECEL if veh.velocity > 0 else 0.0
        else:
            if veh.mid_lane_change:
                lanes = {veh.lane, veh.lane_change_target}
            elif act in (Action.CL, Action.CR):
                target = veh.lane - 1 if act is Action.CL else veh.lane + 1
                if 0 <= target < world.road.num_lanes:
                    lanes = {veh.lane, target}
                else:
                    act = Action.KL  # no such lane; unshielded proposals degrade to KL
                    lanes = {veh.lane}
            else:
                lanes = {veh.lane}
            accel = _follow_accel(world, veh, sorted(lanes), params, allowed)
        plans[i] = (act, accel)

    for i, (act, accel) in sorted(plans.items()):
        veh = new.vehicles[i]
        veh.pos = wrap_pos(veh.pos + veh.velocity * dt + 0.5 * accel * dt * dt, world.road)
        veh.velocity = max(0.0, veh.velocity + accel * dt)
        veh.accel = accel
        veh.current_action = act
        if act is Action.ES:
            events.es_executed.append(i)

        if not veh.mid_lane_change and act in (Action.CL, Action.CR):
            veh.lane_change_target = veh.lane - 1 if act is Action.CL else veh.lane + 1
            veh.lane_change_dir = -1 if act is Action.CL else 1
            veh.lane_change_progress = 0.0

        if veh.mid_lane_change:
            d = veh.lane_change_dir
            before = veh.lane_change_progress
            veh.lane_change_progress = before + dt / lc.duration
            width = world.road.lane_width
            if before < 0.5 <= veh.lane_change_progress:
                veh.lane = veh.lane_change_target
            if veh.lane_change_progress >= 1.0 - 1e-9:
                events.lane_changes_completed.append((i, veh.lane))
                veh.lane_change_target = None
                veh.lane_change_dir = 0
                veh.lane_change_progress = 0.0
                veh.lateral_offset = 0.0
                veh.heading = 0.0
                veh.current_action = Action.KL if act in (Action.CL, Action.CR) else act
            else:
                # Lateral center moves linearly between lane centers; the lane
                # attribute flips at the midpoint, so the offset changes frame.
                if veh.lane == veh.lane_change_target:
                    veh.lateral_offset = d * width * (veh.lane_change_progress - 1.0)
                else:
                    veh.lateral_offset = d * width * veh.lane_change_progress
                veh.heading = math.atan2(d * width / lc.duration, max(veh.velocity, 5.0))

    events.collisions = detect_collisions(new)
    return new, events


def detect_collisions(world: WorldState) -> list[tuple[int, int]]:
    """Pairs with overlapping bumpers and laterally conflicting positions."""
    out: list[tuple[int, int]] = []
    ids = world.ids()
    width = world.road.lane_width
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = ids[a], ids[b]
            vi, vj = world.vehicles[i], world.vehicles[j]
            if abs(vi.lateral_center(width) - vj.lateral_center(width)) >= 0.5 * width:
                continue
            d_ij = forward_delta(world.road, vi.pos, vj.pos)
            d_ji = forward_delta(world.road, vj.pos, vi.pos)
            if world.road.topology is Topology.OPEN:
                behind_gap = d_ij - vj.vehicle_length if d_ij >= 0 else d_ji - vi.vehicle_length
            else:
                behind_gap = (
                    d_ij - vj.vehicle_length if d_ij <= d_ji else d_ji - vi.vehicle_length
                )
            if behind_gap <= 0:
                out.append((i, j))
    return out
