"""Safe-action predicate and the shield: if the proposed behavior keeps every
relevant forward gap above the safe distance under worst-case braking, execute
it; otherwise fall back to the first safe alternative, or emergency stop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .traffic import EMERGENCY_DECEL, TrafficParams, following_accel
from .world import (
    Action,
    POLICY_ACTIONS,
    WorldState,
    forward_delta,
)


@dataclass(frozen=True)
class SafetyParams:
    d_s: float = 18.5  # safe distance, meters
    b_emergency: float = EMERGENCY_DECEL
    b_leader_worst: float = EMERGENCY_DECEL
    check_horizon: float = 10.0  # seconds

    def validate(self) -> None:
        if self.d_s <= 0:
            raise ValueError("SafetyParams.d_s must be > 0")
        if self.b_emergency <= 0 or self.b_leader_worst <= 0:
            raise ValueError("SafetyParams decelerations must be > 0")
        if self.check_horizon <= 0:
            raise ValueError("SafetyParams.check_horizon must be > 0")


@dataclass(frozen=True)
class SafetyVerdict:
    executed: Action
    proposed: Action
    overridden: bool
    tried: tuple[Action, ...]


@dataclass
class _Mover:
    """One neighbor in the worst-case simulation, tracked in gap coordinates."""

    gap: float  # bumper gap to the ego (leaders: ego->j; follower: j->ego)
    v: float
    leader: bool = True
    window: float = float("inf")  # seconds this pair stays relevant
    cap: float = 0.0  # follower speed envelope limit


def _advance(v: float, a: float, t: float) -> tuple[float, float]:
    """Exact displacement and end speed under constant accel with v >= 0."""
    if a < 0 and v + a * t < 0:
        ts = v / -a
        return v * ts + 0.5 * a * ts * ts, 0.0
    return v * t + 0.5 * a * t * t, v + a * t


def _pair_min_gap(g0: float, v_rel: float, a_rel: float, h: float) -> float:
    """Minimum of gap(t) = g0 + v_rel t + a_rel t^2 / 2 over [0, h]."""
    m = min(g0, g0 + v_rel * h + 0.5 * a_rel * h * h)
    if a_rel > 0:
        t_star = -v_rel / a_rel
        if 0.0 < t_star < h:
            m = min(m, g0 + v_rel * t_star + 0.5 * a_rel * t_star * t_star)
    return m


def is_safe(
    world: WorldState,
    i: int,
    action: Action,
    params: SafetyParams = SafetyParams(),
    *,
    traffic: TrafficParams = TrafficParams(),
    dt: float = 0.1,
    knowledge: Optional[dict[int, frozenset]] = None,
    lane_overrides: Optional[dict[int, int]] = None,
) -> bool:
    """Worst-case forward check of one behavior action for vehicle ``i``.

    The ego runs exactly the executed car-following law (toward the most
    constraining of its current- and target-lane leaders until the midpoint
    flip, then the target lane only) while every relevant forward neighbor
    brakes at ``b_leader_worst`` to a stop and the target-lane follower
    accelerates along its worst-case envelope. Controls are held over each
    global ``dt`` tick; trajectories are integrated exactly so the continuous
    minimum of each gap is evaluated (segment endpoints, interior vertices,
    stop and speed-cap kinks). True iff every gap stays strictly above
    ``d_s`` for as long as its pair is relevant: the old-lane leader until the
    flip, everyone else until the ego stops, the maneuver completes, or the
    horizon elapses.

    ``knowledge`` limits the neighbors the ego can reason about (own sensing
    plus V2V); ``lane_overrides`` makes lane changes already committed this
    tick by other vehicles count against their target lanes.
    """
    ego = world.vehicles[i]
    if action not in POLICY_ACTIONS:
        raise ValueError(f"shield checks only policy actions, got {action}")

    target: Optional[int] = None
    if action in (Action.CL, Action.CR):
        target = ego.lane - 1 if action is Action.CL else ego.lane + 1
        if not (0 <= target < world.road.num_lanes):
            return False

    allowed = None
    if knowledge is not None:
        allowed = knowledge.get(i, frozenset())
    overrides = lane_overrides or {}

    def occupies(j: int, lane: int) -> bool:
        return lane in world.vehicles[j].occupied_lanes() or overrides.get(j) == lane

    def nearest(lane: int, ahead: bool) -> Optional[int]:
        best: Optional[tuple[float, int]] = None
        for j, vj in world.vehicles.items():
            if j == i or (allowed is not None and j not in allowed):
                continue
            if not occupies(j, lane):
                continue
            d = (
                forward_delta(world.road, ego.pos, vj.pos)
                if ahead
                else forward_delta(world.road, vj.pos, ego.pos)
            )
            if d <= 0:
                continue
            if best is None or (d, j) < best:
                best = (d, j)
        return None if best is None else best[1]

    # The vehicle leaves its old lane at the midpoint of the maneuver, so the
    # old-lane leader constrains (and is followed) only through the first half
    # of a lane change; the target-lane leader constrains throughout.
    half = traffic.lane_change.duration / 2.0
    movers: dict[int, _Mover] = {}
    lead_of: dict[int, Optional[_Mover]] = {}
    check_lanes = (ego.lane,) if target is None else (ego.lane, target)
    for lane in check_lanes:
        j = nearest(lane, ahead=True)
        if j is None:
            lead_of[lane] = None
            continue
        if j not in movers:
            vj = world.vehicles[j]
            gap = forward_delta(world.road, ego.pos, vj.pos) - vj.vehicle_length
            movers[j] = _Mover(gap=gap, v=vj.velocity)
        lead_of[lane] = movers[j]
    if target is not None:
        tgt_lead = lead_of[target]
        for j, m in movers.items():
            if m is not tgt_lead:
                m.window = half

    follower: Optional[_Mover] = None
    if target is not None:
        f = nearest(target, ahead=False)
        if f is not None:
            vf = world.vehicles[f]
            gap_f = forward_delta(world.road, vf.pos, ego.pos) - ego.vehicle_length
            cap = max(traffic.idm_cav.v0, traffic.idm_hdv.v0, vf.velocity)
            follower = _Mover(gap=gap_f, v=vf.velocity, leader=False, cap=cap)

    if not movers and follower is None:
        return True

    pairs = list(movers.values())
    if follower is not None:
        pairs.append(follower)
    if any(m.gap <= params.d_s for m in pairs):
        return False

    horizon = params.check_horizon
    # Fast path: no pair can close enough to matter within the window.
    reach = max(ego.velocity, traffic.idm_cav.v0) * horizon
    if all(m.gap > params.d_s + reach for m in movers.values()) and (
        follower is None or follower.gap > params.d_s + follower.cap * horizon
    ):
        return True

    window = horizon if target is None else min(horizon, traffic.lane_change.duration)
    b = params.b_leader_worst
    a_fol = max(traffic.idm_cav.a_max, traffic.idm_hdv.a_max)

    def mover_accel(m: _Mover) -> float:
        if m.leader:
            return -b if m.v > 0 else 0.0
        return a_fol if m.v < m.cap else 0.0

    v_e = ego.velocity
    n_ticks = int(-(-window // dt))  # ceil
    for k in range(n_ticks):
        h = min(dt, window - k * dt)
        if h <= 0:
            break
        tracked = [m for lane, m in lead_of.items() if m is not None]
        if target is not None and k * dt >= half:
            tracked = [lead_of[target]] if lead_of[target] is not None else []
        a_e = following_accel(v_e, None, 0.0, ego.kind, traffic)
        for m in tracked:
            if m.gap <= 0:
                return False
            a_e = min(a_e, following_accel(v_e, m.gap, m.v, ego.kind, traffic))
        if v_e <= 0.0 and a_e <= 0.0:
            return True  # stopped and staying stopped: the action's window is over

        # Split the tick at every speed kink so each piece has constant accels.
        breaks = set()
        if a_e < 0 and v_e + a_e * h < 0:
            breaks.add(v_e / -a_e)
        for m in pairs:
            if m.leader and m.v > 0 and m.v - b * h < 0:
                breaks.add(m.v / b)
            if not m.leader and m.v < m.cap and m.v + a_fol * h > m.cap:
                breaks.add((m.cap - m.v) / a_fol)
        pieces = [0.0] + sorted(t for t in breaks if 0.0 < t < h) + [h]

        t_tick = k * dt
        for idx in range(len(pieces) - 1):
            span = pieces[idx + 1] - pieces[idx]
            if span <= 0:
                continue
            t_piece = t_tick + pieces[idx]
            ae = a_e if (v_e > 0 or a_e > 0) else 0.0
            de, v_e_next = _advance(v_e, ae, span)
            for m in pairs:
                am = mover_accel(m)
                if m.leader:
                    v_rel, a_rel = m.v - v_e, am - ae
                else:
                    v_rel, a_rel = v_e - m.v, ae - am
                checked = min(span, m.window - t_piece)
                if checked > 0 and _pair_min_gap(m.gap, v_rel, a_rel, checked) <= params.d_s:
                    return False
                dm, m.v = _advance(m.v, am, span)
                if not m.leader:
                    m.v = min(m.v, m.cap)
                m.gap += (dm - de) if m.leader else (de - dm)
            v_e = v_e_next
            if v_e <= 0.0:
                return True  # stop instant reached: the action's window ends here
    return True


def phi(
    world: WorldState,
    i: int,
    proposed: Action,
    params: SafetyParams = SafetyParams(),
    **kwargs,
) -> SafetyVerdict:
    """Safe action mapping: the proposed action if safe, else the first safe
    alternative in the order KL, CL, CR, else emergency stop."""
    if proposed not in POLICY_ACTIONS:
        raise ValueError(f"policies may only propose {POLICY_ACTIONS}, got {proposed}")
    tried: list[Action] = []
    order = [proposed] + [a for a in POLICY_ACTIONS if a != proposed]
    for a in order:
        if is_safe(world, i, a, params, **kwargs):
            return SafetyVerdict(
                executed=a, proposed=proposed, overridden=a != proposed, tried=tuple(tried)
            )
        tried.append(a)
    return SafetyVerdict(executed=Action.ES, proposed=proposed, overridden=True, tried=tuple(tried))
