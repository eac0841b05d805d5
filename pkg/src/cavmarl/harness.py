"""Experiment harness: config files, study runners (CAV-ratio sweep, density
sweep, headway trace, obstacle-at-corner), baselines, and CSV emission."""

from __future__ import annotations

import configparser
import math
from collections import deque
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .marl import (
    TrainConfig,
    Trainer,
    TrainResult,
    _mean_comfort,
    _mean_velocity,
    global_reward,
    min_headway,
)
from .metrics import MetricsRecord, write_metrics_csv, write_rows_csv, mean
from .neural import load_params, save_params, set_params
from .perception import Observation, PerceptionConfig, assemble, knowledge_map
from .safety import SafetyParams, phi
from .traffic import IdmParams, LaneChangeParams, TrafficParams, step
from .world import (
    Action,
    ConfigurationError,
    OcclusionZone,
    POLICY_ACTIONS,
    RoadConfig,
    RosterEntry,
    ScenarioSpec,
    Topology,
    VehicleKind,
    WorldState,
    init_world,
)


class ExperimentKind(Enum):
    TRAIN = "train"
    EVAL = "eval"
    RATIO_SWEEP = "ratio_sweep"
    DENSITY_SWEEP = "density_sweep"
    HEADWAY_TRACE = "headway"
    OBSTACLE_CORNER = "obstacle"
    UNSAFE_ABLATION = "unsafe_ablation"
    IDM_BASELINE = "idm_baseline"


@dataclass(frozen=True)
class ObstacleConfig:
    """Open-road corner scenario: a blocked left lane discovered late unless a
    leader on the clear lane shares what it sees.

    The clear lane carries a steady stream of human-driven traffic, so a
    too-late discovery leaves no room to merge out: informed vehicles change
    lanes well before the corner, uninformed ones pile up behind the blockage.
    """

    road_length: float = 700.0
    num_lanes: int = 2
    boundary: float = 300.0  # the corner: sight lines across it are cut
    zone_end: float = 420.0
    obstacle_positions: tuple[float, ...] = (340.0, 365.0)
    column_positions: tuple[float, ...] = (200.0, 150.0, 100.0)  # CAVs in the blocked lane
    observer_pos: float = 290.0  # CAV in the clear lane that shares its vision
    stream_positions: tuple[float, ...] = (10.0, -60.0, -130.0, -200.0, -270.0, -340.0, -410.0, -480.0)
    speed: float = 16.0
    jitter_pos: float = 4.0
    jitter_speed: float = 1.0
    avoid_range: float = 160.0  # react to known blockers closer than this
    avoid_min_gap: float = 32.0  # too late to maneuver below this gap
    closing_fraction: float = 0.75  # closing speed that marks the target as stalled
    closing_window: int = 5  # observation samples used to estimate closing
    jam_speed: float = 1.0
    jam_seconds: float = 10.0
    max_timesteps: int = 700


@dataclass
class ExperimentSpec:
    kind: ExperimentKind = ExperimentKind.TRAIN
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    safety: SafetyParams = field(default_factory=SafetyParams)
    traffic: TrafficParams = field(default_factory=TrafficParams)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    obstacle: ObstacleConfig = field(default_factory=ObstacleConfig)
    output_dir: str = "out"
    seeds: tuple[int, ...] = (0,)
    shield: bool = True
    sharing: bool = True
    checkpoint: str = ""
    ratios: tuple[float, ...] = (0.0, 0.5, 1.0)
    densities: tuple[float, ...] = (0.02, 0.025, 0.03)
    eval_episodes: int = 1

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        self.scenario.validate()
        try:
            self.train.validate()
            self.safety.validate()
            self.traffic.idm_cav.validate()
            self.traffic.idm_hdv.validate()
            self.traffic.lane_change.validate()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        for r in self.ratios:
            if not (0.0 <= r <= 1.0):
                raise ConfigurationError(f"ratio {r} outside [0, 1]")
        for d in self.densities:
            if d < 0:
                raise ConfigurationError(f"density {d} must be >= 0")


# Config file schema: section -> key -> (target dataclass attribute, parser).
def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "experiment": {
        "kind": ("kind", lambda s: ExperimentKind(s.strip().lower())),
        "seeds": ("seeds", _parse_ints),
        "output_dir": ("output_dir", str.strip),
        "shield": ("shield", _parse_bool),
        "sharing": ("sharing", _parse_bool),
        "checkpoint": ("checkpoint", str.strip),
        "eval_episodes": ("eval_episodes", int),
    },
    "road": {
        "topology": ("topology", lambda s: Topology(s.strip().lower())),
        "length": ("length", float),
        "num_lanes": ("num_lanes", int),
        "lane_width": ("lane_width", float),
    },
    "scenario": {
        "density": ("density", float),
        "cav_ratio": ("cav_ratio", float),
        "max_timesteps": ("max_timesteps", int),
        "dt": ("dt", float),
        "spawn_gap": ("spawn_gap", float),
        "spawn_speed": ("spawn_speed", float),
    },
    "train": {
        "episodes": ("episodes", int),
        "gamma": ("gamma", float),
        "lr": ("lr", float),
        "minibatch": ("minibatch", int),
        "buffer_capacity": ("buffer_capacity", int),
        "hidden_size": ("hidden_size", int),
        "tau": ("tau", float),
        "target_update_every": ("target_update_every", int),
        "eps_start": ("eps_start", float),
        "eps_end": ("eps_end", float),
        "comfort_threshold": ("comfort_threshold", float),
        "reward_weight": ("reward_weight", float),
        "collision_penalty": ("collision_penalty", float),
        "share_weights": ("share_weights", _parse_bool),
        "next_actions_from_replay": ("next_actions_from_replay", _parse_bool),
    },
    "safety": {
        "d_s": ("d_s", float),
        "b_emergency": ("b_emergency", float),
        "b_leader_worst": ("b_leader_worst", float),
        "check_horizon": ("check_horizon", float),
    },
    "idm_cav": {
        "v0": ("v0", float),
        "time_headway": ("T", float),
        "a_max": ("a_max", float),
        "b_comf": ("b_comf", float),
        "s0": ("s0", float),
        "delta": ("delta", float),
    },
    "idm_hdv": {
        "v0": ("v0", float),
        "time_headway": ("T", float),
        "a_max": ("a_max", float),
        "b_comf": ("b_comf", float),
        "s0": ("s0", float),
        "delta": ("delta", float),
    },
    "lane_change": {
        "duration": ("duration", float),
        "accept_gap_lead": ("accept_gap_lead", float),
        "accept_gap_lag": ("accept_gap_lag", float),
    },
    "traffic": {
        "incentive_threshold": ("incentive_threshold", float),
    },
    "perception": {
        "sensing_range": ("sensing_range", float),
        "own_slots": ("own_slots", int),
        "shared_slots": ("shared_slots", int),
        "history_len": ("history_len", int),
        "noise_distance_std": ("noise_distance_std", float),
        "noise_angle_std": ("noise_angle_std", float),
    },
    "sweep": {
        "ratios": ("ratios", _parse_floats),
        "densities": ("densities", _parse_floats),
    },
    "obstacle": {
        "road_length": ("road_length", float),
        "num_lanes": ("num_lanes", int),
        "boundary": ("boundary", float),
        "zone_end": ("zone_end", float),
        "obstacle_positions": ("obstacle_positions", _parse_floats),
        "column_positions": ("column_positions", _parse_floats),
        "observer_pos": ("observer_pos", float),
        "speed": ("speed", float),
        "jitter_pos": ("jitter_pos", float),
        "jitter_speed": ("jitter_speed", float),
        "avoid_range": ("avoid_range", float),
        "avoid_min_gap": ("avoid_min_gap", float),
        "closing_fraction": ("closing_fraction", float),
        "closing_window": ("closing_window", int),
        "jam_speed": ("jam_speed", float),
        "jam_seconds": ("jam_seconds", float),
        "max_timesteps": ("max_timesteps", int),
    },
}


def load_config(path) -> ExperimentSpec:
    """Parse a key = value config file with section headers into an
    ExperimentSpec. Unknown sections or keys are rejected; missing ones fall
    back to the defaults."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    text = Path(path).read_text()
    parser.read_string(text, source=str(path))

    spec = ExperimentSpec()
    updates: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigurationError(f"unknown key '{key}' in section [{section}]")
            attr, conv = _SCHEMA[section][key]
            try:
                updates.setdefault(section, {})[attr] = conv(raw)
            except (ValueError, KeyError) as exc:
                raise ConfigurationError(
                    f"bad value for [{section}] {key} = {raw!r}: {exc}"
                ) from exc

    road = replace(spec.scenario.road, **updates.get("road", {}))
    scenario = replace(spec.scenario, road=road, **updates.get("scenario", {}))
    traffic = TrafficParams(
        idm_cav=replace(spec.traffic.idm_cav, **updates.get("idm_cav", {})),
        idm_hdv=replace(spec.traffic.idm_hdv, **updates.get("idm_hdv", {})),
        lane_change=replace(spec.traffic.lane_change, **updates.get("lane_change", {})),
        **updates.get("traffic", {}),
    )
    exp_updates = updates.get("experiment", {})
    sweep = updates.get("sweep", {})
    spec = ExperimentSpec(
        scenario=scenario,
        train=replace(spec.train, **updates.get("train", {})),
        safety=replace(spec.safety, **updates.get("safety", {})),
        traffic=traffic,
        perception=replace(spec.perception, **updates.get("perception", {})),
        obstacle=replace(spec.obstacle, **updates.get("obstacle", {})),
        **exp_updates,
        **sweep,
    )
    spec.validate()
    return spec


def save_config(spec: ExperimentSpec, path) -> None:
    """Write every key explicitly so a reload reproduces the spec."""
    holders = {
        "experiment": spec,
        "road": spec.scenario.road,
        "scenario": spec.scenario,
        "train": spec.train,
        "safety": spec.safety,
        "idm_cav": spec.traffic.idm_cav,
        "idm_hdv": spec.traffic.idm_hdv,
        "lane_change": spec.traffic.lane_change,
        "traffic": spec.traffic,
        "perception": spec.perception,
        "sweep": spec,
        "obstacle": spec.obstacle,
    }
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        holder = holders[section]
        for key, (attr, _) in keys.items():
            val = getattr(holder, attr)
            if isinstance(val, Enum):
                out = val.value
            elif isinstance(val, tuple):
                out = ", ".join(str(v) for v in val)
            elif isinstance(val, bool):
                out = "true" if val else "false"
            else:
                out = str(val)
            lines.append(f"{key} = {out}")
        lines.append("")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines))


def _trainer(spec: ExperimentSpec, seed: int, scenario: Optional[ScenarioSpec] = None) -> Trainer:
    scn = scenario if scenario is not None else spec.scenario
    scn = replace(scn, rng_seed=seed)
    return Trainer(
        scn,
        spec.train,
        spec.safety,
        spec.traffic,
        spec.perception,
        shield=spec.shield,
        sharing=spec.sharing,
        seed=seed,
    )


def save_checkpoint(trainer: Trainer, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, net in enumerate(trainer.nets):
        save_params(out / f"actor_{k}.bin", net.actor.params())
        save_params(out / f"critic_{k}.bin", net.critic.params())
    lines = [
        f"n_agents = {trainer.n_agents}",
        f"hidden_size = {trainer.cfg.hidden_size}",
        f"obs_width = {trainer.obs_w}",
        f"history_len = {trainer.pcfg.history_len}",
        f"episodes = {trainer.cfg.episodes}",
        f"global_step = {trainer.global_step}",
        f"seed = {trainer.seed}",
        f"rng_seed_chain = {trainer.seed},7",
    ]
    for f_ in fields(TrainConfig):
        lines.append(f"cfg.{f_.name} = {getattr(trainer.cfg, f_.name)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(trainer: Trainer, ckpt_dir) -> None:
    ckpt = Path(ckpt_dir)
    for k, net in enumerate(trainer.nets):
        set_params(net.actor.params(), load_params(ckpt / f"actor_{k}.bin"))
        set_params(net.critic.params(), load_params(ckpt / f"critic_{k}.bin"))


def _summarize(records: list[MetricsRecord]) -> dict:
    return {
        "v_bar_mps": mean(r.v_bar_mps for r in records),
        "c_bar": mean(r.c_bar for r in records),
        "min_headway_m": min((r.min_headway_m for r in records), default=math.inf),
        "unsafe_actions": sum(r.unsafe_actions for r in records),
        "es_count": sum(r.es_count for r in records),
        "collisions": sum(r.collisions for r in records),
    }


def run_train(spec: ExperimentSpec, out: Optional[Path] = None) -> dict[int, TrainResult]:
    out = Path(out or spec.output_dir)
    results = {}
    rows = []
    for seed in spec.seeds:
        trainer = _trainer(spec, seed)
        result = trainer.train()
        results[seed] = result
        run_dir = out / f"train_seed_{seed}"
        write_metrics_csv(result.records, run_dir / "metrics.csv")
        save_checkpoint(trainer, run_dir / "checkpoint")
        s = _summarize(result.records)
        rows.append(
            (
                seed,
                len(result.episode_rewards),
                repr(result.episode_rewards[-1] if result.episode_rewards else 0.0),
                repr(s["v_bar_mps"]),
                repr(s["c_bar"]),
                s["unsafe_actions"],
                s["collisions"],
            )
        )
    write_rows_csv(
        out / "train_summary.csv",
        "seed,episodes,last_episode_reward,v_bar_mps,c_bar,unsafe_actions,collisions",
        rows,
    )
    return results


def run_eval(spec: ExperimentSpec, out: Optional[Path] = None) -> dict[int, TrainResult]:
    out = Path(out or spec.output_dir)
    results = {}
    for seed in spec.seeds:
        trainer = _trainer(spec, seed)
        if spec.checkpoint:
            load_checkpoint(trainer, spec.checkpoint)
        result = trainer.evaluate(episodes=spec.eval_episodes)
        results[seed] = result
        write_metrics_csv(result.records, out / f"eval_seed_{seed}" / "metrics.csv")
    return results


def run_ratio_sweep(spec: ExperimentSpec, out: Optional[Path] = None) -> list[tuple]:
    """Train-then-evaluate at each CAV ratio; ratio 0 runs the scripted
    drivers only. One summary row per (ratio, seed)."""
    out = Path(out or spec.output_dir)
    rows = []
    for ratio in spec.ratios:
        for seed in spec.seeds:
            scenario = replace(spec.scenario, cav_ratio=ratio)
            trainer = _trainer(spec, seed, scenario)
            if ratio > 0.0:
                trainer.train()
            result = trainer.evaluate(episodes=spec.eval_episodes)
            run_dir = out / f"ratio_{ratio:g}_seed_{seed}"
            write_metrics_csv(result.records, run_dir / "metrics.csv")
            s = _summarize(result.records)
            rho = scenario.vehicle_count() / scenario.road.length
            rows.append(
                (
                    repr(float(ratio)),
                    seed,
                    repr(s["v_bar_mps"]),
                    repr(s["c_bar"]),
                    repr(rho * s["v_bar_mps"]),
                    s["unsafe_actions"],
                    s["collisions"],
                )
            )
    write_rows_csv(
        out / "ratio_sweep.csv",
        "cav_ratio,seed,v_bar_mps,c_bar,flow_vps,unsafe_actions,collisions",
        rows,
    )
    return rows


def run_density_sweep(spec: ExperimentSpec, out: Optional[Path] = None) -> list[tuple]:
    """Safe-MARL vs scripted IDM vs the unshielded ablation on matched seeds."""
    out = Path(out or spec.output_dir)
    rows = []
    for density in spec.densities:
        for seed in spec.seeds:
            for policy in ("safe_marl", "idm", "unsafe"):
                ratio = 0.0 if policy == "idm" else spec.scenario.cav_ratio
                scenario = replace(spec.scenario, density=density, cav_ratio=ratio)
                try:
                    if policy == "unsafe":
                        trainer = Trainer(
                            replace(scenario, rng_seed=seed),
                            spec.train,
                            spec.safety,
                            spec.traffic,
                            spec.perception,
                            shield=False,
                            sharing=spec.sharing,
                            seed=seed,
                        )
                        result = trainer.train()
                        records = result.records
                    else:
                        trainer = _trainer(spec, seed, scenario)
                        if policy == "safe_marl" and ratio > 0.0:
                            trainer.train()
                        result = trainer.evaluate(episodes=spec.eval_episodes)
                        records = result.records
                except ConfigurationError as exc:
                    rows.append((repr(float(density)), policy, seed, "", "", "", "skipped"))
                    continue
                run_dir = out / f"density_{density:g}_{policy}_seed_{seed}"
                write_metrics_csv(records, run_dir / "metrics.csv")
                s = _summarize(records)
                rho = scenario.vehicle_count() / scenario.road.length
                rows.append(
                    (
                        repr(float(density)),
                        policy,
                        seed,
                        repr(rho * s["v_bar_mps"]),
                        repr(s["c_bar"]),
                        s["collisions"],
                        "ok",
                    )
                )
    write_rows_csv(
        out / "density_sweep.csv",
        "density,policy,seed,flow_vps,c_bar,collisions,status",
        rows,
    )
    return rows


def run_headway_trace(spec: ExperimentSpec, out: Optional[Path] = None) -> dict[int, list[MetricsRecord]]:
    """Per-timestep minimum same-lane gap while the policy trains."""
    out = Path(out or spec.output_dir)
    traces = {}
    for seed in spec.seeds:
        trainer = _trainer(spec, seed)
        result = trainer.train()
        traces[seed] = result.records
        tag = "shielded" if spec.shield else "unshielded"
        write_metrics_csv(result.records, out / f"headway_{tag}_seed_{seed}" / "metrics.csv")
    return traces


@dataclass
class ObstacleOutcome:
    seed: int
    sharing: bool
    triggers: dict[int, float]  # CAV id -> position of its first escape proposal
    trailing_id: int
    trailing_trigger: float  # +inf when it never proposed to leave the lane
    jam: bool
    records: list[MetricsRecord]


def _obstacle_scenario(cfg: ObstacleConfig, seed: int) -> tuple[ScenarioSpec, int, int]:
    """Roster scenario with per-seed jitter. Returns (spec, obstacle lane, trailing CAV id)."""
    rng = np.random.default_rng([seed, 3])
    road = RoadConfig(
        num_lanes=cfg.num_lanes,
        length=cfg.road_length,
        topology=Topology.OPEN,
        occlusion_zones=(OcclusionZone(start=cfg.boundary, end=cfg.zone_end),),
    )
    roster: list[RosterEntry] = []
    for pos in cfg.obstacle_positions:
        roster.append(RosterEntry(VehicleKind.OBSTACLE, 0, pos, 0.0))
    column_ids = []
    for pos in cfg.column_positions:
        jp = pos + rng.uniform(-cfg.jitter_pos, cfg.jitter_pos)
        jv = cfg.speed + rng.uniform(-cfg.jitter_speed, cfg.jitter_speed)
        column_ids.append(len(roster))
        roster.append(RosterEntry(VehicleKind.CAV, 0, jp, jv))
    observer_lane = 1
    jp = cfg.observer_pos + rng.uniform(-cfg.jitter_pos, cfg.jitter_pos)
    jv = cfg.speed + rng.uniform(-cfg.jitter_speed, cfg.jitter_speed)
    roster.append(RosterEntry(VehicleKind.CAV, observer_lane, jp, jv))
    for pos in cfg.stream_positions:
        jp = pos + rng.uniform(-cfg.jitter_pos, cfg.jitter_pos)
        jv = cfg.speed + rng.uniform(-cfg.jitter_speed, cfg.jitter_speed)
        roster.append(RosterEntry(VehicleKind.HDV, observer_lane, jp, jv))
    spec = ScenarioSpec(
        road=road,
        roster=tuple(roster),
        cav_ratio=1.0,
        density=len(roster) / road.length,
        rng_seed=seed,
        max_timesteps=cfg.max_timesteps,
        dt=0.1,
        spawn_gap=18.5,
    )
    trailing = min(column_ids, key=lambda i: roster[i].pos)
    return spec, 0, trailing


class AvoidancePolicy:
    """Deterministic escape proposals from each vehicle's own observation:
    leave the lane when a known in-lane target ahead is closing at nearly the
    ego speed (a stalled or static blocker) inside the reaction band."""

    def __init__(self, cfg: ObstacleConfig, dt: float):
        self.cfg = cfg
        self.dt = dt
        self._dist: dict[tuple[int, int], deque] = {}

    def propose(self, world: WorldState, i: int, obs: Observation) -> Action:
        veh = world.vehicles[i]
        nearest: Optional[tuple[float, int]] = None
        for slot in obs.own + obs.shared:
            if slot is None:
                continue
            f = slot.feature
            if f.lane_index != 0 or abs(f.observation_angle) >= math.pi / 2:
                continue
            if nearest is None or f.distance < nearest[0]:
                nearest = (f.distance, slot.target_id)
        if nearest is None:
            return Action.KL
        d, target = nearest
        key = (i, target)
        win = self._dist.setdefault(key, deque(maxlen=self.cfg.closing_window))
        win.append(d)
        if len(win) < self.cfg.closing_window or veh.velocity <= 0.5:
            return Action.KL
        closing = (win[0] - win[-1]) / ((len(win) - 1) * self.dt)
        if (
            self.cfg.avoid_min_gap <= d <= self.cfg.avoid_range
            and closing >= self.cfg.closing_fraction * veh.velocity
        ):
            if veh.lane + 1 < world.road.num_lanes:
                return Action.CR
            if veh.lane - 1 >= 0:
                return Action.CL
        return Action.KL


def _run_obstacle_condition(
    spec: ExperimentSpec, seed: int, sharing: bool
) -> ObstacleOutcome:
    scenario, obstacle_lane, trailing = _obstacle_scenario(spec.obstacle, seed)
    world = init_world(scenario, d_s=None)
    cfg = spec.obstacle
    policy = AvoidancePolicy(cfg, scenario.dt)
    # The clear-lane stream is through traffic: it stays in its lane.
    traffic = replace(spec.traffic, incentive_threshold=math.inf)
    cavs = world.cav_ids()
    first_obstacle = min(
        v.pos for v in world.vehicles.values() if v.kind is VehicleKind.OBSTACLE
    )
    triggers: dict[int, float] = {}
    movers = [
        i for i, v in world.vehicles.items() if v.kind is not VehicleKind.OBSTACLE
    ]
    streaks: dict[int, float] = {i: 0.0 for i in movers}
    jam = False
    records: list[MetricsRecord] = []
    rho = len(world.vehicles) / world.road.length
    ep_reward = 0.0
    buffers = {i: None for i in cavs}

    for t in range(cfg.max_timesteps):
        knowledge = knowledge_map(world, spec.perception, sharing)
        actions: dict[int, Action] = {}
        overrides: dict[int, int] = {}
        for i in cavs:
            veh = world.vehicles[i]
            if veh.mid_lane_change:
                actions[i] = veh.current_action
                continue
            obs = assemble(world, i, buffers[i], spec.perception, sharing)
            proposed = policy.propose(world, i, obs)
            if (
                proposed in (Action.CL, Action.CR)
                and veh.lane == obstacle_lane
                and i not in triggers
            ):
                triggers[i] = veh.pos
            verdict = phi(
                world,
                i,
                proposed,
                spec.safety,
                traffic=traffic,
                dt=scenario.dt,
                knowledge=knowledge,
                lane_overrides=overrides,
            )
            executed = verdict.executed
            if executed in (Action.CL, Action.CR):
                overrides[i] = veh.lane - 1 if executed is Action.CL else veh.lane + 1
            actions[i] = executed

        world, events = step(world, actions, scenario.dt, traffic, knowledge)

        r = global_reward(world, spec.train.reward_weight, spec.train.comfort_threshold)
        ep_reward += r
        for i in movers:
            v = world.vehicles[i]
            if v.pos < first_obstacle and v.velocity < cfg.jam_speed:
                streaks[i] += scenario.dt
            else:
                streaks[i] = 0.0
        if sum(1 for s in streaks.values() if s > cfg.jam_seconds) >= 2:
            jam = True
        records.append(
            MetricsRecord(
                timestep=t,
                v_bar_mps=_mean_velocity(world),
                c_bar=_mean_comfort(world, spec.train.comfort_threshold),
                min_headway_m=min_headway(world),
                flow_vps=rho * _mean_velocity(world),
                unsafe_actions=0,
                es_count=len(events.es_executed),
                collisions=len(events.collisions),
                episode_reward=ep_reward,
            )
        )
    return ObstacleOutcome(
        seed=seed,
        sharing=sharing,
        triggers=triggers,
        trailing_id=trailing,
        trailing_trigger=triggers.get(trailing, math.inf),
        jam=jam,
        records=records,
    )


def run_obstacle_corner(
    spec: ExperimentSpec, out: Optional[Path] = None, conditions: tuple[bool, ...] = (True, False)
) -> list[ObstacleOutcome]:
    """Matched-seed comparison of sharing on vs off in the corner scenario."""
    out = Path(out or spec.output_dir)
    outcomes = []
    rows = []
    for seed in spec.seeds:
        for sharing in conditions:
            oc = _run_obstacle_condition(spec, seed, sharing)
            outcomes.append(oc)
            tag = "on" if sharing else "off"
            write_metrics_csv(oc.records, out / f"obstacle_{tag}_seed_{seed}" / "metrics.csv")
            trigger_rows = [
                (i, repr(oc.triggers.get(i, math.inf))) for i in sorted(oc.triggers)
            ]
            write_rows_csv(
                out / f"obstacle_{tag}_seed_{seed}" / "events.csv",
                "vehicle,trigger_pos",
                trigger_rows,
            )
            rows.append(
                (
                    seed,
                    tag,
                    oc.trailing_id,
                    repr(oc.trailing_trigger),
                    1 if oc.jam else 0,
                )
            )
    write_rows_csv(
        out / "obstacle_summary.csv",
        "seed,sharing,trailing_cav,trailing_trigger_pos,jam",
        rows,
    )
    return outcomes
