"""Safe actor-critic: replay buffer, per-agent centralized critics and
decentralized actors over action-observation histories, target networks, the
shared reward, and the training / execution loops. Every executed action goes
through the safe action mapping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .metrics import MetricsRecord
from .neural import (
    AdamState,
    SequenceNet,
    apply_adam,
    copy_params,
    mse_loss,
    set_params,
    softmax,
    softmax_bwd,
)
from .perception import (
    HistoryBuffer,
    PerceptionConfig,
    action_onehot,
    assemble,
    history_arrays,
    knowledge_map,
    obs_width,
    push_history,
)
from .safety import SafetyParams, phi
from .traffic import TrafficParams, step
from .world import (
    Action,
    NUM_ACTIONS,
    POLICY_ACTIONS,
    ScenarioSpec,
    VehicleKind,
    WorldState,
    forward_gap,
    immediate_leader,
    init_world,
)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 20
    gamma: float = 0.9
    lr: float = 0.01
    minibatch: int = 64
    buffer_capacity: int = 1_000_000
    hidden_size: int = 128
    tau: float = 0.01
    target_update_every: int = 100  # environment steps between soft updates
    eps_start: float = 0.2  # probability of EXPLOITING the actor, grown over training
    eps_end: float = 0.95
    comfort_threshold: float = 2.0  # acceleration magnitude considered comfortable
    reward_weight: float = 0.1  # velocity weight in the shared reward
    collision_penalty: float = 10.0  # applied only when the shield is disabled
    share_weights: bool = False
    next_actions_from_replay: bool = False  # others' next actions from the batch, not pi'

    def validate(self) -> None:
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        for name in ("eps_start", "eps_end"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")


def comfort(v_dot: float, a: Action, theta: float = 2.0) -> int:
    """Per-vehicle ride comfort from acceleration magnitude and behavior."""
    if a is Action.ES:
        return 0
    if a in (Action.CL, Action.CR):
        return 1
    return 3 if abs(v_dot) < theta else 2


def global_reward(world: WorldState, weight: float = 0.1, theta: float = 2.0) -> float:
    """Shared reward: weighted mean velocity plus mean comfort over all vehicles."""
    if not world.vehicles:
        return 0.0
    vehicles = world.vehicles.values()
    v_bar = sum(v.velocity for v in vehicles) / len(world.vehicles)
    c_bar = sum(comfort(v.accel, v.current_action, theta) for v in vehicles) / len(world.vehicles)
    return weight * v_bar + c_bar


@dataclass
class Transition:
    obs: np.ndarray  # [n, H, W]
    acts: np.ndarray  # [n, H, A]; last row holds the executed joint action
    reward: float
    next_obs: np.ndarray  # [n, H, W]
    next_acts: np.ndarray  # [n, H, A]; last row is zeros until targets fill it


class ReplayBuffer:
    """FIFO transition store with uniform sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self._items: list[Transition] = []
        self._pos = 0

    def push(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._pos] = tr
            self._pos = (self._pos + 1) % self.capacity

    def sample(self, k: int) -> list[Transition]:
        idx = self.rng.integers(0, len(self._items), size=k)
        return [self._items[int(j)] for j in idx]

    def __len__(self) -> int:
        return len(self._items)


def soft_update(target: list[np.ndarray], online: list[np.ndarray], tau: float) -> list[np.ndarray]:
    """Elementwise convex blend tau*online + (1 - tau)*target."""
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    out = []
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        out.append(tau * o + (1.0 - tau) * t)
    return out


@dataclass
class AgentNets:
    actor: SequenceNet
    critic: SequenceNet
    target_actor: SequenceNet
    target_critic: SequenceNet
    actor_opt: AdamState
    critic_opt: AdamState


def _stack_batch(batch: list[Transition]):
    obs = np.stack([t.obs for t in batch])  # [B, n, H, W]
    acts = np.stack([t.acts for t in batch])
    rewards = np.array([t.reward for t in batch])
    next_obs = np.stack([t.next_obs for t in batch])
    next_acts = np.stack([t.next_acts for t in batch])
    return obs, acts, rewards, next_obs, next_acts


def _critic_input(obs: np.ndarray, acts: np.ndarray) -> np.ndarray:
    """[B, n, H, W] + [B, n, H, A] -> [B, H, n W + n A] (all observations, then all actions)."""
    b, n, h, w = obs.shape
    obs_flat = obs.transpose(0, 2, 1, 3).reshape(b, h, n * w)
    act_flat = acts.transpose(0, 2, 1, 3).reshape(b, h, n * acts.shape[-1])
    return np.concatenate([obs_flat, act_flat], axis=-1)


def _actor_input(obs: np.ndarray, acts: np.ndarray) -> np.ndarray:
    """[B, H, W] + [B, H, A] -> [B, H, W + A] with the current action masked."""
    masked = acts.copy()
    masked[:, -1, :] = 0.0
    return np.concatenate([obs, masked], axis=-1)


def critic_target(
    batch: list[Transition],
    agent_idx: int,
    nets: list[AgentNets],
    gamma: float,
    from_replay: bool = False,
) -> np.ndarray:
    """Bellman targets y = r + gamma * Q'(o', a') with a' from the target actors."""
    obs, acts, rewards, next_obs, next_acts = _stack_batch(batch)
    b, n, h, _ = obs.shape
    filled = next_acts.copy()
    for j in range(n):
        if from_replay and j != agent_idx:
            filled[:, j, -1, :] = acts[:, j, -1, :]
            continue
        seq = _actor_input(next_obs[:, j], next_acts[:, j])
        logits = nets[j].target_actor.forward(seq)
        greedy = np.argmax(logits, axis=-1)
        onehot = np.zeros((b, NUM_ACTIONS))
        onehot[np.arange(b), greedy] = 1.0
        filled[:, j, -1, :] = onehot
    q_next = nets[agent_idx].target_critic.forward(_critic_input(next_obs, filled))[:, 0]
    return rewards + gamma * q_next


def critic_update(batch: list[Transition], agent_idx: int, nets: list[AgentNets], y: np.ndarray) -> float:
    """One Adam step on the mean squared Bellman error; returns the pre-step loss."""
    net = nets[agent_idx]
    obs, acts, _, _, _ = _stack_batch(batch)
    q = net.critic.forward(_critic_input(obs, acts))[:, 0]
    loss, dq = mse_loss(q, y)
    net.critic.zero_grads()
    net.critic.backward(dq[:, None])
    net.critic_opt = apply_adam(net.critic_opt, net.critic.params(), net.critic.grads())
    return loss


def actor_update(batch: list[Transition], agent_idx: int, nets: list[AgentNets]) -> float:
    """Ascent on mean Q with the agent's action slot relaxed to its softmax
    output; returns the actor gradient norm."""
    net = nets[agent_idx]
    obs, acts, _, _, _ = _stack_batch(batch)
    b, n, h, w = obs.shape
    a = acts.shape[-1]

    seq = _actor_input(obs[:, agent_idx], acts[:, agent_idx])
    logits = net.actor.forward(seq)
    p = softmax(logits)

    relaxed = acts.copy()
    relaxed[:, agent_idx, -1, :] = 0.0
    relaxed[:, agent_idx, -1, : len(POLICY_ACTIONS)] = p
    critic_in = _critic_input(obs, relaxed)
    net.critic.forward(critic_in)
    net.critic.zero_grads()
    dq = np.full((b, 1), 1.0 / b)
    din = net.critic.backward(dq)
    offset = n * w + agent_idx * a
    dp = din[:, -1, offset : offset + len(POLICY_ACTIONS)]

    dlogits = softmax_bwd(p, dp)
    net.actor.zero_grads()
    net.actor.backward(dlogits)
    grads = net.actor.grads()
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    ascent = [-g for g in grads]
    net.actor_opt = apply_adam(net.actor_opt, net.actor.params(), ascent)
    net.critic.zero_grads()
    return norm


@dataclass
class TrainResult:
    episode_rewards: list[float]
    records: list[MetricsRecord]
    episode_collisions: list[int]
    episodes_truncated: list[bool]


class Trainer:
    """Owns the per-agent networks and runs training / evaluation episodes."""

    def __init__(
        self,
        scenario: ScenarioSpec,
        cfg: TrainConfig = TrainConfig(),
        safety: SafetyParams = SafetyParams(),
        traffic: TrafficParams = TrafficParams(),
        perception: Optional[PerceptionConfig] = None,
        shield: bool = True,
        sharing: bool = True,
        seed: int = 0,
    ):
        cfg.validate()
        safety.validate()
        self.scenario = scenario
        self.cfg = cfg
        self.safety = safety
        self.traffic = traffic
        self.pcfg = perception or PerceptionConfig()
        self.shield = shield
        self.sharing = sharing
        self.seed = seed
        self.rng = np.random.default_rng([seed, 7])

        probe = init_world(replace(scenario, rng_seed=self._world_seed(0)), d_s=safety.d_s)
        self.n_agents = len(probe.cav_ids())
        w = obs_width(self.pcfg)
        self.obs_w = w
        actor_in = w + NUM_ACTIONS
        critic_in = self.n_agents * (w + NUM_ACTIONS)

        self.nets: list[AgentNets] = []
        net_rng = np.random.default_rng([seed, 11])
        for k in range(max(self.n_agents, 0)):
            if cfg.share_weights and k > 0:
                self.nets.append(self.nets[0])
                continue
            actor = SequenceNet(actor_in, cfg.hidden_size, len(POLICY_ACTIONS), net_rng)
            critic = SequenceNet(critic_in, cfg.hidden_size, 1, net_rng)
            t_actor = SequenceNet(actor_in, cfg.hidden_size, len(POLICY_ACTIONS), net_rng)
            t_critic = SequenceNet(critic_in, cfg.hidden_size, 1, net_rng)
            set_params(t_actor.params(), actor.params())
            set_params(t_critic.params(), critic.params())
            self.nets.append(
                AgentNets(
                    actor=actor,
                    critic=critic,
                    target_actor=t_actor,
                    target_critic=t_critic,
                    actor_opt=AdamState.for_params(actor.params(), lr=cfg.lr),
                    critic_opt=AdamState.for_params(critic.params(), lr=cfg.lr),
                )
            )
        self.buffer = ReplayBuffer(cfg.buffer_capacity, np.random.default_rng([seed, 13]))
        self.global_step = 0
        self.total_train_steps = max(1, cfg.episodes * scenario.max_timesteps)

    def _world_seed(self, episode: int) -> int:
        return int(np.random.SeedSequence([self.seed, 101, episode]).generate_state(1)[0])

    def _eps(self) -> float:
        """Exploit probability, grown linearly over the first half of training."""
        half = max(1, self.total_train_steps // 2)
        frac = min(1.0, self.global_step / half)
        return self.cfg.eps_start + frac * (self.cfg.eps_end - self.cfg.eps_start)

    def _actor_seq(self, buffer: HistoryBuffer, obs_vec: np.ndarray) -> np.ndarray:
        h = self.pcfg.history_len
        obs_hist, act_hist = history_arrays(buffer, self.pcfg)
        obs_seq = np.vstack([obs_hist[1:], obs_vec[None, :]])
        act_seq = np.vstack([act_hist[1:], np.zeros((1, NUM_ACTIONS))])
        return np.concatenate([obs_seq, act_seq], axis=-1)[None, :, :]

    def _greedy(self, agent_idx: int, seq: np.ndarray) -> Action:
        logits = self.nets[agent_idx].actor.forward(seq)
        return POLICY_ACTIONS[int(np.argmax(logits[0]))]

    def select_action(
        self, agent_idx: int, buffer: HistoryBuffer, obs_vec: np.ndarray, eps: float
    ) -> Action:
        """Exploit the actor with probability eps, otherwise propose uniformly."""
        if self.rng.random() < eps:
            return self._greedy(agent_idx, self._actor_seq(buffer, obs_vec))
        return POLICY_ACTIONS[int(self.rng.integers(len(POLICY_ACTIONS)))]

    def act_decentralized(self, agent_idx: int, buffer: HistoryBuffer, obs_vec: np.ndarray) -> Action:
        """Greedy proposal from the agent's own observation history only."""
        return self._greedy(agent_idx, self._actor_seq(buffer, obs_vec))

    def train(self) -> TrainResult:
        result = TrainResult([], [], [], [])
        t0 = 0
        for e in range(self.cfg.episodes):
            world = init_world(
                replace(self.scenario, rng_seed=self._world_seed(e)), d_s=self.safety.d_s
            )
            reward, collisions, truncated, t0 = self._episode(world, True, result.records, t0)
            result.episode_rewards.append(reward)
            result.episode_collisions.append(collisions)
            result.episodes_truncated.append(truncated)
        return result

    def evaluate(self, episodes: int = 1, policy: str = "greedy") -> TrainResult:
        """Run shielded greedy (or uniform-random) episodes without learning."""
        result = TrainResult([], [], [], [])
        t0 = 0
        for e in range(episodes):
            world = init_world(
                replace(self.scenario, rng_seed=self._world_seed(e)), d_s=self.safety.d_s
            )
            reward, collisions, truncated, t0 = self._episode(
                world, False, result.records, t0, policy=policy
            )
            result.episode_rewards.append(reward)
            result.episode_collisions.append(collisions)
            result.episodes_truncated.append(truncated)
        return result

    def _episode(
        self,
        world: WorldState,
        learn: bool,
        records: list[MetricsRecord],
        t0: int,
        policy: str = "greedy",
    ) -> tuple[float, int, bool, int]:
        cavs = world.cav_ids()
        agent_of = {cid: k for k, cid in enumerate(cavs)}
        buffers = {i: HistoryBuffer(maxlen=self.pcfg.history_len) for i in cavs}
        rho = len(world.vehicles) / world.road.length
        ep_reward = 0.0
        ep_collisions = 0
        truncated = False
        steps = self.scenario.max_timesteps

        for t in range(steps):
            knowledge = knowledge_map(world, self.pcfg, self.sharing) if cavs else {}
            obs_vec = {
                i: assemble(world, i, buffers[i], self.pcfg, self.sharing).vector(self.pcfg)
                for i in cavs
            }
            actions: dict[int, Action] = {}
            overrides: dict[int, int] = {}
            for i in cavs:
                veh = world.vehicles[i]
                if veh.mid_lane_change:
                    actions[i] = veh.current_action
                    continue
                k = agent_of[i]
                if not learn and policy == "random":
                    proposed = POLICY_ACTIONS[int(self.rng.integers(len(POLICY_ACTIONS)))]
                elif learn:
                    proposed = self.select_action(k, buffers[i], obs_vec[i], self._eps())
                else:
                    proposed = self.act_decentralized(k, buffers[i], obs_vec[i])
                if self.shield:
                    verdict = phi(
                        world,
                        i,
                        proposed,
                        self.safety,
                        traffic=self.traffic,
                        dt=self.scenario.dt,
                        knowledge=knowledge,
                        lane_overrides=overrides,
                    )
                    executed = verdict.executed
                else:
                    executed = proposed
                if executed in (Action.CL, Action.CR):
                    overrides[i] = veh.lane - 1 if executed is Action.CL else veh.lane + 1
                actions[i] = executed

            world2, events = step(world, actions, self.scenario.dt, self.traffic, knowledge)
            r = global_reward(world2, self.cfg.reward_weight, self.cfg.comfort_threshold)
            if not self.shield:
                r -= self.cfg.collision_penalty * len(events.collisions)
            ep_reward += r
            ep_collisions += len(events.collisions)

            unsafe = self._count_unsafe(world2, actions, knowledge)
            records.append(
                MetricsRecord(
                    timestep=t0 + t,
                    v_bar_mps=_mean_velocity(world2),
                    c_bar=_mean_comfort(world2, self.cfg.comfort_threshold),
                    min_headway_m=min_headway(world2),
                    flow_vps=rho * _mean_velocity(world2),
                    unsafe_actions=unsafe,
                    es_count=len(events.es_executed),
                    collisions=len(events.collisions),
                    episode_reward=ep_reward,
                )
            )

            for i in cavs:
                buffers[i] = push_history(buffers[i], obs_vec[i], actions[i], self.pcfg)

            if learn and cavs:
                next_obs_vec = {
                    i: assemble(world2, i, buffers[i], self.pcfg, self.sharing).vector(self.pcfg)
                    for i in cavs
                }
                self._store(cavs, buffers, next_obs_vec, r)
                if len(self.buffer) >= self.cfg.minibatch:
                    for k in range(self.n_agents):
                        batch = self.buffer.sample(self.cfg.minibatch)
                        y = critic_target(
                            batch, k, self.nets, self.cfg.gamma, self.cfg.next_actions_from_replay
                        )
                        critic_update(batch, k, self.nets, y)
                        actor_update(batch, k, self.nets)
                self.global_step += 1
                if self.global_step % self.cfg.target_update_every == 0:
                    self._soft_update_all()

            world = world2
            if events.collisions and not self.shield:
                truncated = True
                t0 += t + 1
                return ep_reward, ep_collisions, truncated, t0
        t0 += steps
        return ep_reward, ep_collisions, truncated, t0

    def _store(self, cavs, buffers, next_obs_vec, reward: float) -> None:
        n = len(cavs)
        h = self.pcfg.history_len
        obs = np.zeros((n, h, self.obs_w))
        acts = np.zeros((n, h, NUM_ACTIONS))
        nobs = np.zeros_like(obs)
        nacts = np.zeros_like(acts)
        for k, i in enumerate(cavs):
            o_hist, a_hist = history_arrays(buffers[i], self.pcfg)
            obs[k] = o_hist
            acts[k] = a_hist
            nobs[k] = np.vstack([o_hist[1:], next_obs_vec[i][None, :]])
            nacts[k] = np.vstack([a_hist[1:], np.zeros((1, NUM_ACTIONS))])
        self.buffer.push(
            Transition(obs=obs, acts=acts, reward=reward, next_obs=nobs, next_acts=nacts)
        )

    def _count_unsafe(self, world: WorldState, actions: dict[int, Action], knowledge) -> int:
        """Executed behavior actions whose post-step forward gap to a known
        leader fell below the safe distance. The emergency stop is the fallback
        outside the behavior set and is never counted."""
        count = 0
        for i, act in actions.items():
            if act not in POLICY_ACTIONS:
                continue
            veh = world.vehicles[i]
            allowed = knowledge.get(i) if knowledge else None
            for lane in veh.occupied_lanes():
                j = _nearest_known_leader(world, i, lane, allowed)
                if j is None:
                    continue
                if forward_gap(world, i, j) < self.safety.d_s:
                    count += 1
                    break
        return count

    def _soft_update_all(self) -> None:
        seen = set()
        for net in self.nets:
            if id(net) in seen:
                continue
            seen.add(id(net))
            set_params(
                net.target_actor.params(),
                soft_update(net.target_actor.params(), net.actor.params(), self.cfg.tau),
            )
            set_params(
                net.target_critic.params(),
                soft_update(net.target_critic.params(), net.critic.params(), self.cfg.tau),
            )


def _nearest_known_leader(world: WorldState, i: int, lane: int, allowed) -> Optional[int]:
    from .world import _nearest_on_lane

    return _nearest_on_lane(world, i, lane, ahead=True, allowed=allowed, use_occupied=True)


def _mean_velocity(world: WorldState) -> float:
    if not world.vehicles:
        return 0.0
    return sum(v.velocity for v in world.vehicles.values()) / len(world.vehicles)


def _mean_comfort(world: WorldState, theta: float) -> float:
    if not world.vehicles:
        return 0.0
    return sum(
        comfort(v.accel, v.current_action, theta) for v in world.vehicles.values()
    ) / len(world.vehicles)


def min_headway(world: WorldState) -> float:
    """Minimum same-lane bumper gap over all vehicles; +inf when no pair exists."""
    best = math.inf
    for i in world.ids():
        j = immediate_leader(world, i, world.vehicles[i].lane)
        if j is not None:
            best = min(best, forward_gap(world, i, j))
    return best
