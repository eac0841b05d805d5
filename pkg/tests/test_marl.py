import math

import numpy as np
import pytest
from scipy import stats

from cavmarl.marl import (
    ReplayBuffer,
    TrainConfig,
    Trainer,
    Transition,
    actor_update,
    comfort,
    critic_target,
    critic_update,
    global_reward,
    min_headway,
    soft_update,
)
from cavmarl.neural import SequenceNet, copy_params, grad_check, set_params, softmax
from cavmarl.perception import PerceptionConfig, obs_width
from cavmarl.safety import SafetyParams
from cavmarl.world import (
    Action,
    NUM_ACTIONS,
    RoadConfig,
    RosterEntry,
    ScenarioSpec,
    Topology,
    VehicleKind,
    VehicleState,
    WorldState,
)

SMALL = PerceptionConfig(own_slots=3, shared_slots=3, history_len=3)


def make_world(entries):
    road = RoadConfig(num_lanes=3, length=1000.0, topology=Topology.OPEN)
    vehicles = {}
    for i, (kind, lane, pos, v, accel, act) in enumerate(entries):
        veh = VehicleState(id=i, kind=kind, lane=lane, pos=pos, velocity=v)
        veh.accel = accel
        veh.current_action = act
        vehicles[i] = veh
    return WorldState(road=road, vehicles=vehicles)


class TestComfort:
    def test_smooth_keep_lane(self):
        assert comfort(0.5, Action.KL, theta=2.0) == 3

    def test_harsh_keep_lane(self):
        assert comfort(-2.5, Action.KL, theta=2.0) == 2

    def test_lane_changes(self):
        assert comfort(0.0, Action.CL) == 1
        assert comfort(5.0, Action.CR) == 1

    def test_emergency_stop(self):
        assert comfort(-8.0, Action.ES) == 0


class TestGlobalReward:
    def test_all_stopped_in_emergency(self):
        world = make_world(
            [
                (VehicleKind.CAV, 0, 100.0, 0.0, 0.0, Action.ES),
                (VehicleKind.CAV, 1, 200.0, 0.0, 0.0, Action.ES),
            ]
        )
        assert global_reward(world, 0.1, 2.0) == 0.0

    def test_substitution(self):
        world = make_world(
            [
                (VehicleKind.CAV, 0, 100.0, 10.0, 0.0, Action.KL),
                (VehicleKind.HDV, 1, 200.0, 10.0, 0.0, Action.KL),
            ]
        )
        # v_bar = 10, all comfort 3, w = 0.1 -> 4.0
        assert global_reward(world, 0.1, 2.0) == pytest.approx(4.0)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(9)
        actions = list(Action)
        for _ in range(100):
            entries = []
            for _ in range(4):
                entries.append(
                    (
                        VehicleKind.HDV,
                        int(rng.integers(0, 3)),
                        float(rng.uniform(0, 900)),
                        float(rng.uniform(0, 30)),
                        float(rng.uniform(-8, 2)),
                        actions[int(rng.integers(0, 4))],
                    )
                )
            world = make_world(entries)
            total_v = 0.0
            total_c = 0
            for _, _, _, v, a, act in entries:
                total_v += v
                if act is Action.ES:
                    total_c += 0
                elif act in (Action.CL, Action.CR):
                    total_c += 1
                else:
                    total_c += 3 if abs(a) < 2.0 else 2
            expect = 0.1 * total_v / 4 + total_c / 4
            assert global_reward(world, 0.1, 2.0) == pytest.approx(expect, abs=1e-12)


class TestReplayBuffer:
    def _tr(self, k):
        z = np.full((1, 2, 3), float(k))
        return Transition(z, z[:, :, :NUM_ACTIONS], float(k), z, z[:, :, :NUM_ACTIONS])

    def test_fifo_eviction(self):
        buf = ReplayBuffer(5, np.random.default_rng(0))
        for k in range(8):
            buf.push(self._tr(k))
        assert len(buf) == 5
        kept = sorted(t.reward for t in buf._items)
        assert kept == [3.0, 4.0, 5.0, 6.0, 7.0]

    def test_uniform_sampling_chi_squared(self):
        buf = ReplayBuffer(100, np.random.default_rng(1))
        for k in range(20):
            buf.push(self._tr(k))
        counts = np.zeros(20)
        for t in buf.sample(100_000):
            counts[int(t.reward)] += 1
        chi2 = float(((counts - 5000.0) ** 2 / 5000.0).sum())
        p = stats.chi2.sf(chi2, df=19)
        assert p > 0.01


class TestSoftUpdate:
    def test_full_copy_at_tau_one(self):
        target = [np.zeros(3)]
        online = [np.arange(3.0)]
        out = soft_update(target, online, 1.0)
        assert np.array_equal(out[0], online[0])

    def test_half_blend_twice(self):
        target = [np.array([0.0])]
        online = [np.array([1.0])]
        once = soft_update(target, online, 0.5)
        twice = soft_update(once, online, 0.5)
        assert twice[0][0] == pytest.approx(0.75)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        target = [rng.standard_normal((2, 3))]
        online = [rng.standard_normal((2, 3))]
        out = soft_update(target, online, 0.3)
        for idx in np.ndindex((2, 3)):
            assert out[0][idx] == pytest.approx(0.3 * online[0][idx] + 0.7 * target[0][idx])

    def test_drift_strictly_decreases(self):
        rng = np.random.default_rng(3)
        target = [rng.standard_normal(5)]
        online = [rng.standard_normal(5)]
        before = float(np.linalg.norm(target[0] - online[0]))
        after = float(np.linalg.norm(soft_update(target, online, 0.1)[0] - online[0]))
        assert after < before


def _tiny_trainer(seed=0, cavs=2, shield=True, episodes=1, steps=12, **cfg_kw):
    road = RoadConfig(num_lanes=2, length=300.0, topology=Topology.RING)
    spec = ScenarioSpec(
        road=road,
        density=cavs / 300.0,
        cav_ratio=1.0,
        rng_seed=seed,
        max_timesteps=steps,
        dt=0.1,
    )
    cfg = TrainConfig(
        episodes=episodes,
        minibatch=4,
        hidden_size=8,
        buffer_capacity=500,
        **cfg_kw,
    )
    return Trainer(
        spec,
        cfg,
        SafetyParams(),
        perception=SMALL,
        shield=shield,
        seed=seed,
    )


def _random_batch(rng, n, h, w, k=3):
    batch = []
    for _ in range(k):
        obs = rng.standard_normal((n, h, w)) * 0.3
        acts = np.zeros((n, h, NUM_ACTIONS))
        idx = rng.integers(0, 3, size=(n, h))
        for a in range(n):
            for t in range(h):
                acts[a, t, idx[a, t]] = 1.0
        nobs = rng.standard_normal((n, h, w)) * 0.3
        nacts = np.zeros((n, h, NUM_ACTIONS))
        nacts[:, :-1] = acts[:, 1:]
        batch.append(Transition(obs, acts, float(rng.standard_normal()), nobs, nacts))
    return batch


class TestCriticTarget:
    def test_gamma_zero_returns_reward(self):
        tr = _tiny_trainer()
        rng = np.random.default_rng(4)
        batch = _random_batch(rng, tr.n_agents, tr.pcfg.history_len, tr.obs_w)
        y = critic_target(batch, 0, tr.nets, gamma=0.0)
        assert np.allclose(y, [t.reward for t in batch])

    def test_zero_target_critic_returns_reward(self):
        tr = _tiny_trainer(seed=1)
        for p in tr.nets[0].target_critic.params():
            p[:] = 0.0
        rng = np.random.default_rng(5)
        batch = _random_batch(rng, tr.n_agents, tr.pcfg.history_len, tr.obs_w)
        y = critic_target(batch, 0, tr.nets, gamma=0.9)
        assert np.allclose(y, [t.reward for t in batch])

    def test_matches_per_sample_oracle(self):
        tr = _tiny_trainer(seed=2)
        rng = np.random.default_rng(6)
        batch = _random_batch(rng, tr.n_agents, tr.pcfg.history_len, tr.obs_w)
        y = critic_target(batch, 0, tr.nets, gamma=0.9)
        for k, t in enumerate(batch):
            filled = t.next_acts.copy()
            for j in range(tr.n_agents):
                seq = np.concatenate(
                    [t.next_obs[j], np.vstack([t.next_acts[j][:-1], np.zeros(NUM_ACTIONS)])],
                    axis=-1,
                )
                logits = tr.nets[j].target_actor.forward(seq[None])
                onehot = np.zeros(NUM_ACTIONS)
                onehot[int(np.argmax(logits[0]))] = 1.0
                filled[j, -1] = onehot
            parts = [t.next_obs[j] for j in range(tr.n_agents)] + [
                filled[j] for j in range(tr.n_agents)
            ]
            joint = np.concatenate(parts, axis=-1)
            q = tr.nets[0].target_critic.forward(joint[None])[0, 0]
            assert y[k] == pytest.approx(t.reward + 0.9 * q, abs=1e-10)


class TestCriticUpdate:
    def test_zero_error_gives_zero_loss(self):
        tr = _tiny_trainer(seed=3)
        rng = np.random.default_rng(7)
        batch = _random_batch(rng, tr.n_agents, tr.pcfg.history_len, tr.obs_w, k=2)
        from cavmarl.marl import _critic_input, _stack_batch

        obs, acts, _, _, _ = _stack_batch(batch)
        y = tr.nets[0].critic.forward(_critic_input(obs, acts))[:, 0]
        loss = critic_update(batch, 0, tr.nets, y.copy())
        assert loss == pytest.approx(0.0, abs=1e-20)

    def test_single_sample_squared_error(self):
        tr = _tiny_trainer(seed=4)
        rng = np.random.default_rng(8)
        batch = _random_batch(rng, tr.n_agents, tr.pcfg.history_len, tr.obs_w, k=1)
        from cavmarl.marl import _critic_input, _stack_batch

        obs, acts, _, _, _ = _stack_batch(batch)
        q = tr.nets[0].critic.forward(_critic_input(obs, acts))[0, 0]
        y = np.array([q + 0.5])
        loss = critic_update(batch, 0, tr.nets, y)
        assert loss == pytest.approx(0.25)

    def test_bellman_gradient_matches_finite_differences(self):
        tr = _tiny_trainer(seed=5)
        rng = np.random.default_rng(9)
        batch = _random_batch(rng, tr.n_agents, tr.pcfg.history_len, tr.obs_w, k=2)
        from cavmarl.marl import _critic_input, _stack_batch
        from cavmarl.neural import mse_loss

        obs, acts, _, _, _ = _stack_batch(batch)
        y = rng.standard_normal(2)
        net = tr.nets[0].critic

        def loss_fn():
            q = net.forward(_critic_input(obs, acts))[:, 0]
            return mse_loss(q, y)[0]

        q = net.forward(_critic_input(obs, acts))[:, 0]
        _, dq = mse_loss(q, y)
        net.zero_grads()
        net.backward(dq[:, None])
        assert grad_check(loss_fn, net.params(), net.grads()) < 1e-5


class TestActorUpdate:
    def test_zero_critic_gives_zero_gradient(self):
        tr = _tiny_trainer(seed=6)
        for p in tr.nets[0].critic.params():
            p[:] = 0.0
        rng = np.random.default_rng(10)
        batch = _random_batch(rng, tr.n_agents, tr.pcfg.history_len, tr.obs_w)
        assert actor_update(batch, 0, tr.nets) == pytest.approx(0.0, abs=1e-15)

    def test_chain_gradient_matches_finite_differences(self):
        tr = _tiny_trainer(seed=7)
        rng = np.random.default_rng(11)
        batch = _random_batch(rng, tr.n_agents, tr.pcfg.history_len, tr.obs_w, k=2)
        from cavmarl.marl import _actor_input, _critic_input, _stack_batch

        obs, acts, _, _, _ = _stack_batch(batch)
        actor = tr.nets[0].actor
        critic = tr.nets[0].critic

        def objective():
            seq = _actor_input(obs[:, 0], acts[:, 0])
            p = softmax(actor.forward(seq))
            relaxed = acts.copy()
            relaxed[:, 0, -1, :] = 0.0
            relaxed[:, 0, -1, :3] = p
            q = critic.forward(_critic_input(obs, relaxed))[:, 0]
            return float(np.mean(q))

        before = copy_params(actor.params())
        actor_update(batch, 0, tr.nets)
        # Recover the ascent gradient that was applied and check it against
        # finite differences of the objective.
        set_params(actor.params(), before)
        seq = _actor_input(obs[:, 0], acts[:, 0])
        p = softmax(actor.forward(seq))
        relaxed = acts.copy()
        relaxed[:, 0, -1, :] = 0.0
        relaxed[:, 0, -1, :3] = p
        critic.forward(_critic_input(obs, relaxed))
        critic.zero_grads()
        din = critic.backward(np.full((2, 1), 0.5))
        w = tr.obs_w
        dp = din[:, -1, tr.n_agents * w : tr.n_agents * w + 3]
        from cavmarl.neural import softmax_bwd

        actor.zero_grads()
        actor.backward(softmax_bwd(p, dp))
        err = grad_check(objective, actor.params(), actor.grads())
        assert err < 1e-5

    def test_bandit_converges_to_rewarded_action(self):
        # A critic that pays exactly for probability mass on CL drives the
        # actor's argmax to CL within a few hundred ascent steps.
        tr = _tiny_trainer(seed=8)
        net = tr.nets[0]
        critic = net.critic
        w = tr.obs_w
        for p in critic.params():
            p[:] = 0.0
        # Wire the dense head to read the CL slot of agent 0 through the LSTM
        # is impossible with zeroed recurrence, so substitute a linear probe:
        # d1 passes the CL logit into hidden unit 0, LSTM is bypassed by
        # making its input gate wide open on that unit.
        rng = np.random.default_rng(12)
        batch = _random_batch(rng, tr.n_agents, tr.pcfg.history_len, tr.obs_w, k=4)

        class LinearCritic:
            def __init__(self, offset):
                self.offset = offset
                self._in = None

            def forward(self, x):
                self._in = x
                return x[:, -1, self.offset : self.offset + 1].copy()

            def backward(self, dq):
                out = np.zeros_like(self._in)
                out[:, -1, self.offset] = dq[:, 0]
                return out

            def zero_grads(self):
                pass

        net.critic = LinearCritic(tr.n_agents * w + int(Action.CL))
        for _ in range(300):
            actor_update(batch, 0, tr.nets)
        seq_obs = batch[0].obs[0]
        seq_act = batch[0].acts[0]
        from cavmarl.marl import _actor_input

        logits = net.actor.forward(_actor_input(seq_obs[None], seq_act[None]))
        assert int(np.argmax(logits[0])) == int(Action.CL)


class TestTrainerLoops:
    def test_zero_episodes_returns_initial_params(self):
        tr = _tiny_trainer(seed=9, episodes=0)
        before = copy_params(tr.nets[0].actor.params())
        result = tr.train()
        assert result.episode_rewards == []
        for a, b in zip(before, tr.nets[0].actor.params()):
            assert np.array_equal(a, b)

    def test_training_is_reproducible(self):
        r1 = _tiny_trainer(seed=10, episodes=2, steps=10).train()
        r2 = _tiny_trainer(seed=10, episodes=2, steps=10).train()
        assert r1.episode_rewards == r2.episode_rewards
        assert [rec.row() for rec in r1.records] == [rec.row() for rec in r2.records]

    def test_select_action_uniform_when_never_exploiting(self):
        tr = _tiny_trainer(seed=11)
        world_spec = tr.scenario
        from cavmarl.perception import HistoryBuffer

        buf = HistoryBuffer(maxlen=tr.pcfg.history_len)
        obs = np.zeros(tr.obs_w)
        counts = {a: 0 for a in (Action.KL, Action.CL, Action.CR)}
        for _ in range(10_000):
            counts[tr.select_action(0, buf, obs, eps=0.0)] += 1
        for a, c in counts.items():
            assert abs(c / 10_000 - 1 / 3) < 0.02

    def test_act_decentralized_deterministic_and_greedy(self):
        tr = _tiny_trainer(seed=12)
        from cavmarl.perception import HistoryBuffer

        buf = HistoryBuffer(maxlen=tr.pcfg.history_len)
        obs = np.random.default_rng(13).standard_normal(tr.obs_w)
        a1 = tr.act_decentralized(0, buf, obs)
        a2 = tr.act_decentralized(0, buf, obs)
        assert a1 == a2
        # Equals exploit branch of select_action when eps pins to 1.
        assert tr.select_action(0, buf, obs, eps=1.0) == a1

    def test_act_decentralized_uses_own_observation_only(self):
        # Two agents with shared weights and different observations must be
        # able to disagree: the policy reads only its own input.
        tr = _tiny_trainer(seed=20, cavs=2, share_weights=True)
        from cavmarl.perception import HistoryBuffer

        buf = HistoryBuffer(maxlen=tr.pcfg.history_len)
        rng = np.random.default_rng(21)
        found_disagreement = False
        for _ in range(40):
            o1 = rng.standard_normal(tr.obs_w) * 3.0
            o2 = rng.standard_normal(tr.obs_w) * 3.0
            if tr.act_decentralized(0, buf, o1) != tr.act_decentralized(1, buf, o2):
                found_disagreement = True
                break
        assert found_disagreement

    def test_shield_forces_emergency_stop_when_everything_blocked(self):
        road = RoadConfig(num_lanes=1, length=400.0, topology=Topology.OPEN)
        roster = (
            RosterEntry(VehicleKind.CAV, 0, 100.0, 20.0),
            RosterEntry(VehicleKind.OBSTACLE, 0, 123.1, 0.0),
        )
        spec = ScenarioSpec(
            road=road,
            roster=roster,
            density=2 / 400.0,
            rng_seed=0,
            max_timesteps=5,
            spawn_gap=18.5,
        )
        tr = Trainer(
            spec,
            TrainConfig(episodes=1, minibatch=4, hidden_size=8),
            SafetyParams(),
            perception=SMALL,
            seed=0,
        )
        result = tr.evaluate(episodes=1)
        assert sum(r.es_count for r in result.records) > 0
        assert sum(r.collisions for r in result.records) == 0


class TestMinHeadway:
    def test_single_vehicle_is_infinite(self):
        world = make_world([(VehicleKind.CAV, 0, 100.0, 10.0, 0.0, Action.KL)])
        assert min_headway(world) == math.inf

    def test_pair(self):
        world = make_world(
            [
                (VehicleKind.CAV, 0, 100.0, 10.0, 0.0, Action.KL),
                (VehicleKind.CAV, 0, 150.0, 10.0, 0.0, Action.KL),
            ]
        )
        assert min_headway(world) == pytest.approx(45.5)
