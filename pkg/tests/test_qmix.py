import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expert_marl.env import ConfigError
from expert_marl.experts import ExpertPlan
from expert_marl.nn import elu
from expert_marl.qmix import AlgorithmConfig, EpsilonSchedule, QmixModel
from expert_marl.replay import ReplayBuffer, Transition

from gradcases import random_batch, td_loss_case, tiny_model


def zero_module(module):
    for p in module.parameters():
        p.value[...] = 0.0


def const_estimate(model, member_values, main_value):
    """Force every ensemble member and the main mixer to constant outputs."""
    for member, v in zip(model.ensemble, member_values):
        zero_module(member)
        member.net.layers[-1].b.value[...] = v
    zero_module(model.mixer)
    model.mixer.hyper_b2.layers[-1].b.value[...] = main_value


class FixedExpert:
    def __init__(self, actions, valid=True, fail=False):
        self.actions, self.valid, self.fail = actions, valid, fail
        self.calls = 0

    def plan(self, joint_obs):
        self.calls += 1
        if self.fail:
            raise RuntimeError("planner crashed")
        return ExpertPlan(list(self.actions), "a-star", self.valid)


# ---- config ----------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"gamma": 1.0}, {"gamma": -0.1}, {"ensemble_size": 0},
                                {"uncertainty_threshold": -1.0}, {"trunk_kind": "gru"}, {"batch_size": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        AlgorithmConfig(**kw)


def test_epsilon_schedule():
    s = EpsilonSchedule(1.0, 0.1, 10)
    assert s.value(0) == 1.0 and s.value(5) == pytest.approx(0.55) and s.value(10) == s.value(99) == 0.1


# ---- agent network -------------------------------------------------------

def test_zero_weight_agent_net_outputs_bias():
    model = tiny_model(0)
    zero_module(model.agent)
    model.agent.head.layers[-1].b.value[...] = [0.5, -1.0, 2.0, 0.0, 3.0]
    q, _ = model.agent_q_values(model.split(np.ones(model.obs_dim) * 0.3))
    np.testing.assert_array_equal(q, np.tile([0.5, -1.0, 2.0, 0.0, 3.0], (2, 1)))


def test_single_agent_attention_is_an_mlp():
    model = tiny_model(1, n_agents=1, agent_id_onehot=False, relative_inputs=False)
    net = model.agent
    x = np.random.default_rng(0).uniform(-1, 1, model.obs_dim)
    e = np.maximum(net.encoder.W.value @ x + net.encoder.b.value, 0)
    feat = e + net.trunk.Wv.value @ e
    expected = net.head.layers[-1].W.value @ feat + net.head.layers[-1].b.value
    q, _ = model.agent_q_values(x[None])
    np.testing.assert_allclose(q[0], expected, rtol=1e-12, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.permutations(range(3)))
def test_attention_agent_net_is_permutation_equivariant(seed, perm):
    model = tiny_model(seed, n_agents=3, agent_id_onehot=False)
    obs = np.random.default_rng(seed).uniform(-1, 1, (1, 3, model.obs_dim))
    q, _, _ = model.agent.forward(obs)
    qp, _, _ = model.agent.forward(obs[:, list(perm)])
    np.testing.assert_allclose(qp[0], q[0][list(perm)], rtol=1e-10, atol=1e-12)


def test_lstm_hidden_state_threads_through():
    model = tiny_model(2, "lstm")
    obs = model.split(np.zeros(model.obs_dim))
    q0, h1 = model.agent_q_values(obs, model.agent.initial_hidden())
    q1, h2 = model.agent_q_values(obs, h1)
    assert h1[0].shape == (2, 3)
    assert not np.allclose(q0, q1)
    assert not np.allclose(h1[0], h2[0])


# ---- mixer -----------------------------------------------------------------

def test_mixer_constant_b2():
    model = tiny_model(3)
    const_estimate(model, [], 1.25)
    for q in ([0.0, 0.0], [5.0, -3.0]):
        assert model.mix(np.array(q), np.zeros(model.obs_dim)) == 1.25


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5))
def test_mixer_plug_in_single_agent(q):
    model = tiny_model(4, n_agents=1)
    zero_module(model.mixer)
    model.mixer.hyper_w1.b.value[...] = [-1.0, 0.0, 0.0]  # abs(-1) = 1
    model.mixer.hyper_w2.b.value[...] = [1.0, 0.0, 0.0]
    assert model.mix(np.array([q]), np.zeros(model.obs_dim)) == pytest.approx(elu(np.array(q)), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 2))
def test_mixer_monotone(seed, i):
    rng = np.random.default_rng(seed)
    model = QmixModel(AlgorithmConfig(), 3, 3, rng)
    q = rng.normal(scale=3.0, size=3)
    s = rng.uniform(-1, 1, model.obs_dim)
    up = q.copy()
    up[i] += 0.1
    assert model.mix(up, s) >= model.mix(q, s)
    W1, _ = model.mixer.hyper_w1.forward(s[None])
    assert (W1 >= 0).all()


# ---- loss ------------------------------------------------------------------

def test_td_targets_gamma_zero_and_terminal():
    model = tiny_model(5)
    rng = np.random.default_rng(0)
    batch = random_batch(model, rng, 6)
    np.testing.assert_array_equal(model.td_targets(batch, gamma=0.0), batch.reward)
    batch.terminated[...] = 1.0
    np.testing.assert_array_equal(model.td_targets(batch, gamma=0.9), batch.reward)


def test_td_loss_hand_case():
    """One agent, one landmark, one transition, hand-set weights."""
    model = tiny_model(6, n_agents=1, agent_id_onehot=False, relative_inputs=False, gamma=0.5)
    for net in (model.agent, model.mixer, model.target_agent, model.target_mixer):
        zero_module(net)
    # agent net: q = head(e + Wv e) with e = relu(x0); only action 2 gets weight
    for net in (model.agent, model.target_agent):
        net.encoder.W.value[0, 0] = 1.0
        net.head.layers[-1].W.value[2, 0] = 2.0
        net.head.layers[-1].b.value[...] = [0.1, 0.0, 0.0, 0.0, 0.0]
    for mixer in (model.mixer, model.target_mixer):
        mixer.hyper_w1.b.value[0] = 1.0
        mixer.hyper_w2.b.value[0] = 1.0
    obs = np.array([[0.5, 0.0, 0.0, 0.0]])
    nxt = np.array([[-0.2, 0.0, 0.0, 0.0]])
    batch = random_batch(model, np.random.default_rng(0), 1)
    batch.observation[...] = obs
    batch.next_observation[...] = nxt
    batch.actions[...] = 2
    batch.reward[...] = -1.0
    batch.terminated[...] = 0.0
    # live: e = 0.5, q2 = 1.0, Q_tot = elu(1.0) = 1.0
    # target: e = relu(-0.2) = 0, q = [0.1, 0, 0, 0, 0], max 0.1, Q_tot = 0.1
    target = -1.0 + 0.5 * 0.1
    assert model.td_targets(batch)[0] == pytest.approx(target)
    assert model.td_loss(batch, with_grad=False) == pytest.approx((1.0 - target) ** 2)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_td_loss_gradients(seed):
    rep = td_loss_case(seed)
    assert rep.passed, rep


def test_td_loss_empty_batch():
    model = tiny_model(0)
    batch = random_batch(model, np.random.default_rng(0), 2)
    empty = type(batch)(*(getattr(batch, f)[:0] if getattr(batch, f) is not None else None
                          for f in ("observation", "actions", "reward", "next_observation", "terminated",
                                    "hidden", "next_hidden")))
    with pytest.raises(ValueError):
        model.td_loss(empty)


# ---- ensemble --------------------------------------------------------------

def test_uncertainty_identical_members_zero_std():
    model = tiny_model(7)
    const_estimate(model, [0.7, 0.7], 0.7)
    mean, std = model.ensemble_uncertainty(np.zeros(model.obs_dim))
    assert mean == pytest.approx(0.7) and std == 0.0


def test_uncertainty_arithmetic():
    model = tiny_model(8)
    const_estimate(model, [1.0, 3.0], 2.0)
    mean, std = model.ensemble_uncertainty(np.zeros(model.obs_dim))
    assert mean == pytest.approx(2.0)
    assert std == pytest.approx(math.sqrt(2 / 3), rel=1e-12)


def test_fresh_members_disagree():
    for seed in range(100):
        model = QmixModel(AlgorithmConfig(), 3, 3, np.random.default_rng(seed))
        assert model.ensemble_uncertainty(np.zeros(12) + 0.1)[1] > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.permutations(range(3)))
def test_uncertainty_ignores_member_order(seed, perm):
    model = QmixModel(AlgorithmConfig(ensemble_size=3), 3, 3, np.random.default_rng(seed))
    obs = np.random.default_rng(seed).uniform(-1, 1, 12)
    before = model.ensemble_uncertainty(obs)
    model.ensemble = [model.ensemble[k] for k in perm]
    after = model.ensemble_uncertainty(obs)
    assert after == pytest.approx(before, rel=1e-12, abs=1e-15)


# ---- acting ----------------------------------------------------------------

OBS = np.linspace(-0.9, 0.9, 12)


def test_gate_disabled_never_queries():
    model = QmixModel(AlgorithmConfig(uncertainty_threshold=math.inf), 3, 3)
    expert = FixedExpert([1, 1, 1])
    choice = model.select_actions(OBS, gate=True, expert=expert)
    assert expert.calls == 0 and not choice.expert_queried and choice.source == "policy"


def test_gate_zero_threshold_queries():
    model = QmixModel(AlgorithmConfig(uncertainty_threshold=0.0), 3, 3)
    expert = FixedExpert([1, 2, 3])
    choice = model.select_actions(OBS, epsilon=1.0, rng=np.random.default_rng(0), gate=True, expert=expert)
    assert choice.expert_queried and choice.source == "a-star"
    assert choice.actions.tolist() == [1, 2, 3]


@pytest.mark.parametrize("expert", [FixedExpert([0, 0, 0], fail=True), FixedExpert([0, 0, 0], valid=False)])
def test_expert_failure_falls_through(expert):
    model = QmixModel(AlgorithmConfig(uncertainty_threshold=0.0), 3, 3)
    choice = model.select_actions(OBS, gate=True, expert=expert)
    greedy = model.select_actions(OBS)
    assert choice.source == "fallback" and choice.expert_queried
    assert choice.actions.tolist() == greedy.actions.tolist()


def test_greedy_is_deterministic_and_ties_take_lowest_index():
    model = QmixModel(AlgorithmConfig(), 3, 3)
    a = model.select_actions(OBS).actions
    assert a.tolist() == model.select_actions(OBS).actions.tolist()
    zero_module(model.agent)
    assert model.select_actions(OBS).actions.tolist() == [0, 0, 0]


def test_epsilon_needs_rng_and_range():
    model = QmixModel(AlgorithmConfig(), 3, 3)
    with pytest.raises(ValueError):
        model.select_actions(OBS, epsilon=0.5)
    with pytest.raises(ValueError):
        model.select_actions(OBS, epsilon=1.5, rng=np.random.default_rng(0))


# ---- updates ---------------------------------------------------------------

def filled_buffer(model, n, seed=0, capacity=100):
    rng = np.random.default_rng(seed)
    hdim = model.config.hidden_dim if model.agent.recurrent else None
    buf = ReplayBuffer(capacity, model.obs_dim, model.n_agents, hdim, np.random.default_rng(seed + 1))
    b = random_batch(model, rng, n)
    for k in range(n):
        hidden = None if b.hidden is None else (b.hidden[0][k], b.hidden[1][k])
        nh = None if b.next_hidden is None else (b.next_hidden[0][k], b.next_hidden[1][k])
        buf.add(Transition(b.observation[k], b.actions[k], float(b.reward[k]), b.next_observation[k],
                           bool(b.terminated[k]), False, hidden, nh))
    return buf


def params_snapshot(model):
    return {k: v.copy() for k, v in model.state_arrays().items()}


def test_updates_are_deterministic():
    snaps = []
    for _ in range(2):
        model = tiny_model(9)
        buf = filled_buffer(model, 20)
        for _ in range(5):
            model.update(buf)
        snaps.append(params_snapshot(model))
    for k in snaps[0]:
        assert snaps[0][k].tobytes() == snaps[1][k].tobytes(), k


def test_sync_interval_one_keeps_targets_current():
    model = tiny_model(10, target_sync_interval=1)
    buf = filled_buffer(model, 10)
    model.update(buf)
    for (_, a), (_, b) in zip(model.agent.named_parameters(), model.target_agent.named_parameters()):
        assert (a.value == b.value).all()


def test_targets_stale_between_syncs():
    model = tiny_model(11, target_sync_interval=3)
    buf = filled_buffer(model, 10)
    model.update(buf)
    model.update(buf)
    model.update(buf)  # sync happens here
    synced = {k: p.value.copy() for k, p in model.agent.named_parameters()}
    for _ in range(2):
        model.update(buf)
        for k, p in model.target_agent.named_parameters():
            assert p.value.tobytes() == synced[k].tobytes()
    assert any((p.value != synced[k]).any() for k, p in model.agent.named_parameters())


def test_overfits_single_transition():
    model = tiny_model(12, batch_size=1, learning_rate=1e-2, target_sync_interval=10 ** 6)
    buf = filled_buffer(model, 1)
    batch = buf.sample(1)
    first = model.td_loss(batch, with_grad=False)
    for _ in range(100):
        model.update(buf)
    assert model.td_loss(batch, with_grad=False) < 0.1 * first


def test_update_needs_enough_data():
    model = tiny_model(13)
    with pytest.raises(ValueError):
        model.update(filled_buffer(model, 2))


@pytest.mark.parametrize("trunk", ["attention", "lstm"])
def test_state_round_trip(trunk):
    model = tiny_model(14, trunk)
    model.update(filled_buffer(model, 10))
    other = tiny_model(15, trunk)
    other.load_state_arrays(model.state_arrays())
    assert other.update_count == 1
    for k, v in model.state_arrays().items():
        assert v.tobytes() == other.state_arrays()[k].tobytes(), k
    assert model.optimizer.step_count == other.optimizer.step_count
