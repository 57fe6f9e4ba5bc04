"""QMIX learner with an ensemble-of-critics uncertainty gate.

Per-agent utilities come from one shared network (encoder, LSTM or attention
trunk, linear head).  A hypernetwork mixer combines the chosen utilities into
Q_tot with non-negative weights, so Q_tot is monotone in every utility.  A
small ensemble of value estimators, trained on independently sampled
minibatches, supplies the spread used to decide when to ask an expert.
"""
from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from . import env as world
from .nn import Adam, Attention, Dense, LSTMCell, Module, NonFiniteError, elu, mlp
from .replay import Batch, ReplayBuffer

log = logging.getLogger(__name__)

TRUNK_KINDS = ("lstm", "attention")


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 10_000

    def __post_init__(self):
        if not (0.0 <= self.end <= 1.0 and 0.0 <= self.start <= 1.0):
            raise world.ConfigError("epsilon values must lie in [0, 1]")
        if self.decay_steps < 1:
            raise world.ConfigError("epsilon decay_steps must be >= 1")

    def value(self, step: int) -> float:
        if step >= self.decay_steps:
            return self.end
        frac = step / self.decay_steps
        return self.start + frac * (self.end - self.start)


@dataclass(frozen=True)
class AlgorithmConfig:
    gamma: float = 0.95
    learning_rate: float = 5e-4
    critic_learning_rate: float = 5e-4
    batch_size: int = 32
    target_sync_interval: int = 200
    epsilon_schedule: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    ensemble_size: int = 3
    # math.inf disables the gate
    uncertainty_threshold: float = 0.5
    trunk_kind: str = "attention"
    hidden_dim: int = 64
    mixer_embed_dim: int = 32
    ensemble_hidden_dim: int = 64
    agent_id_onehot: bool = True
    # feed other agents / landmarks to the agent net as offsets from its own position
    relative_inputs: bool = True
    # width of a relu layer between trunk and Q head; 0 means a linear head
    head_hidden_dim: int = 0
    grad_clip_norm: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise world.ConfigError("gamma must lie in [0, 1)")
        if self.ensemble_size < 1:
            raise world.ConfigError("ensemble_size must be >= 1")
        if not self.uncertainty_threshold >= 0:
            raise world.ConfigError("uncertainty_threshold must be >= 0 (or disabled)")
        if self.trunk_kind not in TRUNK_KINDS:
            raise world.ConfigError(f"trunk_kind must be one of {TRUNK_KINDS}")
        if self.batch_size < 1 or self.target_sync_interval < 1:
            raise world.ConfigError("batch_size and target_sync_interval must be >= 1")
        if self.learning_rate <= 0 or self.critic_learning_rate <= 0:
            raise world.ConfigError("learning rates must be > 0")
        if min(self.hidden_dim, self.mixer_embed_dim, self.ensemble_hidden_dim) < 1:
            raise world.ConfigError("network sizes must be >= 1")
        if self.head_hidden_dim < 0:
            raise world.ConfigError("head_hidden_dim must be >= 0")


class AgentNetwork(Module):
    """Shared per-agent utility network: observation -> 5 Q-values."""

    def __init__(self, obs_dim: int, n_agents: int, hidden_dim: int, trunk_kind: str,
                 agent_id_onehot: bool, rng: np.random.Generator, relative_inputs: bool = False,
                 head_hidden_dim: int = 0):
        super().__init__()
        self.relative_inputs = relative_inputs
        self.n_agents, self.hidden_dim, self.trunk_kind = n_agents, hidden_dim, trunk_kind
        self.agent_id_onehot = agent_id_onehot
        in_dim = obs_dim + (n_agents if agent_id_onehot else 0)
        self._eye = np.eye(n_agents)
        self.encoder = self.add_child("encoder", Dense(in_dim, hidden_dim, "relu", rng))
        if trunk_kind == "lstm":
            self.trunk = self.add_child("trunk", LSTMCell(hidden_dim, hidden_dim, rng))
        elif trunk_kind == "attention":
            self.trunk = self.add_child("trunk", Attention(hidden_dim, rng))
        else:
            raise ValueError(f"unknown trunk {trunk_kind!r}")
        sizes = [hidden_dim] + ([head_hidden_dim] if head_hidden_dim else []) + [world.N_ACTIONS]
        self.head = self.add_child("head", mlp(sizes, "relu", rng))

    @property
    def recurrent(self) -> bool:
        return self.trunk_kind == "lstm"

    def initial_hidden(self, batch: int | None = None):
        if not self.recurrent:
            return None
        shape = (self.n_agents, self.hidden_dim) if batch is None else (batch, self.n_agents, self.hidden_dim)
        return np.zeros(shape), np.zeros(shape)

    def forward(self, obs, hidden=None):
        """obs: (B, n_agents, obs_dim).  Returns q (B, n_agents, 5), new hidden, cache."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim != 3 or obs.shape[1] != self.n_agents:
            raise ValueError(f"expected (B, {self.n_agents}, obs_dim) observations, got {obs.shape}")
        B = obs.shape[0]
        x = obs
        if self.relative_inputs:
            x = obs.copy()
            x[..., 2:] -= np.tile(obs[..., :2], (obs.shape[-1] - 2) // 2)
        if self.agent_id_onehot:
            ids = np.broadcast_to(self._eye, (B, self.n_agents, self.n_agents))
            x = np.concatenate([x, ids], axis=-1)
        e, c_enc = self.encoder.forward(x)
        if self.recurrent:
            if hidden is None:
                hidden = self.initial_hidden(B)
            h, c = (np.asarray(a, dtype=np.float64).reshape(B, self.n_agents, self.hidden_dim) for a in hidden)
            feat, c_new, c_trunk = self.trunk.forward(e, h, c)
            new_hidden = (feat, c_new)
        else:
            feat, c_trunk = self.trunk.forward(e)
            new_hidden = None
        q, c_head = self.head.forward(feat)
        return q, new_hidden, (c_enc, c_trunk, c_head)

    def backward(self, cache, dq) -> None:
        c_enc, c_trunk, c_head = cache
        dfeat = self.head.backward(c_head, dq)
        if self.recurrent:
            de, _, _ = self.trunk.backward(c_trunk, dfeat)
        else:
            de = self.trunk.backward(c_trunk, dfeat)
        self.encoder.backward(c_enc, de)


class Mixer(Module):
    """Monotonic hypernetwork mixer.

    Q_tot = w2 . elu(q @ W1 + b1) + b2 with W1 = |hyper_w1(s)| and
    w2 = |hyper_w2(s)|.
    """

    def __init__(self, n_agents: int, state_dim: int, embed_dim: int, rng: np.random.Generator):
        super().__init__()
        self.n_agents, self.embed_dim = n_agents, embed_dim
        self.hyper_w1 = self.add_child("hyper_w1", Dense(state_dim, n_agents * embed_dim, "abs", rng))
        self.hyper_b1 = self.add_child("hyper_b1", Dense(state_dim, embed_dim, "identity", rng))
        self.hyper_w2 = self.add_child("hyper_w2", Dense(state_dim, embed_dim, "abs", rng))
        self.hyper_b2 = self.add_child("hyper_b2", mlp([state_dim, embed_dim, 1], "relu", rng))

    def forward(self, q, state):
        q = np.asarray(q, dtype=np.float64)
        state = np.asarray(state, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != self.n_agents or state.shape[0] != q.shape[0]:
            raise ValueError(f"mixer expects q (B, {self.n_agents}) and state (B, S); got {q.shape}, {state.shape}")
        B = q.shape[0]
        W1, c_w1 = self.hyper_w1.forward(state)
        W1 = W1.reshape(B, self.n_agents, self.embed_dim)
        b1, c_b1 = self.hyper_b1.forward(state)
        z = (q[:, None, :] @ W1)[:, 0, :] + b1
        hid = elu(z)
        w2, c_w2 = self.hyper_w2.forward(state)
        b2, c_b2 = self.hyper_b2.forward(state)
        qtot = (hid * w2).sum(axis=-1) + b2[:, 0]
        return qtot, (q, W1, z, hid, w2, c_w1, c_b1, c_w2, c_b2)

    def backward(self, cache, dqtot):
        q, W1, z, hid, w2, c_w1, c_b1, c_w2, c_b2 = cache
        B = q.shape[0]
        dqtot = np.asarray(dqtot, dtype=np.float64).reshape(B, 1)
        self.hyper_w2.backward(c_w2, dqtot * hid)
        self.hyper_b2.backward(c_b2, dqtot)
        dz = dqtot * w2 * np.where(z > 0, 1.0, hid + 1.0)
        self.hyper_b1.backward(c_b1, dz)
        dW1 = q[:, :, None] * dz[:, None, :]
        self.hyper_w1.backward(c_w1, dW1.reshape(B, -1))
        return (W1 @ dz[:, :, None])[:, :, 0]


class ValueEstimator(Module):
    """Ensemble member: (joint observation, agent ids) -> scalar value."""

    def __init__(self, state_dim: int, n_agents: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.n_agents = n_agents
        self._default_ids = np.eye(n_agents).reshape(-1)
        self.net = self.add_child("net", mlp([state_dim + n_agents * n_agents, hidden_dim, hidden_dim, 1], "relu", rng))

    def _inputs(self, state, agent_ids=None):
        state = np.atleast_2d(np.asarray(state, dtype=np.float64))
        if agent_ids is None:
            ids = self._default_ids
        else:
            ids = np.eye(self.n_agents)[np.asarray(agent_ids)].reshape(-1)
        return np.concatenate([state, np.broadcast_to(ids, (state.shape[0], ids.size))], axis=-1)

    def forward(self, state, agent_ids=None):
        out, cache = self.net.forward(self._inputs(state, agent_ids))
        return out[:, 0], cache

    def backward(self, cache, dout):
        self.net.backward(cache, np.asarray(dout, dtype=np.float64)[:, None])


@dataclass
class ActionChoice:
    actions: np.ndarray
    source: str  # policy | epsilon | a-star | llm | fallback
    hidden: tuple[np.ndarray, np.ndarray] | None
    std: float | None
    expert_queried: bool


class QmixModel:
    def __init__(self, config: AlgorithmConfig, n_agents: int, n_landmarks: int,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.n_agents, self.n_landmarks = n_agents, n_landmarks
        self.obs_dim = 2 * n_agents + 2 * n_landmarks
        self.state_dim = self.obs_dim
        seeds = rng.spawn(3 + config.ensemble_size)

        def make_agent(r):
            return AgentNetwork(self.obs_dim, n_agents, config.hidden_dim, config.trunk_kind,
                                config.agent_id_onehot, r, config.relative_inputs, config.head_hidden_dim)

        self.agent = make_agent(seeds[0])
        self.mixer = Mixer(n_agents, self.state_dim, config.mixer_embed_dim, seeds[1])
        self.target_agent = make_agent(seeds[2])
        self.target_mixer = Mixer(n_agents, self.state_dim, config.mixer_embed_dim, seeds[2])
        self.sync_targets()
        self.ensemble = [ValueEstimator(self.state_dim, n_agents, config.ensemble_hidden_dim, seeds[3 + k])
                         for k in range(config.ensemble_size)]
        self._main_params = self.agent.parameters() + self.mixer.parameters()
        self.optimizer = Adam(self._main_params, config.learning_rate)
        self.ensemble_optimizers = [Adam(m.parameters(), config.critic_learning_rate) for m in self.ensemble]
        self.update_count = 0

    # ---- forward helpers -------------------------------------------------

    def split(self, joint_obs) -> np.ndarray:
        return world.split_observation(joint_obs, self.n_agents, self.n_landmarks)

    def agent_q_values(self, per_agent_obs, hidden=None):
        """(n, D) or (B, n, D) observations -> Q matrix of matching batch shape."""
        obs = np.asarray(per_agent_obs, dtype=np.float64)
        single = obs.ndim == 2
        if single:
            obs = obs[None]
            if hidden is not None:
                hidden = tuple(np.asarray(a)[None] for a in hidden)
        q, new_hidden, _ = self.agent.forward(obs, hidden)
        if single:
            q = q[0]
            if new_hidden is not None:
                new_hidden = (new_hidden[0][0], new_hidden[1][0])
        return q, new_hidden

    def mix(self, chosen_q, joint_obs, target: bool = False):
        chosen_q = np.asarray(chosen_q, dtype=np.float64)
        joint_obs = np.asarray(joint_obs, dtype=np.float64)
        single = chosen_q.ndim == 1
        if single:
            chosen_q, joint_obs = chosen_q[None], joint_obs[None]
        mixer = self.target_mixer if target else self.mixer
        qtot, _ = mixer.forward(chosen_q, joint_obs)
        return float(qtot[0]) if single else qtot

    # ---- learning --------------------------------------------------------

    def td_targets(self, batch: Batch, gamma: float | None = None) -> np.ndarray:
        gamma = self.config.gamma if gamma is None else gamma
        q_next, _, _ = self.target_agent.forward(self.split(batch.next_observation), batch.next_hidden)
        qtot_next, _ = self.target_mixer.forward(q_next.max(axis=-1), batch.next_observation)
        return batch.reward + gamma * (1.0 - batch.terminated) * qtot_next

    def _main_loss(self, batch: Batch, targets: np.ndarray, with_grad: bool) -> float:
        q, _, a_cache = self.agent.forward(self.split(batch.observation), batch.hidden)
        actions = batch.actions[:, :, None]
        chosen = np.take_along_axis(q, actions, axis=-1)[:, :, 0]
        qtot, m_cache = self.mixer.forward(chosen, batch.observation)
        err = qtot - targets
        loss = float(np.mean(err * err))
        if not math.isfinite(loss):
            raise NonFiniteError("non-finite TD loss")
        if with_grad:
            dchosen = self.mixer.backward(m_cache, 2.0 * err / err.size)
            dq = np.zeros_like(q)
            np.put_along_axis(dq, actions, dchosen[:, :, None], axis=-1)
            self.agent.backward(a_cache, dq)
        return loss

    def td_loss(self, batch: Batch, gamma: float | None = None, with_grad: bool = True) -> float:
        """Mean squared Bellman error of Q_tot; gradients land in the live nets."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        return self._main_loss(batch, self.td_targets(batch, gamma), with_grad)

    def update(self, replay: ReplayBuffer) -> dict:
        """One Adam step for agent net + mixer, one per ensemble member.

        Each member draws its own minibatch and regresses onto the same
        target the mixer uses, r + gamma * (1 - done) * max Q_tot_target(s'),
        so members and mixer estimate one quantity and their spread shrinks
        where data is plentiful.
        """
        B = self.config.batch_size
        if len(replay) < B:
            raise ValueError(f"replay holds {len(replay)} transitions, need {B}")
        main = replay.sample(B)
        self.optimizer.zero_grad()
        loss = self._main_loss(main, self.td_targets(main), with_grad=True)
        grad_norm = self.optimizer.grad_norm()
        if self.config.grad_clip_norm and grad_norm > self.config.grad_clip_norm:
            self.optimizer.grads *= self.config.grad_clip_norm / grad_norm
        self.optimizer.step()

        member_losses = []
        for member, opt in zip(self.ensemble, self.ensemble_optimizers):
            batch = replay.sample(B)
            target = self.td_targets(batch)
            pred, cache = member.forward(batch.observation)
            err = pred - target
            member_losses.append(float(np.mean(err * err)))
            opt.zero_grad()
            member.backward(cache, 2.0 * err / B)
            opt.step()

        self.update_count += 1
        if self.update_count % self.config.target_sync_interval == 0:
            self.sync_targets()
        return {"loss": loss, "grad_norm": grad_norm,
                "ensemble_loss": float(np.mean(member_losses))}

    def sync_targets(self) -> None:
        self.target_agent.copy_from(self.agent)
        self.target_mixer.copy_from(self.mixer)

    # ---- acting ----------------------------------------------------------

    def ensemble_uncertainty(self, joint_obs, agent_ids=None, greedy_q=None) -> tuple[float, float]:
        """Mean and population std of the ensemble estimates plus the main mixer's."""
        joint_obs = np.asarray(joint_obs, dtype=np.float64)
        if greedy_q is None:
            greedy_q = self.agent_q_values(self.split(joint_obs))[0].max(axis=-1)
        values = [float(m.forward(joint_obs, agent_ids)[0][0]) for m in self.ensemble]
        values.append(self.mix(greedy_q, joint_obs))
        # statistics works in exact arithmetic, so equal estimates give std == 0.0
        return statistics.fmean(values), statistics.pstdev(values)

    def select_actions(self, joint_obs, hidden=None, epsilon: float = 0.0,
                       rng: np.random.Generator | None = None, gate: bool = False,
                       expert=None) -> ActionChoice:
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        joint_obs = np.asarray(joint_obs, dtype=np.float64)
        q, new_hidden = self.agent_q_values(self.split(joint_obs), hidden)
        std = None
        if gate:
            _, std = self.ensemble_uncertainty(joint_obs, greedy_q=q.max(axis=-1))
        fell_back = False
        queried = False
        if gate and expert is not None and std > self.config.uncertainty_threshold:
            queried = True
            try:
                plan = expert.plan(joint_obs)
            except Exception as exc:  # the expert must never stall training
                log.warning("expert failed: %s", exc)
                plan = None
            if plan is not None and plan.valid:
                return ActionChoice(np.asarray(plan.actions, dtype=np.int64), plan.source,
                                    new_hidden, std, True)
            fell_back = True
        actions = q.argmax(axis=-1)
        explored = False
        if epsilon > 0.0:
            if rng is None:
                raise ValueError("epsilon > 0 needs an rng")
            mask = rng.random(self.n_agents) < epsilon
            random_actions = rng.integers(0, world.N_ACTIONS, size=self.n_agents)
            actions = np.where(mask, random_actions, actions)
            explored = bool(mask.any())
        source = "fallback" if fell_back else ("epsilon" if explored else "policy")
        return ActionChoice(actions.astype(np.int64), source, new_hidden, std, queried)

    # ---- persistence -----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, module in self._modules():
            for name, value in module.state_dict().items():
                out[f"{prefix}.{name}"] = value
        for prefix, opt in self._optimizers():
            for name, value in opt.state_dict().items():
                out[f"{prefix}.{name}"] = value
        out["update_count"] = np.array(self.update_count)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for prefix, module in self._modules():
            module.load_state_dict({k[len(prefix) + 1:]: v for k, v in arrays.items()
                                    if k.startswith(prefix + ".")})
        for prefix, opt in self._optimizers():
            opt.load_state_dict({k[len(prefix) + 1:]: v for k, v in arrays.items()
                                 if k.startswith(prefix + ".")})
        self.update_count = int(arrays["update_count"])

    def _modules(self):
        yield "agent", self.agent
        yield "mixer", self.mixer
        yield "target_agent", self.target_agent
        yield "target_mixer", self.target_mixer
        for k, m in enumerate(self.ensemble):
            yield f"ensemble{k}", m

    def _optimizers(self):
        yield "adam_main", self.optimizer
        for k, opt in enumerate(self.ensemble_optimizers):
            yield f"adam_ensemble{k}", opt
