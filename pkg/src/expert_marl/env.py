"""Deterministic cooperative-navigation world.

N point-mass agents and M landmarks live in the square [-b, b]^2.  Each step
every agent picks one of five moves (0 stay, 1 left, 2 right, 3 down, 4 up)
and is displaced by ``step_size`` along that axis, then clamped to the world.
The team reward is the negative sum, over landmarks, of the distance to the
closest agent, minus a penalty for every colliding agent pair.

Dynamics are kinematic (fixed displacement per action) rather than
force/velocity based; the experts only reason about positions.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

N_ACTIONS = 5
# action -> (dx, dy) in units of step_size; y points up
MOVES = np.array([[0, 0], [-1, 0], [1, 0], [0, -1], [0, 1]], dtype=np.float64)


class ConfigError(ValueError):
    pass


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_agents: int = 3
    n_landmarks: int = 3
    world_half_extent: float = 1.0
    step_size: float = 0.1
    collision_radius: float = 0.1
    collision_penalty: float = 1.0
    horizon: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.n_agents < 1 or self.n_landmarks < 1 or self.horizon < 1:
            raise ConfigError("n_agents, n_landmarks and horizon must be >= 1")
        if self.step_size <= 0 or self.collision_radius <= 0 or self.world_half_extent <= 0:
            raise ConfigError("step_size, collision_radius and world_half_extent must be > 0")
        if self.collision_penalty < 0:
            raise ConfigError("collision_penalty must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_agents + 2 * self.n_landmarks


@dataclass(frozen=True)
class WorldState:
    agent_positions: np.ndarray  # (n_agents, 2)
    landmark_positions: np.ndarray  # (n_landmarks, 2)
    step_index: int = 0


@dataclass(frozen=True)
class StepResult:
    state: WorldState
    next_observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    collision_count: int


def episode_rng(seed: int, episode_seed: int) -> np.random.Generator:
    # Philox is counter based; the key is the (seed, episode_seed) pair.
    key = np.array([seed, episode_seed], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def reset(config: WorldConfig, episode_seed: int) -> tuple[WorldState, np.ndarray]:
    if not isinstance(config, WorldConfig):
        raise ConfigError("reset needs a WorldConfig")
    if episode_seed < 0:
        raise ConfigError("episode_seed must be non-negative")
    rng = episode_rng(config.seed, episode_seed)
    b = config.world_half_extent
    agents = rng.uniform(-b, b, size=(config.n_agents, 2))
    landmarks = rng.uniform(-b, b, size=(config.n_landmarks, 2))
    state = WorldState(agents, landmarks, 0)
    return state, joint_observation(state)


def joint_observation(state: WorldState) -> np.ndarray:
    return np.concatenate([state.agent_positions.reshape(-1), state.landmark_positions.reshape(-1)])


def state_from_observation(joint_obs, n_agents: int, step_index: int = 0) -> WorldState:
    joint_obs = np.asarray(joint_obs, dtype=np.float64)
    k = 2 * n_agents
    return WorldState(joint_obs[:k].reshape(n_agents, 2).copy(),
                      joint_obs[k:].reshape(-1, 2).copy(), step_index)


def validate_actions(actions, n_agents: int) -> np.ndarray:
    acts = np.asarray(actions)
    if acts.ndim != 1 or acts.shape[0] != n_agents:
        raise InvalidActionError(f"expected {n_agents} actions, got {acts.shape}")
    if acts.dtype.kind not in "iu":
        if acts.dtype.kind == "f" and np.all(acts == np.round(acts)):
            acts = acts.astype(np.int64)
        else:
            raise InvalidActionError(f"actions must be integers, got {actions!r}")
    if np.any(acts < 0) or np.any(acts >= N_ACTIONS):
        raise InvalidActionError(f"actions must be in 0..{N_ACTIONS - 1}, got {list(acts)}")
    return acts.astype(np.int64)


def coverage_distance(agent_positions, landmark_positions) -> float:
    diff = landmark_positions[:, None, :] - agent_positions[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).min(axis=1).sum())


def count_collisions(agent_positions, radius: float) -> int:
    n = agent_positions.shape[0]
    if n < 2:
        return 0
    diff = agent_positions[:, None, :] - agent_positions[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    iu = np.triu_indices(n, k=1)
    return int((dist[iu] < radius).sum())


def team_reward(config: WorldConfig, agent_positions, landmark_positions) -> tuple[float, int]:
    collisions = count_collisions(agent_positions, config.collision_radius)
    reward = -coverage_distance(agent_positions, landmark_positions) - config.collision_penalty * collisions
    return reward, collisions


def step(config: WorldConfig, state: WorldState, actions) -> StepResult:
    acts = validate_actions(actions, config.n_agents)
    if state.step_index >= config.horizon:
        raise InvalidActionError("episode already truncated")
    b = config.world_half_extent
    moved = np.clip(state.agent_positions + MOVES[acts] * config.step_size, -b, b)
    reward, collisions = team_reward(config, moved, state.landmark_positions)
    new_state = WorldState(moved, state.landmark_positions, state.step_index + 1)
    return StepResult(
        state=new_state,
        next_observation=joint_observation(new_state),
        reward=reward,
        terminated=False,
        truncated=new_state.step_index == config.horizon,
        collision_count=collisions,
    )


@lru_cache(maxsize=None)
def agent_view_index(n_agents: int, n_landmarks: int) -> np.ndarray:
    """Index array mapping a joint observation to per-agent rows.

    Row i selects [own position, other agents in fixed order, landmarks].
    """
    rows = []
    landmark_idx = list(range(2 * n_agents, 2 * n_agents + 2 * n_landmarks))
    for i in range(n_agents):
        order = [i] + [j for j in range(n_agents) if j != i]
        idx = [2 * j + d for j in order for d in (0, 1)]
        rows.append(idx + landmark_idx)
    out = np.array(rows, dtype=np.int64)
    out.setflags(write=False)
    return out


def split_observation(joint_obs, n_agents: int, n_landmarks: int) -> np.ndarray:
    """(..., obs_dim) joint observation -> (..., n_agents, obs_dim) per-agent views."""
    joint_obs = np.asarray(joint_obs, dtype=np.float64)
    return joint_obs[..., agent_view_index(n_agents, n_landmarks)]


def per_agent_observation(state: WorldState, agent_index: int) -> np.ndarray:
    n = state.agent_positions.shape[0]
    if not 0 <= agent_index < n:
        raise IndexError(f"agent_index {agent_index} out of range for {n} agents")
    m = state.landmark_positions.shape[0]
    return split_observation(joint_observation(state), n, m)[agent_index]
