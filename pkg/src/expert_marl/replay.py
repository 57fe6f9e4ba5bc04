"""Transitions and a fixed-capacity FIFO replay buffer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    observation: np.ndarray
    actions: np.ndarray
    reward: float
    next_observation: np.ndarray
    terminated: bool
    truncated: bool
    # LSTM (h, c) of every agent before / after the step; None for attention trunks
    hidden: tuple[np.ndarray, np.ndarray] | None = None
    next_hidden: tuple[np.ndarray, np.ndarray] | None = None
    source: str = "policy"


@dataclass
class Batch:
    observation: np.ndarray  # (B, obs_dim)
    actions: np.ndarray  # (B, n_agents) int
    reward: np.ndarray  # (B,)
    next_observation: np.ndarray
    terminated: np.ndarray  # (B,) float 0/1
    hidden: tuple[np.ndarray, np.ndarray] | None = None  # each (B, n_agents, H)
    next_hidden: tuple[np.ndarray, np.ndarray] | None = None

    def __len__(self):
        return self.reward.shape[0]

    @classmethod
    def from_transitions(cls, transitions: list[Transition]) -> "Batch":
        if not transitions:
            raise ValueError("empty batch")
        has_hidden = transitions[0].hidden is not None

        def stack_hidden(attr):
            if not has_hidden:
                return None
            return (np.stack([getattr(t, attr)[0] for t in transitions]),
                    np.stack([getattr(t, attr)[1] for t in transitions]))

        return cls(
            observation=np.stack([np.asarray(t.observation, float) for t in transitions]),
            actions=np.stack([np.asarray(t.actions, np.int64) for t in transitions]),
            reward=np.array([t.reward for t in transitions], dtype=np.float64),
            next_observation=np.stack([np.asarray(t.next_observation, float) for t in transitions]),
            terminated=np.array([float(t.terminated) for t in transitions]),
            hidden=stack_hidden("hidden"),
            next_hidden=stack_hidden("next_hidden"),
        )


class ReplayBuffer:
    """Ring buffer; eviction is FIFO and sampling is uniform over current contents."""

    def __init__(self, capacity: int, obs_dim: int, n_agents: int,
                 hidden_dim: int | None = None, rng: np.random.Generator | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.terminated = np.zeros(capacity)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.sources = [""] * capacity
        self.hidden_dim = hidden_dim
        if hidden_dim is not None:
            shape = (capacity, n_agents, hidden_dim)
            self.h, self.c = np.zeros(shape), np.zeros(shape)
            self.next_h, self.next_c = np.zeros(shape), np.zeros(shape)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, t: Transition) -> None:
        k = self._next
        self.obs[k] = t.observation
        self.next_obs[k] = t.next_observation
        self.actions[k] = t.actions
        self.reward[k] = t.reward
        self.terminated[k] = float(t.terminated)
        self.truncated[k] = t.truncated
        self.sources[k] = t.source
        if self.hidden_dim is not None:
            self.h[k], self.c[k] = t.hidden
            self.next_h[k], self.next_c[k] = t.next_hidden
        self._next = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample_indices(self, k: int) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, self._size, size=k)

    def gather(self, idx: np.ndarray) -> Batch:
        hidden = next_hidden = None
        if self.hidden_dim is not None:
            hidden = (self.h[idx], self.c[idx])
            next_hidden = (self.next_h[idx], self.next_c[idx])
        return Batch(self.obs[idx], self.actions[idx], self.reward[idx],
                     self.next_obs[idx], self.terminated[idx], hidden, next_hidden)

    def sample(self, k: int) -> Batch:
        return self.gather(self.sample_indices(k))

    def _slot_order(self) -> list[int]:
        start = self._next if self._size == self.capacity else 0
        return [(start + j) % self.capacity for j in range(self._size)]

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        out = []
        for k in self._slot_order():
            hidden = next_hidden = None
            if self.hidden_dim is not None:
                hidden = (self.h[k].copy(), self.c[k].copy())
                next_hidden = (self.next_h[k].copy(), self.next_c[k].copy())
            out.append(Transition(self.obs[k].copy(), self.actions[k].copy(), float(self.reward[k]),
                                  self.next_obs[k].copy(), bool(self.terminated[k]),
                                  bool(self.truncated[k]), hidden, next_hidden, self.sources[k]))
        return out
