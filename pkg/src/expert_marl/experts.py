"""Expert planners: grid A* and an LLM planner reached over HTTP.

Both expose ``plan(joint_observation) -> ExpertPlan``.
"""
from __future__ import annotations

import heapq
import json
import logging
import os
import re
import time
from collections import Counter
from dataclasses import dataclass, replace

import httpx
import numpy as np

from . import env as world

log = logging.getLogger(__name__)

# grid move -> env action, in the fixed neighbour order left, right, down, up
NEIGHBOURS = ((-1, 0, 1), (1, 0, 2), (0, -1, 3), (0, 1, 4))


@dataclass
class ExpertPlan:
    actions: list[int]
    source: str  # a-star | llm | fallback
    valid: bool = True
    raw_response: str | None = None


@dataclass(frozen=True)
class GridSpec:
    resolution: int = 20
    bounds: float = 1.0
    blocked: frozenset = frozenset()

    def __post_init__(self):
        if self.resolution < 2:
            raise world.ConfigError("grid resolution must be >= 2")
        if self.bounds <= 0:
            raise world.ConfigError("grid bounds must be > 0")

    @property
    def cell_size(self) -> float:
        return 2.0 * self.bounds / self.resolution

    def cell_of(self, point) -> tuple[int, int]:
        """Cell whose centre is nearest to ``point`` (points are clamped to the grid)."""
        ix = int(np.floor((point[0] + self.bounds) / self.cell_size))
        iy = int(np.floor((point[1] + self.bounds) / self.cell_size))
        hi = self.resolution - 1
        return min(max(ix, 0), hi), min(max(iy, 0), hi)

    def center(self, cell) -> tuple[float, float]:
        return (-self.bounds + (cell[0] + 0.5) * self.cell_size,
                -self.bounds + (cell[1] + 0.5) * self.cell_size)

    def in_bounds(self, cell) -> bool:
        return 0 <= cell[0] < self.resolution and 0 <= cell[1] < self.resolution

    def free(self, cell) -> bool:
        return self.in_bounds(cell) and cell not in self.blocked


def manhattan(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def a_star(grid: GridSpec, start, goal) -> list[tuple[int, int]] | None:
    """Shortest 4-connected path from ``start`` to ``goal``; None if unreachable.

    Unit step cost with the Manhattan heuristic.  Equal f-scores pop in
    insertion order, and neighbours are pushed left, right, down, up.
    """
    start, goal = tuple(start), tuple(goal)
    if not grid.free(start) or not grid.free(goal):
        raise ValueError(f"start {start} and goal {goal} must be free in-bounds cells")
    counter = 0
    frontier = [(manhattan(start, goal), counter, start)]
    came_from = {start: None}
    g_score = {start: 0}
    closed = set()
    while frontier:
        _, _, cell = heapq.heappop(frontier)
        if cell == goal:
            path = [cell]
            while came_from[path[-1]] is not None:
                path.append(came_from[path[-1]])
            return path[::-1]
        if cell in closed:
            continue
        closed.add(cell)
        g = g_score[cell] + 1
        for dx, dy, _ in NEIGHBOURS:
            nxt = (cell[0] + dx, cell[1] + dy)
            if not grid.free(nxt) or g >= g_score.get(nxt, g + 1):
                continue
            g_score[nxt] = g
            came_from[nxt] = cell
            counter += 1
            heapq.heappush(frontier, (g + manhattan(nxt, goal), counter, nxt))
    return None


def move_to_action(src, dst) -> int:
    delta = (dst[0] - src[0], dst[1] - src[1])
    for dx, dy, action in NEIGHBOURS:
        if (dx, dy) == delta:
            return action
    raise ValueError(f"cells {src} and {dst} are not 4-adjacent")


def nearest_landmark(position, landmarks) -> int:
    d = np.sqrt(((np.asarray(landmarks) - np.asarray(position)) ** 2).sum(axis=1))
    return int(np.argmin(d))  # first minimum = lowest index on ties


def a_star_plan(state: world.WorldState, grid: GridSpec) -> ExpertPlan:
    """Single-agent A* toward each agent's nearest landmark; no coordination."""
    actions = []
    for pos in state.agent_positions:
        goal = grid.cell_of(state.landmark_positions[nearest_landmark(pos, state.landmark_positions)])
        start = grid.cell_of(pos)
        path = a_star(grid, start, goal) if start != goal else [start]
        actions.append(0 if path is None or len(path) < 2 else move_to_action(path[0], path[1]))
    return ExpertPlan(actions, "a-star", True)


class AStarExpert:
    def __init__(self, n_agents: int, grid: GridSpec | None = None):
        self.n_agents = n_agents
        self.grid = grid or GridSpec()

    def plan(self, joint_observation) -> ExpertPlan:
        return a_star_plan(world.state_from_observation(joint_observation, self.n_agents), self.grid)


# ---- prompt -----------------------------------------------------------------

ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth",
            "ninth", "tenth", "eleventh", "twelfth")


def _ordinal(k: int) -> str:
    return ORDINALS[k] if k < len(ORDINALS) else f"{k + 1}th"


def _rounded(values) -> list[float]:
    # python floats so the list renders like a plain list literal
    return [round(float(x), 2) for x in values]


def build_prompt(joint_observation, n_agents: int) -> str:
    obs = np.asarray(joint_observation, dtype=np.float64).reshape(-1)
    if obs.size <= 2 * n_agents or (obs.size - 2 * n_agents) % 2:
        raise ValueError(f"observation of length {obs.size} does not fit {n_agents} agents")
    landmarks = _rounded(obs[2 * n_agents:])
    parts = [
        f"There are {n_agents} agents in the environment. The agents are working in a grid world "
        "and all agents are globally rewarded based on how far the closest agent is to each landmark. ",
        "Locally, the agents are penalized if they collide with other agents. The possible actions "
        "are: 0: nothing, 1: left, 2: right, 3: down, and 4: up. ",
        "Please help the agents to plan the next actions given agents' current observations. "
        "The actions should be displayed in a list. Do not explain the reasoning. ",
    ]
    for i in range(n_agents):
        parts.append(f"The {_ordinal(i)} agent is at position {_rounded(obs[2 * i:2 * i + 2])}, "
                     f"the closest landmarks are at {landmarks}. ")
    parts.append("What are the next actions for the agents? "
                 f"The output should be a list of integers with length {n_agents}.")
    return "".join(parts)


# ---- response parsing -----------------------------------------------------

_INT_LIST = re.compile(r"\[\s*([+-]?\d+(?:\s*,\s*[+-]?\d+)*)\s*,?\s*\]")


class ActionParseError(ValueError):
    """kind is one of no-list-found, wrong-length, out-of-range."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def render_actions(actions) -> str:
    return "[" + ", ".join(str(int(a)) for a in actions) + "]"


def parse_actions(response_text, n_agents: int) -> list[int]:
    match = _INT_LIST.search(str(response_text))
    if match is None:
        raise ActionParseError("no-list-found", "no bracketed integer list in response")
    values = [int(tok) for tok in match.group(1).split(",")]
    if len(values) != n_agents:
        raise ActionParseError("wrong-length", f"expected {n_agents} actions, got {len(values)}")
    if any(v < 0 or v >= world.N_ACTIONS for v in values):
        raise ActionParseError("out-of-range", f"actions out of range: {values}")
    return values


# ---- LLM client -------------------------------------------------------------

@dataclass(frozen=True)
class LlmEndpointConfig:
    base_url: str = "http://127.0.0.1:8000"
    model_name: str = "planner"
    timeout: float = 30.0
    max_retries: int = 2
    temperature: float = 0.0
    transcript_path: str | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise world.ConfigError("timeout must be > 0")
        if self.max_retries < 0:
            raise world.ConfigError("max_retries must be >= 0")

    def with_env_overrides(self) -> "LlmEndpointConfig":
        return replace(self,
                       base_url=os.environ.get("LLM_BASE_URL", self.base_url),
                       model_name=os.environ.get("LLM_MODEL_NAME", self.model_name))

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/v1/chat/completions"


class LlmPlanner:
    """Ask a chat-completions endpoint for joint actions, falling back on failure.

    Transport errors and timeouts are retried up to ``max_retries`` times.  A
    response that does not parse into a valid action list goes straight to
    the fallback expert: with temperature 0 a retry would repeat it.
    """

    def __init__(self, endpoint: LlmEndpointConfig, n_agents: int, fallback=None,
                 client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.n_agents = n_agents
        self.fallback = fallback if fallback is not None else AStarExpert(n_agents)
        self.client = client or httpx.Client(timeout=endpoint.timeout)
        self.failures: Counter = Counter()
        self.n_requests = 0
        self.n_fallbacks = 0
        self.latencies: list[float] = []

    def close(self):
        self.client.close()

    def _transcribe(self, record: dict) -> None:
        if not self.endpoint.transcript_path:
            return
        with open(self.endpoint.transcript_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    def complete(self, prompt: str) -> str:
        """One chat-completion round trip with retries; raises on final transport failure."""
        body = {"model": self.endpoint.model_name,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": self.endpoint.temperature}
        last_exc: Exception | None = None
        for attempt in range(self.endpoint.max_retries + 1):
            self.n_requests += 1
            t0 = time.perf_counter()
            try:
                resp = self.client.post(self.endpoint.url, json=body, timeout=self.endpoint.timeout)
                resp.raise_for_status()
                content = resp.json()["choices"][0]["message"]["content"]
                self.latencies.append(time.perf_counter() - t0)
                self._transcribe({"request": body, "response": content, "attempt": attempt})
                return str(content)
            except httpx.TimeoutException as exc:
                kind, last_exc = "timeout", exc
            except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
                kind, last_exc = "transport", exc
            self.failures[kind] += 1
            log.info("llm request failed (%s, attempt %d): %s", kind, attempt, last_exc)
            self._transcribe({"request": body, "error": kind, "detail": str(last_exc), "attempt": attempt})
        raise ConnectionError(f"llm endpoint failed after {self.endpoint.max_retries + 1} attempts") from last_exc

    def plan(self, joint_observation) -> ExpertPlan:
        prompt = build_prompt(joint_observation, self.n_agents)
        raw = None
        try:
            raw = self.complete(prompt)
            actions = parse_actions(raw, self.n_agents)
            return ExpertPlan(actions, "llm", True, raw)
        except ActionParseError as exc:
            self.failures[exc.kind] += 1
            log.info("unusable llm response (%s): %r", exc.kind, raw)
        except ConnectionError:
            pass
        self.n_fallbacks += 1
        fb = self.fallback.plan(joint_observation)
        return ExpertPlan(list(fb.actions), "fallback", fb.valid, raw)


def llm_plan(joint_observation, endpoint: LlmEndpointConfig, fallback_expert=None,
             n_agents: int = 3) -> ExpertPlan:
    planner = LlmPlanner(endpoint, n_agents, fallback_expert)
    try:
        return planner.plan(joint_observation)
    finally:
        planner.close()
