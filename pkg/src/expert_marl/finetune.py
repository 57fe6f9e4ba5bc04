"""Expert-labelled prompt/completion datasets for planner fine-tuning.

Each line of the output file is one JSON record::

    {"messages": [{"role": "user", "content": <prompt>},
                  {"role": "assistant", "content": "[1, 2, 3]"}],
     "episode_index": 0, "step_index": 4}

Records are consecutive steps of A* rollouts, episode after episode, until
the requested count is reached.
"""
from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from . import env as world
from .config import ExperimentConfig
from .experts import ActionParseError, AStarExpert, GridSpec, build_prompt, parse_actions, render_actions


@dataclass
class FinetuneRecord:
    prompt: str
    completion: str
    episode_index: int
    step_index: int

    def to_json(self) -> str:
        return json.dumps({
            "messages": [{"role": "user", "content": self.prompt},
                         {"role": "assistant", "content": self.completion}],
            "episode_index": self.episode_index,
            "step_index": self.step_index,
        })


@dataclass
class DatasetSummary:
    path: Path
    n_records: int
    n_episodes: int


@dataclass
class ValidationReport:
    n_records: int
    violations: list[tuple[int, str]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.n_records == 0

    @property
    def ok(self) -> bool:
        return not self.violations and not self.empty


def iter_records(config: ExperimentConfig, n_samples: int):
    wc = config.env
    expert = AStarExpert(wc.n_agents, GridSpec(config.expert.grid_resolution, wc.world_half_extent))
    produced, episode = 0, 0
    while produced < n_samples:
        state, obs = world.reset(wc, episode)
        for t in range(wc.horizon):
            actions = expert.plan(obs).actions
            yield FinetuneRecord(build_prompt(obs, wc.n_agents), render_actions(actions), episode, t)
            produced += 1
            if produced == n_samples:
                return
            res = world.step(wc, state, actions)
            state, obs = res.state, res.next_observation
        episode += 1


def generate_dataset(config: ExperimentConfig, n_samples: int, output_path) -> DatasetSummary:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    out = Path(output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=out.name + ".", suffix=".tmp", dir=out.parent)
    episodes = set()
    n = 0
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            for rec in iter_records(config, n_samples):
                fh.write(rec.to_json() + "\n")
                episodes.add(rec.episode_index)
                n += 1
        os.replace(tmp, out)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return DatasetSummary(out, n, len(episodes))


_AGENT_COUNT = re.compile(r"There are (\d+) agents")


def validate_dataset(path, n_agents: int | None = None) -> ValidationReport:
    """Check every line; problems are reported per line number (1-based)."""
    report = ValidationReport(0)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                report.violations.append((lineno, "blank line"))
                continue
            report.n_records += 1
            try:
                rec = json.loads(line)
                messages = rec["messages"]
                prompt = next(m["content"] for m in messages if m["role"] == "user")
                completion = next(m["content"] for m in messages if m["role"] == "assistant")
            except (ValueError, KeyError, TypeError, StopIteration) as exc:
                report.violations.append((lineno, f"malformed record: {exc.__class__.__name__}"))
                continue
            expected = n_agents
            if expected is None:
                m = _AGENT_COUNT.search(str(prompt))
                if m is None:
                    report.violations.append((lineno, "cannot infer agent count from prompt"))
                    continue
                expected = int(m.group(1))
            try:
                parse_actions(completion, expected)
            except ActionParseError as exc:
                report.violations.append((lineno, f"invalid completion ({exc.kind})"))
    return report
