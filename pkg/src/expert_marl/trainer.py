"""Off-policy training loop, evaluation, metrics and experiment bookkeeping."""
from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
import time
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import env as world
from .config import ExperimentConfig, config_from_yaml, dump_config, to_dict
from .experts import AStarExpert, GridSpec, LlmPlanner
from .nn import NonFiniteError, load_arrays, save_arrays
from .qmix import ActionChoice, QmixModel
from .replay import ReplayBuffer, Transition

log = logging.getLogger(__name__)

EVAL_SEED_BASE = 1_000_000_000
TRAIN_COLUMNS = ["step", "episode", "source", "reward", "loss", "ensemble_std",
                 "expert_queries", "fallbacks", "epsilon"]
EVAL_COLUMNS = ["step", "mean_return", "std_return", "collision_rate"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SeedStreams:
    """Independent generators derived from one master seed."""
    init: np.random.Generator
    explore: np.random.Generator
    replay: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "SeedStreams":
        init, explore, replay = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        return cls(init, explore, replay)


@dataclass
class EvalResult:
    mean_return: float
    std_return: float
    collision_rate: float
    returns: list[float] = field(default_factory=list)


@dataclass
class TrainResult:
    exp_dir: Path
    checkpoint: Path
    best_checkpoint: Path | None
    train_csv: Path
    eval_csv: Path
    evals: list[tuple[int, EvalResult]]
    expert_queries: int
    fallbacks: int
    source_counts: dict[str, int]

    @property
    def final_eval(self) -> EvalResult:
        return self.evals[-1][1]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvLog:
    """Append-only CSV with a fixed header, flushed after every row."""

    def __init__(self, path: Path, columns: list[str]):
        self.path = Path(path)
        self.columns = columns
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(columns)
        self._fh.flush()

    def write(self, **row) -> None:
        self._writer.writerow([_fmt(row.get(c)) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def make_expert(config: ExperimentConfig):
    kind = config.expert.kind
    n = config.env.n_agents
    grid = GridSpec(config.expert.grid_resolution, config.env.world_half_extent)
    if kind == "none":
        return None
    if kind == "a-star":
        return AStarExpert(n, grid)
    if kind == "llm":
        return LlmPlanner(config.expert.llm.with_env_overrides(), n, AStarExpert(n, grid))
    raise ValueError(f"unknown expert kind {kind!r}")


def build_model(config: ExperimentConfig, rng: np.random.Generator) -> QmixModel:
    return QmixModel(config.algorithm, config.env.n_agents, config.env.n_landmarks, rng)


def evaluate(model: QmixModel, world_config: world.WorldConfig, episodes: int,
             seed_base: int = EVAL_SEED_BASE) -> EvalResult:
    """Greedy rollouts with the gate off; touches no training state."""
    returns, collisions, steps = [], 0, 0
    for k in range(episodes):
        state, obs = world.reset(world_config, seed_base + k)
        hidden = model.agent.initial_hidden()
        total = 0.0
        while True:
            choice = model.select_actions(obs, hidden, epsilon=0.0, gate=False)
            hidden = choice.hidden
            res = world.step(world_config, state, choice.actions)
            total += res.reward
            collisions += res.collision_count
            steps += 1
            state, obs = res.state, res.next_observation
            if res.truncated or res.terminated:
                break
        returns.append(total)
    arr = np.array(returns)
    return EvalResult(float(arr.mean()), float(arr.std()), collisions / steps, returns)


def random_policy_return(world_config: world.WorldConfig, episodes: int = 1000, seed: int = 12345,
                         seed_base: int = 2 * EVAL_SEED_BASE) -> float:
    """Monte Carlo mean return of the uniform random joint policy."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for k in range(episodes):
        state, _ = world.reset(world_config, seed_base + k)
        for _ in range(world_config.horizon):
            res = world.step(world_config, state, rng.integers(0, world.N_ACTIONS, world_config.n_agents))
            total += res.reward
            state = res.state
    return total / episodes


class Trainer:
    def __init__(self, config: ExperimentConfig, expert=None):
        self.config = config
        self.streams = SeedStreams.from_seed(config.training.seed)
        self.model = build_model(config, self.streams.init)
        alg = config.algorithm
        self.replay = ReplayBuffer(config.training.replay_capacity, config.env.obs_dim, config.env.n_agents,
                                   alg.hidden_dim if alg.trunk_kind == "lstm" else None,
                                   rng=self.streams.replay)
        self.expert = expert if expert is not None else make_expert(config)
        self.env_step = 0
        self.episode = 0
        self.expert_queries = 0
        self.fallbacks = 0
        self.source_counts: Counter = Counter()
        self._begin_episode()

    def _begin_episode(self) -> None:
        self.state, self.obs = world.reset(self.config.env, self.episode)
        self.hidden = self.model.agent.initial_hidden()

    @property
    def epsilon(self) -> float:
        return self.config.algorithm.epsilon_schedule.value(self.env_step)

    def collect_step(self) -> tuple[Transition, ActionChoice, world.StepResult]:
        choice = self.model.select_actions(self.obs, self.hidden, self.epsilon, self.streams.explore,
                                           gate=True, expert=self.expert)
        res = world.step(self.config.env, self.state, choice.actions)
        t = Transition(self.obs, choice.actions, res.reward, res.next_observation,
                       res.terminated, res.truncated, self.hidden, choice.hidden, choice.source)
        self.replay.add(t)
        self.expert_queries += int(choice.expert_queried)
        self.fallbacks += int(choice.source == "fallback")
        self.source_counts[choice.source] += 1
        self.env_step += 1
        if res.truncated or res.terminated:
            self.episode += 1
            self._begin_episode()
        else:
            self.state, self.obs, self.hidden = res.state, res.next_observation, choice.hidden
        return t, choice, res

    def evaluate(self, episodes: int | None = None) -> EvalResult:
        return evaluate(self.model, self.config.env, episodes or self.config.training.eval_episodes)

    def run(self, exp_dir: Path) -> TrainResult:
        exp_dir = Path(exp_dir)
        exp_dir.mkdir(parents=True, exist_ok=True)
        tcfg, alg = self.config.training, self.config.algorithm
        train_log = CsvLog(exp_dir / "train.csv", TRAIN_COLUMNS)
        eval_log = CsvLog(exp_dir / "eval.csv", EVAL_COLUMNS)
        timing = CsvLog(exp_dir / "timing.csv", ["step", "wall_clock"])
        evals: list[tuple[int, EvalResult]] = []
        best_path, best_return = None, -math.inf
        try:
            for _ in range(tcfg.total_steps):
                epsilon = self.epsilon
                loss = None
                try:
                    t, choice, _ = self.collect_step()
                    if len(self.replay) >= alg.batch_size:
                        loss = self.model.update(self.replay)["loss"]
                except NonFiniteError as exc:
                    self._dump_diagnostics(exp_dir, str(exc))
                    raise TrainingDiverged(f"non-finite values at step {self.env_step}: {exc}") from exc
                train_log.write(step=self.env_step, episode=self.episode, source=choice.source,
                                reward=float(t.reward), loss=loss, ensemble_std=choice.std,
                                expert_queries=self.expert_queries, fallbacks=self.fallbacks,
                                epsilon=float(epsilon))
                if self.env_step % tcfg.eval_interval == 0 or self.env_step == tcfg.total_steps:
                    result = self.evaluate()
                    evals.append((self.env_step, result))
                    eval_log.write(step=self.env_step, mean_return=result.mean_return,
                                   std_return=result.std_return, collision_rate=result.collision_rate)
                    timing.write(step=self.env_step, wall_clock=datetime.now().isoformat())
                    log.info("step %d eval return %.3f", self.env_step, result.mean_return)
                    if result.mean_return > best_return:
                        best_return = result.mean_return
                        best_path = save_checkpoint(exp_dir / "checkpoint_best.npz", self.model, self.config)
        finally:
            train_log.close()
            eval_log.close()
            timing.close()
        final = save_checkpoint(exp_dir / "checkpoint_final.npz", self.model, self.config)
        summary = {"env_steps": self.env_step, "episodes": self.episode,
                   "expert_queries": self.expert_queries, "fallbacks": self.fallbacks,
                   "source_counts": dict(sorted(self.source_counts.items())),
                   "final_mean_return": evals[-1][1].mean_return}
        if isinstance(self.expert, LlmPlanner):
            summary["llm_failures"] = dict(sorted(self.expert.failures.items()))
            summary["llm_fallbacks"] = self.expert.n_fallbacks
        (exp_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        return TrainResult(exp_dir, final, best_path, exp_dir / "train.csv", exp_dir / "eval.csv",
                           evals, self.expert_queries, self.fallbacks, dict(self.source_counts))

    def _dump_diagnostics(self, exp_dir: Path, reason: str) -> None:
        diag = {"reason": reason, "env_step": self.env_step, "episode": self.episode,
                "update_count": self.model.update_count,
                "non_finite_params": [n for prefix, m in self.model._modules()
                                      for n, p in m.named_parameters(prefix + ".")
                                      if not np.isfinite(p.value).all()]}
        (exp_dir / "diagnostics.json").write_text(json.dumps(diag, indent=2))


# ---- checkpoints ------------------------------------------------------------

def save_checkpoint(path, model: QmixModel, config: ExperimentConfig) -> Path:
    return save_arrays(path, model.state_arrays(), {"config": dump_config(config), "version": __version__})


def load_checkpoint(path) -> tuple[QmixModel, ExperimentConfig]:
    arrays, meta = load_arrays(path)
    config = config_from_yaml(meta["config"])
    model = build_model(config, np.random.default_rng(0))
    model.load_state_arrays(arrays)
    return model, config


# ---- experiment bookkeeping -------------------------------------------------

def _git_commit() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def make_experiment_dir(root, name: str, seed: int) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now().strftime("%Y%m%dT%H%M%S_%f")
    base = root / f"{name}_{seed}_{stamp}"
    path, k = base, 0
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            k += 1
            path = base.with_name(f"{base.name}-{k}")


def write_metadata(exp_dir, config: ExperimentConfig) -> Path:
    meta = {"experiment_name": config.experiment_name, "seed": config.training.seed,
            "code_version": __version__, "git_commit": _git_commit(),
            "created": datetime.now().isoformat(), "config": to_dict(config)}
    path = Path(exp_dir) / "metadata.yaml"
    path.write_text(yaml.safe_dump(meta, sort_keys=False), encoding="utf-8")
    return path


def read_metadata_config(exp_dir) -> ExperimentConfig:
    from .config import from_dict
    meta = yaml.safe_load((Path(exp_dir) / "metadata.yaml").read_text(encoding="utf-8"))
    return from_dict(ExperimentConfig, meta["config"])


def register_experiment(exp_dir, name: str) -> Path:
    """Append ``name, timestamp, dir`` to experiments.txt next to ``exp_dir``."""
    exp_dir = Path(exp_dir)
    registry = exp_dir.parent / "experiments.txt"
    with open(registry, "a", encoding="utf-8") as fh:
        fh.write(f"{name}, {datetime.now().isoformat()}, {exp_dir}\n")
    return registry


def train(config: ExperimentConfig, out_root="runs", expert=None) -> TrainResult:
    exp_dir = make_experiment_dir(out_root, config.experiment_name, config.training.seed)
    write_metadata(exp_dir, config)
    register_experiment(exp_dir, config.experiment_name)
    t0 = time.perf_counter()
    trainer = Trainer(config, expert)
    try:
        result = trainer.run(exp_dir)
    finally:
        if isinstance(trainer.expert, LlmPlanner) and expert is None:
            trainer.expert.close()
    log.info("training finished in %.1fs -> %s", time.perf_counter() - t0, exp_dir)
    return result
