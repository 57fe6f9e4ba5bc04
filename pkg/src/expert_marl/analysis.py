"""Expert benchmarking and training-curve plots."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import env as world
from .config import ExperimentConfig
from .experts import LlmPlanner

BENCH_SEED_BASE = 3_000_000_000
SMOOTHING_WINDOW = 5


class EndpointUnreachable(RuntimeError):
    pass


def _rollout_return(config: world.WorldConfig, state, expert, steps: int) -> float:
    total = 0.0
    for _ in range(steps):
        plan = expert.plan(world.joint_observation(state))
        res = world.step(config, state, plan.actions)
        total += res.reward
        state = res.state
        if res.truncated:
            break
    return total


def bench_expert(config: ExperimentConfig, expert, n_states: int = 100, rollout_steps: int = 10,
                 allow_fallback: bool = False) -> dict:
    """Score an expert on random world states.

    one-step improvement = reward(plan) - reward(all agents stay);
    rollout return = reward summed over ``rollout_steps`` of re-planning.
    """
    wc = config.env
    improvements, returns, latencies = [], [], []
    invalid = fallbacks = 0
    for k in range(n_states):
        state, obs = world.reset(wc, BENCH_SEED_BASE + k)
        before = dict(expert.failures) if isinstance(expert, LlmPlanner) else {}
        t0 = time.perf_counter()
        plan = expert.plan(obs)
        latencies.append(time.perf_counter() - t0)
        if plan.source == "fallback":
            fallbacks += 1
            after = expert.failures if isinstance(expert, LlmPlanner) else {}
            transport = sum(after.get(kind, 0) - before.get(kind, 0) for kind in ("transport", "timeout"))
            if transport and plan.raw_response is None and not allow_fallback:
                raise EndpointUnreachable("expert endpoint unreachable; pass --allow-fallback to score the fallback")
            if plan.raw_response is not None:
                invalid += 1
        if not plan.valid:
            invalid += 1
        stay = world.step(wc, state, [0] * wc.n_agents).reward
        improvements.append(world.step(wc, state, plan.actions).reward - stay)
        returns.append(_rollout_return(wc, state, expert, rollout_steps))
    lat_ms = np.array(latencies) * 1000.0
    return {
        "n_states": n_states,
        "rollout_steps": rollout_steps,
        "mean_one_step_improvement": float(np.mean(improvements)),
        "mean_rollout_return": float(np.mean(returns)),
        "invalid_rate": invalid / n_states,
        "fallback_rate": fallbacks / n_states,
        "latency_ms": {"p50": float(np.percentile(lat_ms, 50)), "p95": float(np.percentile(lat_ms, 95)),
                       "mean": float(lat_ms.mean())},
    }


# ---- plots ------------------------------------------------------------------

@dataclass
class Series:
    label: str
    steps: np.ndarray
    raw: np.ndarray
    smoothed: np.ndarray


def trailing_mean(values, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Mean of the last ``window`` points (fewer at the start)."""
    values = np.asarray(values, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def read_eval_csv(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"step", "mean_return"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns 'step' and 'mean_return', got {reader.fieldnames}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return (np.array([int(r["step"]) for r in rows]),
            np.array([float(r["mean_return"]) for r in rows]))


def default_label(path) -> str:
    path = Path(path)
    return path.parent.name if path.name == "eval.csv" else path.stem


def plot_curves(csv_paths, out_image, labels=None, window: int = SMOOTHING_WINDOW) -> tuple[Path, Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_paths = [Path(p) for p in csv_paths]
    if not csv_paths:
        raise ValueError("no metrics files given")
    labels = list(labels) if labels else [default_label(p) for p in csv_paths]
    if len(labels) != len(csv_paths):
        raise ValueError("need one label per metrics file")
    series = []
    for path, label in zip(csv_paths, labels):
        steps, raw = read_eval_csv(path)
        series.append(Series(label, steps, raw, trailing_mean(raw, window)))

    out_image = Path(out_image)
    out_image.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for s in series:
        line, = ax.plot(s.steps, s.smoothed, label=s.label)
        ax.plot(s.steps, s.raw, color=line.get_color(), alpha=0.25, linewidth=0.8)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean evaluation return")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_image, dpi=120)
    plt.close(fig)

    sidecar = out_image.with_name(out_image.stem + "_points.csv")
    with open(sidecar, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "step", "mean_return", "smoothed"])
        for s in series:
            for st, r, sm in zip(s.steps, s.raw, s.smoothed):
                w.writerow([s.label, int(st), repr(float(r)), repr(float(sm))])
    return out_image, sidecar
