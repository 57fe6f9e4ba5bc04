import csv
import dataclasses
import json
import math

import numpy as np
import pytest

from expert_marl import env as world
from expert_marl.config import ExperimentConfig, ExpertConfig, TrainingConfig
from expert_marl.qmix import AlgorithmConfig, EpsilonSchedule
from expert_marl.trainer import (
    EVAL_COLUMNS, TRAIN_COLUMNS, Trainer, TrainingDiverged, evaluate, load_checkpoint, make_experiment_dir,
    random_policy_return, read_metadata_config, register_experiment, train, write_metadata,
)


def small_config(kind="none", steps=300, threshold=0.5, trunk="attention", seed=0, **alg):
    algorithm = AlgorithmConfig(hidden_dim=16, mixer_embed_dim=8, ensemble_hidden_dim=16, trunk_kind=trunk,
                                uncertainty_threshold=threshold,
                                epsilon_schedule=EpsilonSchedule(1.0, 0.05, 200), **alg)
    return ExperimentConfig(experiment_name="t", algorithm=algorithm, expert=ExpertConfig(kind=kind),
                            training=TrainingConfig(total_steps=steps, eval_interval=100, eval_episodes=2,
                                                    replay_capacity=1000)).with_seed(seed)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_no_expert_sources():
    tr = Trainer(small_config("none"))
    sources = {tr.collect_step()[1].source for _ in range(100)}
    assert sources <= {"policy", "epsilon"}


def test_zero_threshold_tags_every_step_expert():
    tr = Trainer(small_config("a-star", threshold=0.0))
    for _ in range(60):
        _, choice, _ = tr.collect_step()
        assert choice.source == "a-star"
    assert tr.expert_queries == 60


def test_transition_matches_env():
    tr = Trainer(small_config())
    state, obs = tr.state, tr.obs
    t, choice, res = tr.collect_step()
    again = world.step(tr.config.env, state, choice.actions)
    assert t.observation is obs
    assert t.reward == res.reward == again.reward
    np.testing.assert_array_equal(t.next_observation, again.next_observation)
    assert len(tr.replay) == 1


def test_episode_boundaries_follow_horizon():
    tr = Trainer(small_config())
    truncs = [tr.collect_step()[2].truncated for _ in range(75)]
    assert [k for k, x in enumerate(truncs) if x] == [24, 49, 74]
    assert tr.episode == 3


def test_evaluation_is_isolated():
    tr = Trainer(small_config())
    for _ in range(50):
        tr.collect_step()
    replay_len = len(tr.replay)
    explore_state = tr.streams.explore.bit_generator.state
    replay_state = tr.streams.replay.bit_generator.state
    res = tr.evaluate(3)
    assert len(tr.replay) == replay_len
    assert tr.streams.explore.bit_generator.state == explore_state
    assert tr.streams.replay.bit_generator.state == replay_state
    assert len(res.returns) == 3
    # every eval episode runs exactly horizon steps: collision_rate = collisions / (3 * 25)
    assert (res.collision_rate * 75) == pytest.approx(round(res.collision_rate * 75))


def test_random_baseline_is_negative_and_reproducible():
    cfg = world.WorldConfig()
    a = random_policy_return(cfg, episodes=50)
    assert a == random_policy_return(cfg, episodes=50) < 0


@pytest.mark.parametrize("trunk", ["attention", "lstm"])
def test_smoke_run_artifacts(tmp_path, trunk):
    cfg = small_config(steps=500, trunk=trunk)
    result = train(cfg, tmp_path)
    d = result.exp_dir
    for name in ("train.csv", "eval.csv", "timing.csv", "checkpoint_final.npz", "checkpoint_best.npz",
                 "summary.json", "metadata.yaml"):
        assert (d / name).exists(), name
    rows = read_rows(d / "train.csv")
    assert list(rows[0]) == TRAIN_COLUMNS and len(rows) == 500
    steps = [int(r["step"]) for r in rows]
    assert steps == sorted(set(steps))
    assert rows[0]["loss"] == "" and rows[-1]["loss"] != ""
    ev = read_rows(d / "eval.csv")
    assert list(ev[0]) == EVAL_COLUMNS and [int(r["step"]) for r in ev] == [100, 200, 300, 400, 500]
    assert (tmp_path / "experiments.txt").read_text().count(str(d)) == 1
    summary = json.loads((d / "summary.json").read_text())
    assert summary["env_steps"] == 500 and summary["episodes"] == 20


def test_checkpoint_round_trip_evaluates_identically(tmp_path):
    cfg = small_config(steps=200)
    result = train(cfg, tmp_path)
    model, loaded_cfg = load_checkpoint(result.checkpoint)
    assert loaded_cfg == cfg
    a = evaluate(model, cfg.env, 2)
    assert a.mean_return == result.final_eval.mean_return


@pytest.mark.parametrize("kind", ["none", "a-star"])
def test_metrics_are_byte_identical(tmp_path, kind):
    cfg = small_config(kind, steps=300)
    r1 = train(cfg, tmp_path / "a")
    r2 = train(cfg, tmp_path / "b")
    assert r1.train_csv.read_bytes() == r2.train_csv.read_bytes()
    assert r1.eval_csv.read_bytes() == r2.eval_csv.read_bytes()


def test_divergence_dumps_diagnostics(tmp_path):
    cfg = small_config(steps=100)
    tr = Trainer(cfg)
    tr.model.mixer.hyper_b2.layers[-1].b.value[...] = math.inf
    with pytest.raises(TrainingDiverged):
        tr.run(tmp_path)
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert "mixer.hyper_b2.1.b" in diag["non_finite_params"]


def test_experiment_dirs_are_unique(tmp_path):
    dirs = {make_experiment_dir(tmp_path, "x", 3) for _ in range(20)}
    assert len(dirs) == 20
    assert all(d.name.startswith("x_3_") for d in dirs)


def test_registry_and_metadata(tmp_path):
    cfg = small_config()
    d = make_experiment_dir(tmp_path, "reg", 0)
    register_experiment(d, "first")
    register_experiment(d, "second")
    lines = (tmp_path / "experiments.txt").read_text().splitlines()
    assert [x.split(", ")[0] for x in lines] == ["first", "second"]
    assert all(x.endswith(str(d)) for x in lines)
    write_metadata(d, cfg)
    assert read_metadata_config(d) == cfg


def test_bad_expert_kind_rejected():
    with pytest.raises(ValueError):
        dataclasses.replace(ExpertConfig(), kind="oracle")
