"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .analysis import EndpointUnreachable, bench_expert, plot_curves
from .config import ExperimentConfig, load_config, resolve_config_path
from .env import ConfigError
from .experts import LlmPlanner
from .finetune import generate_dataset, validate_dataset
from .trainer import EVAL_SEED_BASE, evaluate, load_checkpoint, make_expert, train

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="expert-marl", description="QMIX with uncertainty-gated expert exploration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("--config", required=True, help="YAML config file or preset name")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--steps", type=int, default=None, help="override training.total_steps")
    t.add_argument("--out", default="runs", help="root directory for experiment folders (default: runs)")

    e = sub.add_parser("eval", help="evaluate a checkpoint with the greedy policy")
    e.add_argument("--checkpoint", required=True, help="checkpoint .npz written by train")
    e.add_argument("--episodes", type=int, default=10, help="number of evaluation episodes (default: 10)")
    e.add_argument("--seed", type=int, default=0, help="evaluation seed (default: 0)")
    e.add_argument("--out", default=None, help="JSON result path (default: next to the checkpoint)")

    g = sub.add_parser("gen-finetune", help="write an A*-labelled prompt/completion dataset")
    g.add_argument("--config", default="qmix_attention_llm_finetuned.yaml", help="YAML config file or preset name")
    g.add_argument("--n", type=int, default=None, help="number of records (default: config fine_tune_samples)")
    g.add_argument("--out", default="finetune.jsonl", help="output JSONL path (default: finetune.jsonl)")
    g.add_argument("--seed", type=int, default=None, help="override the world seed")

    b = sub.add_parser("bench-expert", help="score an expert planner on random states")
    b.add_argument("--config", default="qmix_attention_astar.yaml", help="YAML config file or preset name")
    b.add_argument("--expert", choices=["a-star", "llm"], default="a-star", help="planner to score")
    b.add_argument("--n-states", type=int, default=100, help="number of random states (default: 100)")
    b.add_argument("--rollout", type=int, default=10, help="re-planning rollout length (default: 10)")
    b.add_argument("--allow-fallback", action="store_true", help="score the fallback when the endpoint is down")
    b.add_argument("--out", default=None, help="optional JSON report path")

    pl = sub.add_parser("plot", help="plot evaluation curves from eval.csv files")
    pl.add_argument("metrics", nargs="+", help="eval.csv files (one series each)")
    pl.add_argument("--out", required=True, help="output image path (a _points.csv sidecar is written too)")
    pl.add_argument("--labels", nargs="+", default=None, help="series labels")
    return p


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _config(path: str) -> ExperimentConfig:
    try:
        resolve_config_path(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    return load_config(path)


def _positive(value: int | None, name: str) -> None:
    if value is not None and value < 1:
        raise UsageError(f"{name} must be >= 1")


def cmd_train(args) -> dict:
    _positive(args.steps, "--steps")
    config = _config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.steps is not None:
        config = dataclasses.replace(config, training=dataclasses.replace(config.training, total_steps=args.steps))
    result = train(config, args.out)
    return {"exp_dir": str(result.exp_dir), "checkpoint": str(result.checkpoint),
            "final_mean_return": result.final_eval.mean_return,
            "expert_queries": result.expert_queries, "fallbacks": result.fallbacks}


def cmd_eval(args) -> dict:
    _positive(args.episodes, "--episodes")
    ckpt = _existing(args.checkpoint, "checkpoint")
    model, config = load_checkpoint(ckpt)
    res = evaluate(model, config.env, args.episodes, seed_base=EVAL_SEED_BASE + 100_000 * args.seed)
    report = {"checkpoint": str(ckpt), "episodes": args.episodes, "seed": args.seed,
              "mean_return": res.mean_return, "std_return": res.std_return,
              "collision_rate": res.collision_rate}
    out = Path(args.out) if args.out else ckpt.with_name(f"{ckpt.stem}_eval_seed{args.seed}.json")
    out.write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_gen_finetune(args) -> dict:
    _positive(args.n, "--n")
    config = _config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    n = args.n if args.n is not None else config.fine_tune_samples
    summary = generate_dataset(config, n, args.out)
    report = validate_dataset(summary.path, config.env.n_agents)
    return {"path": str(summary.path), "records": summary.n_records, "episodes": summary.n_episodes,
            "violations": len(report.violations)}


def cmd_bench_expert(args) -> dict:
    _positive(args.n_states, "--n-states")
    _positive(args.rollout, "--rollout")
    config = _config(args.config)
    config = dataclasses.replace(config, expert=dataclasses.replace(config.expert, kind=args.expert))
    expert = make_expert(config)
    try:
        report = bench_expert(config, expert, args.n_states, args.rollout, args.allow_fallback)
    finally:
        if isinstance(expert, LlmPlanner):
            expert.close()
    report["expert"] = args.expert
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_plot(args) -> dict:
    paths = [_existing(p, "metrics file") for p in args.metrics]
    image, sidecar = plot_curves(paths, args.out, args.labels)
    return {"image": str(image), "points": str(sidecar)}


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gen-finetune": cmd_gen_finetune,
            "bench-expert": cmd_bench_expert, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"expert-marl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EndpointUnreachable as exc:
        print(f"expert-marl {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # one-line cause for any runtime failure
        print(f"expert-marl {args.command}: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
