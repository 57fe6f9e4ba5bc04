"""Paired comparison of attention QMIX with and without the gated A* expert.

For every seed both presets are trained; the target is the no-expert run's
final mean return, and we report the first evaluation step at which each
run reaches it.  Also prints the learning margin over the random policy.

    python scripts/expert_benefit.py --seeds 0 1 2 3 4
"""
import argparse
import csv
import json
import math
from pathlib import Path

from expert_marl.analysis import plot_curves
from expert_marl.config import load_config
from expert_marl.trainer import random_policy_return, train


def first_reach(eval_csv, target):
    with open(eval_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            if float(row["mean_return"]) >= target:
                return int(row["step"])
    return math.inf


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--plain", default="qmix_attention.yaml")
    p.add_argument("--expert", default="qmix_attention_astar.yaml")
    p.add_argument("--out", default="runs/expert_benefit")
    args = p.parse_args()

    out = Path(args.out)
    baseline = random_policy_return(load_config(args.plain).env, episodes=1000)
    print(f"random policy: {baseline:.2f}; 20% margin bar: {0.8 * baseline:.2f}")
    rows, wins = [], 0
    for seed in args.seeds:
        plain = train(load_config(args.plain).with_seed(seed), out)
        expert = train(load_config(args.expert).with_seed(seed), out)
        target = plain.final_eval.mean_return
        t_plain, t_expert = first_reach(plain.eval_csv, target), first_reach(expert.eval_csv, target)
        wins += t_expert < t_plain
        rows.append({"seed": seed, "plain_final": target, "expert_final": expert.final_eval.mean_return,
                     "plain_first_reach": t_plain, "expert_first_reach": t_expert,
                     "expert_queries": expert.expert_queries})
        print(json.dumps(rows[-1]))
        plot_curves([plain.eval_csv, expert.eval_csv], out / f"benefit_seed{seed}.png",
                    ["no expert", "A* expert"])
    print(f"expert reached the target sooner on {wins}/{len(args.seeds)} seeds")
    (out / "expert_benefit.json").write_text(json.dumps({"random_baseline": baseline, "runs": rows,
                                                         "wins": wins}, indent=2, default=str) + "\n")


if __name__ == "__main__":
    main()
