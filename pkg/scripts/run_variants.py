"""Train the five shipped presets for one or more seeds and plot their curves.

The two LLM presets need a chat-completions endpoint.  Pass --llm-base-url to
use a real one, or --mock-llm to serve A* plans through the local scripted
server (useful for checking the plumbing end to end without a model).

    python scripts/run_variants.py --seeds 0 1 2 --out runs/variants
"""
import argparse
import dataclasses
import json
import re
from pathlib import Path

import numpy as np

from expert_marl.analysis import plot_curves
from expert_marl.config import list_presets, load_config
from expert_marl.experts import AStarExpert, render_actions
from expert_marl.mockserver import ScriptedLlmServer
from expert_marl.trainer import train

_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


def a_star_reply(prompt: str) -> str:
    """Answer a planning prompt with the A* plan for the positions it lists."""
    n = int(re.search(r"There are (\d+) agents", prompt).group(1))
    agents, landmarks = [], None
    for m in re.finditer(r"is at position \[([^\]]*)\], the closest landmarks are at \[([^\]]*)\]", prompt):
        agents += [float(x) for x in _NUMBER.findall(m.group(1))]
        landmarks = [float(x) for x in _NUMBER.findall(m.group(2))]
    return render_actions(AStarExpert(n).plan(np.array(agents + landmarks)).actions)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--steps", type=int, default=None, help="override training.total_steps")
    p.add_argument("--presets", nargs="+", default=list_presets())
    p.add_argument("--out", default="runs/variants")
    p.add_argument("--llm-base-url", default=None)
    p.add_argument("--mock-llm", action="store_true")
    args = p.parse_args()

    server = ScriptedLlmServer(a_star_reply).start() if args.mock_llm else None
    out = Path(args.out)
    summary = {}
    try:
        for preset in args.presets:
            for seed in args.seeds:
                cfg = load_config(preset).with_seed(seed)
                if args.steps:
                    cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, total_steps=args.steps))
                if cfg.expert.kind == "llm":
                    url = server.base_url if server else args.llm_base_url
                    if url is None:
                        print(f"skip {preset}: no --llm-base-url or --mock-llm")
                        continue
                    llm = dataclasses.replace(cfg.expert.llm, base_url=url)
                    cfg = dataclasses.replace(cfg, expert=dataclasses.replace(cfg.expert, llm=llm))
                result = train(cfg, out)
                summary[f"{preset}:{seed}"] = {"exp_dir": str(result.exp_dir),
                                               "final_mean_return": result.final_eval.mean_return,
                                               "expert_queries": result.expert_queries,
                                               "fallbacks": result.fallbacks}
                print(preset, seed, f"{result.final_eval.mean_return:.2f}", result.exp_dir)
    finally:
        if server:
            server.stop()
    (out / "variants_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for seed in args.seeds:
        runs = [(k.split(":")[0].removesuffix(".yaml"), Path(v["exp_dir"]) / "eval.csv")
                for k, v in summary.items() if k.endswith(f":{seed}")]
        if runs:
            plot_curves([r[1] for r in runs], out / f"variants_seed{seed}.png", [r[0] for r in runs])


if __name__ == "__main__":
    main()
