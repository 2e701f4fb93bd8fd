#!/usr/bin/env python3
"""Grid-sweep the fast-adaptation rate and inner step count on a short
sinusoid MAML run; scores are post-adaptation query MSE."""

import argparse
import json

from metaforge.registry import parse_config, serialize_config
from metaforge.runner import run
from metaforge.strategies import SearchSpace, param_search


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    base = parse_config({
        "slots": {"task_construction": "regression", "meta_learner": "optimization",
                  "base_learner": "mse", "backbone": "mlp",
                  "optimization_strategy": "unrolled", "training_method": "serial"},
        "hyper": {"k_shot": 10, "lr_beta": 0.001, "iterations": args.iterations,
                  "meta_batch": 4, "eval_tasks": 30, "eval_steps": 10,
                  "widths": [32, 32]},
        "seed": args.seed})

    def runner(params):
        doc = json.loads(serialize_config(base))
        doc["hyper"].update(params)
        return run(parse_config(doc)).eval["post"]

    space = SearchSpace({"lr_alpha": [0.002, 0.01, 0.05],
                         "inner_steps": [1, 2]})
    for entry in param_search(space, runner):
        if entry["error"]:
            print(f"{entry['params']}  FAILED: {entry['error']}")
        else:
            print(f"{entry['params']}  post-adaptation mse {entry['score']:.4f}")


if __name__ == "__main__":
    main()
