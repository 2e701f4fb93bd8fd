#!/usr/bin/env python3
"""5-way 1-shot classification on Gaussian blobs: ProtoNet vs MAML, with the
Monte-Carlo Bayes rate of the generating mixture as the ceiling."""

import argparse

from metaforge.registry import parse_config
from metaforge.runner import run
from metaforge.tasks import bayes_accuracy, make_blobs


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--iterations", type=int, default=600)
    args = ap.parse_args()

    _, centroids = make_blobs(8, 20, 4, 10.0, 1.0, seed=args.seed)
    print(f"bayes ceiling: {bayes_accuracy(centroids, 1.0, seed=args.seed):.4f}")

    base = {"task_construction": "classification", "base_learner": "cross_entropy",
            "backbone": "mlp", "training_method": "serial"}
    proto = run(parse_config({
        "slots": {**base, "meta_learner": "metric",
                  "optimization_strategy": "first_order"},
        "hyper": {"n_way": 5, "k_shot": 1, "lr_beta": 0.005,
                  "iterations": args.iterations // 2, "meta_batch": 4,
                  "eval_tasks": 100, "widths": [32], "embed_dim": 16,
                  "num_tasks": 2000},
        "seed": args.seed}))
    maml = run(parse_config({
        "slots": {**base, "meta_learner": "optimization",
                  "optimization_strategy": "unrolled"},
        "hyper": {"n_way": 5, "k_shot": 1, "lr_alpha": 0.05, "lr_beta": 0.002,
                  "inner_steps": 3, "iterations": args.iterations,
                  "meta_batch": 4, "eval_tasks": 100, "eval_steps": 5,
                  "widths": [32], "num_tasks": 2000},
        "seed": args.seed}))

    print(f"protonet query accuracy: pre {proto.eval['pre']:.3f} "
          f"post {proto.eval['post']:.3f}")
    print(f"maml     query accuracy: pre {maml.eval['pre']:.3f} "
          f"post {maml.eval['post']:.3f} (curve "
          + " -> ".join(f"{v:.3f}" for v in maml.eval["curve"]) + ")")


if __name__ == "__main__":
    main()
