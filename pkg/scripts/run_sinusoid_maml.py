#!/usr/bin/env python3
"""Meta-train MAML on the sinusoid family and compare post-adaptation error
against an untrained baseline with the same architecture."""

import argparse
import json
from pathlib import Path

from metaforge.registry import parse_config
from metaforge.runner import render_report, run

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "maml_sinusoid.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default=None, help="write the trained-run report here")
    args = ap.parse_args()

    doc = json.loads(CONFIG.read_text())
    doc["seed"] = args.seed
    doc["hyper"]["iterations"] = args.iterations

    trained = run(parse_config(doc), report_path=args.out)
    doc["hyper"]["iterations"] = 0
    baseline = run(parse_config(doc))

    print(render_report(trained.to_json()))
    post, pre = trained.eval["post"], trained.eval["pre"]
    print(f"trained  : pre {pre:.4f} -> post {post:.4f} "
          f"(ratio {post / pre:.3f})")
    print(f"baseline : pre {baseline.eval['pre']:.4f} -> post "
          f"{baseline.eval['post']:.4f}")
    print(f"trained post / baseline post: {post / baseline.eval['post']:.3f}")


if __name__ == "__main__":
    main()
