#!/usr/bin/env python3
"""Finite-difference audit of every loss family's analytic gradients.

Builds randomized two-domain toy graphs over many seeds and reports the
max relative error per loss component, including a saturated-sigmoid
regime.
"""

import argparse
import sys
import time

sys.path.insert(0, "tests")  # reuse the toy-graph builders from the suite

import numpy as np  # noqa: E402

from conftest import toy_graphs, toy_trainer_config  # noqa: E402
from xdmatch.losses import LossConfig  # noqa: E402
from xdmatch.training import BatchPlanner, Model, gradient_check  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--max-entries", type=int, default=40)
    ap.add_argument("--layer-init-scale", type=float, default=1.0)
    args = ap.parse_args()

    t0 = time.time()
    worst: dict[str, float] = {}
    for seed in range(args.seeds):
        s, t, aligned = toy_graphs(seed)
        cfg = toy_trainer_config(
            seed=seed,
            layer_init_scale=args.layer_init_scale,
            loss=LossConfig(negatives_per_anchor=3, batch_size=8),
        )
        model = Model.init(s, t, cfg)
        planner = BatchPlanner(s, t, aligned, cfg)
        report = gradient_check(
            model, planner, cfg.loss, seed=seed, max_entries=args.max_entries
        )
        for key, rel in report.items():
            worst[key] = max(worst.get(key, 0.0), rel)
    for key in sorted(worst):
        print(f"{key:12s} max rel err {worst[key]:.3e}")
    print(f"{args.seeds} seeds in {time.time() - t0:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
