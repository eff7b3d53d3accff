#!/usr/bin/env python3
"""Training-step throughput benchmark on a synthetic dataset."""

import argparse
import sys
import tempfile
import time

from xdmatch.losses import LossConfig
from xdmatch.pipeline import load_graphs
from xdmatch.synthdata import SynthConfig, generate
from xdmatch.training import TrainerConfig, train


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", help="existing dataset directory (default: generate)")
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--batch-size", type=int, default=1024)
    ap.add_argument("--dim-in", type=int, default=12)
    ap.add_argument("--dim-out", type=int, default=8)
    ap.add_argument("--fanouts", default="4,2")
    ap.add_argument("--negatives", type=int, default=3)
    ap.add_argument("--dtype", choices=["float64", "float32"], default="float32")
    args = ap.parse_args()

    data = args.data
    if data is None:
        data = tempfile.mkdtemp(prefix="xdmatch-bench-")
        generate(
            SynthConfig(
                n_user_groups=400, n_items=800, n_tags=40,
                n_categories=8, n_medias=10, n_words=120, seed=0,
            ),
            data,
        )
        print(f"generated benchmark dataset in {data}")
    source_net, target_net, aligned = load_graphs(data)
    f1, f2 = (int(x) for x in args.fanouts.split(","))
    cfg = TrainerConfig(
        epochs=1,
        steps_per_epoch=args.steps,
        batch_size=args.batch_size,
        fanouts=(f1, f2),
        dim_in=args.dim_in,
        dim_out=args.dim_out,
        learning_rate=0.05,
        param_dtype=args.dtype,
        loss=LossConfig(negatives_per_anchor=args.negatives, batch_size=args.batch_size),
    )
    t0 = time.time()
    train(source_net, target_net, aligned, cfg)
    dt = time.time() - t0
    print(
        f"{args.steps} steps in {dt:.2f}s  ->  {dt / args.steps * 1000:.0f} ms/step  "
        f"({args.batch_size / (dt / args.steps):.0f} anchor visits/s/family)"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
