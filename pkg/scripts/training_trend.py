"""Standard vs pixel-AT vs DAT under one budget: clean and corruption accuracy per seed.

    python scripts/training_trend.py --discretizer runs/discretizer.ckpt --seeds 0,1,2
"""
import argparse
import json
import logging
import time

import numpy as np

from dat.checkpoint import load_checkpoint, save_checkpoint
from dat.data import synthetic_shapes
from dat.discretizer import Discretizer
from dat.evaluation import CORRUPTION_KINDS, EvalOptions, evaluate, full_suite
from dat.trainer import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--discretizer", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--modes", default="standard,pixel_at,dat")
    p.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    p.add_argument("--alpha", type=float, default=TrainConfig().alpha)
    p.add_argument("--save-prefix", default="", help="write <prefix><mode><seed>.ckpt when set")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train_set = synthetic_shapes(10_000, 0, split="train")
    test_set = synthetic_shapes(2_000, 0, split="test")
    disc = Discretizer.from_state(load_checkpoint(args.discretizer))
    modes = args.modes.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    table = {m: [] for m in modes}
    for seed in seeds:
        for mode in modes:
            start = time.perf_counter()
            res = train(TrainConfig(mode=mode, epochs=args.epochs, seed=seed, alpha=args.alpha), train_set, test_set,
                        disc if mode in ("dat", "random_word") else None)
            seconds = time.perf_counter() - start
            if args.save_prefix:
                save_checkpoint(f"{args.save_prefix}{mode}{seed}.ckpt", res.model.state_dict())
            m = evaluate(res.model, test_set, EvalOptions(corruptions=full_suite())).metrics
            table[mode].append((m["clean_acc"], m["corruption_mean_acc"]))
            kinds = {k: round(float(np.mean([m[f"corruption/{k}/{s}"] for s in range(1, 6)])), 3)
                     for k in CORRUPTION_KINDS}
            print(json.dumps({"mode": mode, "seed": seed, "train_s": round(seconds), "clean": m["clean_acc"],
                              "corruption": round(m["corruption_mean_acc"], 4), "by_kind": kinds}), flush=True)
    print(f"{'mode':<10} {'clean':>7} {'corruption':>11}")
    for mode, rows in table.items():
        clean, corr = 100 * np.mean(rows, axis=0)
        print(f"{mode:<10} {clean:7.2f} {corr:11.2f}")


if __name__ == "__main__":
    main()
