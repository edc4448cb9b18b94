"""Train the discretizer on the synthetic set and report held-out MSE and codebook usage.

    python scripts/train_discretizer.py --epochs 6 --out runs/discretizer.ckpt
"""
import argparse
import logging
import time

from dat.checkpoint import save_checkpoint
from dat.data import synthetic_shapes
from dat.discretizer import DiscretizerConfig, train_discretizer


def main():
    defaults = DiscretizerConfig()
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--downsample", type=int, default=defaults.downsample)
    p.add_argument("--num-entries", type=int, default=defaults.num_entries)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--n-train", type=int, default=10_000)
    p.add_argument("--n-test", type=int, default=2_000)
    p.add_argument("--out", default="discretizer.ckpt")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train = synthetic_shapes(args.n_train, 0, split="train")
    test = synthetic_shapes(args.n_test, 0, split="test")
    cfg = DiscretizerConfig(downsample=args.downsample, num_entries=args.num_entries, epochs=args.epochs,
                            seed=args.seed)
    log = []
    start = time.perf_counter()
    model = train_discretizer(train.images, cfg, test.images, log_metrics=lambda step, m: log.append(m))
    minutes = (time.perf_counter() - start) / 60
    save_checkpoint(args.out, model.state_dict())
    first, last = log[0]["heldout_mse"], log[-1]["heldout_mse"]
    print(f"held-out MSE {first:.5f} -> {last:.5f} ({last / first:.1%}), usage {log[-1]['heldout_usage']:.0%}, "
          f"{minutes:.1f} min, saved {args.out}")


if __name__ == "__main__":
    main()
