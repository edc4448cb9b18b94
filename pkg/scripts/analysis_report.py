"""BN-statistics PCC, realism, straight-through alignment and modified-token fractions for one system.

    python scripts/analysis_report.py --classifier std.ckpt --discretizer disc.ckpt [--aligned dat.ckpt]
"""
import argparse

import numpy as np

from dat.analysis import bn_pcc_histogram, realism_report, straight_through_alignment
from dat.checkpoint import load_checkpoint
from dat.classifier import Classifier
from dat.data import synthetic_shapes
from dat.discretizer import Discretizer
from dat.trainer import PerturbationSpec, discrete_adversarial_example


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--classifier", required=True, help="standard-trained classifier")
    p.add_argument("--discretizer", required=True)
    p.add_argument("--aligned", help="classifier for the alignment check (default: --classifier)")
    p.add_argument("--batches", type=int, default=200)
    p.add_argument("--epsilon", type=float, default=4 / 255)
    args = p.parse_args()

    test = synthetic_shapes(2_000, 0, split="test")
    model = Classifier.from_state(load_checkpoint(args.classifier))
    disc = Discretizer.from_state(load_checkpoint(args.discretizer))

    hist = bn_pcc_histogram(model, disc, test.images, test.labels, n_batches=args.batches, epsilon=args.epsilon)
    for regime, h in hist.items():
        print(f"pcc {regime:<9} mean-stat median {h.mean_median:.5f} var-stat median {h.var_median:.5f} "
              f"peak {h.mean_peak:.3f}")

    rep = realism_report(model, disc, test.images[:100], test.labels[:100], epsilon=args.epsilon)
    print(f"colors clean {np.mean(rep.clean_colors):.1f}; |delta| DAT {rep.dat_color_delta:.1f} "
          f"FGSM {rep.fgsm_color_delta:.1f}")
    print(f"high-frequency share DAT {np.mean(rep.dat_high_share):.3f} FGSM {np.mean(rep.fgsm_high_share):.3f}")

    aligned = Classifier.from_state(load_checkpoint(args.aligned)) if args.aligned else model
    cos = straight_through_alignment(aligned, disc, test.images, test.labels, 50, 64)
    print(f"straight-through vs full-backward cosine {np.mean(cos):.3f}")

    rng = np.random.default_rng(7)
    batches = [rng.choice(len(test), 64, replace=False) for _ in range(20)]
    for alpha in (0.0, 0.1, 0.2, 0.4):
        frac = np.mean([discrete_adversarial_example(model, disc, test.images[s], test.labels[s],
                                                     PerturbationSpec(alpha)).modified_fraction for s in batches])
        print(f"alpha {alpha:<4} modified fraction {frac:.2%}")


if __name__ == "__main__":
    main()
