"""Train the baseline and one vMF setting on a held-out target and compare Dice.

A desk-sized run: 2000 iterations per model takes a few minutes on one core.

    python demos/ordering_run.py --target D --setting vmfnet --iterations 2000
"""

import argparse
import logging

from vmfcomp.experiments import OrderingRun, benchmark


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--target", default="D", choices=list("ABCD"))
    parser.add_argument("--setting", default="vmfnet",
                        choices=["vmfnet", "vmfpseudo", "vmfweak", "unsup", "weak"])
    parser.add_argument("--iterations", type=int, default=2000)
    parser.add_argument("--labels", type=float, default=0.05)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    run = OrderingRun(benchmark(args.seed), args.target, args.seed, label_fraction=args.labels,
                      iterations=args.iterations)
    n_lab = len(run.split.labeled_samples(run.domains))
    n_all = len(run.split.training_samples(run.domains))
    print(f"target {args.target}: {n_lab} labeled of {n_all} source samples")
    scores = {}
    for setting in ("baseline", args.setting):
        if setting in ("unsup", "weak"):
            print(f"{setting} has no segmentation head; skipping Dice")
            continue
        scores[setting] = run.target_dice(setting)
        print(f"{setting:>10}: target Dice {scores[setting]:.2f}")
    if len(scores) == 2:
        print(f"margin over baseline {scores[args.setting] - scores['baseline']:+.2f}")


if __name__ == "__main__":
    main()
