"""Train a short vmfweak model, render its activation tiles and report heart channels.

    python demos/inspect_channels.py --out /tmp/channels --iterations 500
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from vmfcomp.eval import channel_match
from vmfcomp.experiments import OrderingRun, benchmark
from vmfcomp.visualize import render_sample


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True)
    parser.add_argument("--target", default="D")
    parser.add_argument("--iterations", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    run = OrderingRun(benchmark(args.seed), args.target, args.seed, iterations=args.iterations)
    model = run.train("vmfweak")
    target = run.split.target_samples(run.domains)
    for i, s in enumerate(target[:3]):
        render_sample(model, s, out / f"{args.target}_{i}.png", title=f"vmfweak sample {i}")

    x = torch.from_numpy(np.stack([s.image for s in target])[:, None])
    with torch.no_grad():
        acts = model.activations(x).double().numpy()
    matrix, assignment, factors = channel_match(acts, [s.factor_masks for s in target])
    for name, j in assignment.items():
        print(f"{name:<10} best channel {j:>2}  Dice {matrix[j, factors.index(name)]:.2f}")
    print(f"figures written to {out}")


if __name__ == "__main__":
    main()
