"""Fit a vMF kernel bank to points drawn around four known directions.

Prints the cosine between each fitted kernel and its nearest true center.

    python demos/clustering_recovery.py --noise 0.15 --seed 0
"""

import argparse

import numpy as np
import torch

from vmfcomp.vmf_core import VMFKernelBank, clustering_loss, fit_kernels


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dim", type=int, default=8)
    parser.add_argument("--kernels", type=int, default=4)
    parser.add_argument("--per-center", type=int, default=100)
    parser.add_argument("--noise", type=float, default=0.15)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    centers = np.linalg.qr(rng.normal(size=(args.dim, args.dim)))[0][: args.kernels]
    pts = np.repeat(centers, args.per_center, axis=0)
    pts = pts + args.noise * rng.normal(size=pts.shape)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    # the bank expects a (B, D, H, W) feature map, so lay the points out as one image
    z = torch.from_numpy(pts.T.reshape(1, args.dim, 1, -1).copy())

    bank = VMFKernelBank(args.kernels, args.dim, seed=args.seed, dtype=torch.float64)
    bank.init_from_features(torch.from_numpy(pts), seed=args.seed)
    print(f"clustering loss after seeding {clustering_loss(bank, z).item():.4f}")
    fit_kernels(bank, z, steps=args.steps)
    print(f"clustering loss after fitting {clustering_loss(bank, z).item():.4f}")

    cos = bank.mus.detach().numpy() @ centers.T
    for j, row in enumerate(cos):
        print(f"kernel {j}: nearest center {row.argmax()}, cosine {row.max():.4f}")
    print(f"max kernel norm error {bank.max_norm_error():.2e}")


if __name__ == "__main__":
    main()
