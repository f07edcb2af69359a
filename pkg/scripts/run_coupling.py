"""Coupled vs decoupled template recovery over a coupling x density grid.

Usage: python scripts/run_coupling.py [--n 34] [--L 50] [--replications 3]
       [--couplings 0,5] [--densities 0.15] [--chains 2] [--warmup 500] [--samples 500]
"""

import argparse

from balm.sampler import SamplerConfig
from balm.simgen import SimConfig, format_table, run_coupling_experiment


def floats(text):
    return tuple(float(v) for v in text.split(","))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=34)
    parser.add_argument("--L", type=int, default=50)
    parser.add_argument("--sigma", type=float, default=1.0)
    parser.add_argument("--replications", type=int, default=3)
    parser.add_argument("--couplings", type=floats, default=(0.0, 5.0))
    parser.add_argument("--densities", type=floats, default=(0.15,))
    parser.add_argument("--chains", type=int, default=2)
    parser.add_argument("--warmup", type=int, default=500)
    parser.add_argument("--samples", type=int, default=500)
    parser.add_argument("--seed", type=int, default=6)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()

    base = SimConfig(n=args.n, L=args.L, M=2, K=2, sigma=args.sigma, seed=args.seed)
    sampler = SamplerConfig(chains=args.chains, warmup_iters=args.warmup,
                            sampling_iters=args.samples, seed=args.seed)
    rows = run_coupling_experiment(base, sampler, replications=args.replications,
                                   couplings=args.couplings, densities=args.densities,
                                   threads=args.threads)
    print(format_table(rows), end="")


if __name__ == "__main__":
    main()
