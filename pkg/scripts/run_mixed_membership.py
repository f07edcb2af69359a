"""Recovery metrics across Dirichlet concentrations of the layer weights.

Usage: python scripts/run_mixed_membership.py [--alphas 0.3,1,3] [--replications 2]
"""

import argparse

from balm.sampler import SamplerConfig
from balm.simgen import SimConfig, format_table, run_mixed_membership_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=30)
    parser.add_argument("--L", type=int, default=60)
    parser.add_argument("--M", type=int, default=3)
    parser.add_argument("--alphas", default="0.3,3.0")
    parser.add_argument("--replications", type=int, default=2)
    parser.add_argument("--chains", type=int, default=2)
    parser.add_argument("--warmup", type=int, default=500)
    parser.add_argument("--samples", type=int, default=500)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()

    base = SimConfig(n=args.n, L=args.L, M=args.M, K=2, a0=-1.0, a1=2.0, sigma=0.5, seed=args.seed)
    sampler = SamplerConfig(chains=args.chains, warmup_iters=args.warmup,
                            sampling_iters=args.samples, seed=args.seed)
    alphas = [float(a) for a in args.alphas.split(",")]
    rows = run_mixed_membership_experiment(base, sampler, alphas, replications=args.replications,
                                           threads=args.threads)
    print(format_table(rows), end="")


if __name__ == "__main__":
    main()
