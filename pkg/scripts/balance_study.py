"""Compare per-expert load spread with and without the load-balancing loss."""

import argparse

from unicl.experiments import balance_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.02])
    args = ap.parse_args()
    for lam in args.lambdas:
        tail, spreads = balance_run(lam, seed=args.seed, steps=args.steps)
        print(f"lambda_aux={lam:g} spread first100={sum(spreads[:100]) / 100:.4f} last100={tail:.4f}")


if __name__ == "__main__":
    main()
