"""Reference desk-scale run: data, tokenizers, training and evaluation, cached by config and source."""

import argparse
import logging
from pathlib import Path

from unicl.experiments import cached_run, reference_config

CACHE = Path(__file__).resolve().parent.parent / ".cache" / "reference"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", type=Path, default=CACHE)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    summary = cached_run(reference_config(seed=args.seed), args.cache)
    print(f"run dir {summary.out}")
    print(f"train {summary.train_seconds:.0f}s eval {summary.eval_seconds:.0f}s")
    for r in summary.report:
        print(f"{r['task']:<13} k={r['k']} {r['metric']:<9} {r['value']:.4f}  malformed {r['malformed_rate']:.3f}  n={r['n_items']}")


if __name__ == "__main__":
    main()
