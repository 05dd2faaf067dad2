"""Run the short pipeline twice and compare every output byte for byte."""

import argparse
import tempfile
from pathlib import Path

from unicl.experiments import determinism_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        a = determinism_run(Path(tmp) / "a", args.seed)
        b = determinism_run(Path(tmp) / "b", args.seed)
    for name in a:
        print(f"{name:<16} {'identical' if a[name] == b.get(name) else 'DIFFERENT'}")
    raise SystemExit(0 if a == b else 1)


if __name__ == "__main__":
    main()
