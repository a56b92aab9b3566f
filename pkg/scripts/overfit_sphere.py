"""Fit the default network to one synthetic ball volume, logging every step.

    python scripts/overfit_sphere.py --steps 200 --log overfit.jsonl
"""
import argparse
import json
import sys

from srmamba.train import overfit_sphere


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--size", type=int, nargs=3, default=[32, 32, 16])
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--log", help="JSON-lines loss log (default: stderr)")
    args = ap.parse_args()

    log = open(args.log, "w") if args.log else sys.stderr
    try:
        res = overfit_sphere(steps=args.steps, size=tuple(args.size), lr=args.lr, seed=args.seed, log=log)
    finally:
        if args.log:
            log.close()
    res.pop("weights")
    print(json.dumps(res, indent=1))


if __name__ == "__main__":
    main()
