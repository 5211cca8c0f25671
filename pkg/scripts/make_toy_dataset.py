#!/usr/bin/env python3
"""Generate the synthetic paired shapes dataset used by the desk-scale experiments."""

import argparse

from dsfusion.synthetic import make_shapes_dataset


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root", help="output dataset root")
    parser.add_argument("--n-train", type=int, default=200)
    parser.add_argument("--n-test", type=int, default=10)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    root = make_shapes_dataset(
        args.root, n_train=args.n_train, n_test=args.n_test, size=args.size, seed=args.seed
    )
    print(f"wrote {args.n_train} train / {args.n_test} test pairs under {root}")


if __name__ == "__main__":
    main()
