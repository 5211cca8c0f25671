#!/usr/bin/env python3
"""Desk-scale end-to-end experiment on the synthetic shapes dataset.

Generates data, runs both pilot segmentation experiments, selects the
significant features, trains the joint fusion model, then fuses and scores the
test split and probes the feature spectra. Everything lands under --workdir.
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path


def run(args):
    print("+", " ".join(str(a) for a in args))
    subprocess.run([sys.executable, "-m", "dsfusion.cli", *map(str, args)], check=True)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="toy_experiment")
    parser.add_argument("--n-train", type=int, default=200)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--pilot-epochs", type=int, default=20)
    parser.add_argument("--train-steps", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    wd = Path(args.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    data_root = wd / "data"

    from dsfusion.synthetic import make_shapes_dataset

    make_shapes_dataset(data_root, n_train=args.n_train, n_test=10, size=args.size,
                        seed=args.seed)

    pilot_cfg = {
        "data_root": str(data_root),
        "num_classes": 2,
        "epochs": args.pilot_epochs,
        "batch_size": 20,
        "patch_size": args.size,
        "stride": args.size,
        "seed": args.seed,
    }
    (wd / "pilot.json").write_text(json.dumps(pilot_cfg, indent=2))
    for mod in ("ir", "vi"):
        run(["pilot", "--modality", mod, "--config", wd / "pilot.json",
             "--out", wd / f"pilot_{mod}", "--force"])
        run(["select", "--trajectory", wd / f"pilot_{mod}" / f"weights_{mod}.csv",
             "--out", wd / f"selection_{mod}.json", "--force"])

    train_cfg = {
        "data_root": str(data_root),
        "num_classes": 2,
        "batch_size": 20,
        "patch_size": args.size,
        "stride": args.size,
        "epochs": 10_000,
        "max_steps": args.train_steps,
        "seed": args.seed,
        "pilot_ckpt_ir": str(wd / "pilot_ir" / "branch_ir.pt"),
        "pilot_ckpt_vi": str(wd / "pilot_vi" / "branch_vi.pt"),
        "selection_ir": str(wd / "selection_ir.json"),
        "selection_vi": str(wd / "selection_vi.json"),
    }
    (wd / "train.json").write_text(json.dumps(train_cfg, indent=2))
    run(["train", "--config", wd / "train.json", "--out", wd / "run", "--force"])

    best = wd / "run" / "checkpoints" / "best.pt"
    run(["fuse", "--checkpoint", best, "--data", data_root / "test",
         "--out", wd / "fused", "--force"])
    run(["eval", "--fused", wd / "fused", "--data", data_root / "test",
         "--checkpoint", best, "--out", wd / "metrics", "--force"])
    run(["freq", "--checkpoint", best, "--data", data_root / "test",
         "--out", wd / "freq", "--force"])

    print(f"\nall artifacts under {wd}/")
    print((wd / "metrics" / "fusion_metrics.csv").read_text())


if __name__ == "__main__":
    main()
