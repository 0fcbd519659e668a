"""Random vs. oracle masking for CL4SRec on the synthetic dataset, averaged over seeds."""

import argparse

import numpy as np

from ec4srec.experiments import run_oracle_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args()
    overrides = {} if args.epochs is None else {"epochs": args.epochs}
    reports = [run_oracle_experiment(int(s), **overrides) for s in args.seeds.split(",")]
    for r in reports:
        print(f"seed {r.seed}: random {r.random} oracle {r.oracle} gap {r.relative_gap():+.1%}")
    for metric in ("HR@3", "NDCG@3"):
        rand = np.mean([r.random[metric] for r in reports])
        orac = np.mean([r.oracle[metric] for r in reports])
        print(f"{metric}: random {rand:.4f} oracle {orac:.4f} ({(orac - rand) / rand:+.1%})")


if __name__ == "__main__":
    main()
