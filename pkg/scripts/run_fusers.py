"""Fuser comparison (MLP, LSTM, GRU, SEA) with everything else held fixed.

    python scripts/run_fusers.py --out runs/fusers
"""
import argparse
import logging
from dataclasses import replace

import torch

from discn.harness import desk_config, run_suite
from discn.head import FUSERS
from discn.synth import generate_dataset, parse_divergence


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--divergence", default="high")
    ap.add_argument("--fusers", nargs="+", choices=FUSERS, default=["MLP", "LSTM", "GRU", "SEA"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    data = generate_dataset(seed=0, divergence=parse_divergence(args.divergence))
    base = desk_config()
    run_suite({f: replace(base, train=replace(base.train, fuser=f)) for f in args.fusers}, data,
              seeds=args.seeds, out_dir=args.out)
    with open(f"{args.out}/table.csv") as fh:
        print(fh.read(), end="")


if __name__ == "__main__":
    main()
