"""Module ablation table (DISCN against noDEP, noNOR, noRES and noSEA).

Fold metrics of all seeds are pooled per column; table.csv has one row per
metric and one column per variant.

    python scripts/run_ablation.py --out runs/ablation --seeds 0 1 2
"""
import argparse
import logging
from dataclasses import replace

import torch

from discn.harness import desk_config, run_suite
from discn.model import VARIANTS
from discn.synth import generate_dataset, parse_divergence


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--divergence", default="high")
    ap.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    data = generate_dataset(seed=0, divergence=parse_divergence(args.divergence))
    base = desk_config()
    configs = {v: replace(base, train=replace(base.train, variant=v)) for v in args.variants}
    run_suite(configs, data, seeds=args.seeds, out_dir=args.out)
    with open(f"{args.out}/table.csv") as fh:
        print(fh.read(), end="")


if __name__ == "__main__":
    main()
