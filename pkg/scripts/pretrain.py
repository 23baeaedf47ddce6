"""Pretrain the segmenter on the source domain and report the zero-shot domain gap.

    python scripts/pretrain.py --out runs/pretrain [--config cfg] [--seeds 3]

With ``--seeds k`` it repeats pretraining for seeds 1..k and prints the
source-minus-target DSC gap of each.
"""

import argparse
import json
import logging
from pathlib import Path

from cobot import experiments
from cobot.config import RunConfig, load


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = load(args.config) if args.config else RunConfig()
    for seed in range(1, args.seeds + 1):
        cfg = base.replace(pretrain_seed=seed) if args.seeds > 1 else base
        out = args.out / f"seed{seed}" if args.seeds > 1 else args.out
        m = experiments.pretrain(cfg, out).metrics
        print(json.dumps({"pretrain_seed": cfg.pretrain_seed, **m, "gap": m["source_dsc"] - m["target_dsc"]}, sort_keys=True))


if __name__ == "__main__":
    main()
