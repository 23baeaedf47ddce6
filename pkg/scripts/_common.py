"""Shared helpers for the experiment scripts."""

import argparse
import json
import logging
from pathlib import Path

from cobot import experiments
from cobot.config import RunConfig, load


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", type=Path, help="flat key = value run config (defaults to the desk-scale setup)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--backbone", type=Path, help="pretrained checkpoint; pretrains into <out>/pretrain when omitted")
    p.add_argument("--seeds", type=int, default=5)
    return p


def setup(args) -> tuple:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load(args.config) if args.config else RunConfig()
    args.out.mkdir(parents=True, exist_ok=True)
    if args.backbone is not None:
        backbone = experiments.load_backbone(args.backbone)
    else:
        run = experiments.pretrain(cfg, args.out / "pretrain")
        logging.info("pretrained: %s", json.dumps(run.metrics))
        backbone = experiments.backbone_arrays(run.model)
    return cfg, backbone
