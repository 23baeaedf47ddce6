"""``cobot`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data, experiments, verify
from . import tensor_algebra as ta
from .backbone import ModelError
from .config import RunConfig, load
from .peft import ConfigError
from .train import evaluate

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

COMMANDS = ("gen-data", "pretrain", "finetune", "eval", "ablate", "sweep-v", "gradcheck", "algebra-check", "params", "dump-rm")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value run config")
    common.add_argument("--seed", type=int, help="run seed (dataset seed for gen-data)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--mode", choices=("freeze", "lightweight", "peft", "cobot"))
    common.add_argument("--peft", choices=("lora", "adapter"))
    common.add_argument("--flags", help="comma list drawn from cos,rm,hl")
    common.add_argument("--v", type=int, help="PEFT hidden dimension V")
    common.add_argument("--steps", type=int, help="optimizer steps")
    common.add_argument("--backbone", type=Path, help="pretrained backbone checkpoint")
    common.add_argument("--checkpoint", type=Path, help="model checkpoint (eval, dump-rm)")
    common.add_argument("--data", type=Path, help="dataset file (eval)")
    common.add_argument("--seeds", type=int, help="seeds per grid cell (ablate, sweep-v)")
    common.add_argument("--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cobot", description="Cross-block PEFT harness for a toy promptable segmenter.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "write a synthetic CSYN1 dataset",
        "pretrain": "train the full segmenter on the source domain",
        "finetune": "adapt a pretrained backbone to the target domain",
        "eval": "print DSC and mIoU of a checkpoint",
        "ablate": "5-row CoS / RM / HL ablation grid",
        "sweep-v": "baseline vs full COBOT across hidden dimensions",
        "gradcheck": "finite-difference gradient verification",
        "algebra-check": "hypercomplex and tensor algebra verification",
        "params": "parameter counts by category",
        "dump-rm": "write relation matrices as CSV",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def resolve_config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    over = {}
    for key in ("seed", "mode", "peft", "flags", "v", "steps", "seeds"):
        val = getattr(args, key)
        if val is not None:
            over[key] = val
    if args.backbone is not None:
        over["backbone"] = str(args.backbone)
    if args.flags is not None and args.mode is None and "mode" not in over:
        over["mode"] = "cobot" if args.flags.strip() else "peft"
    return cfg.replace(**over)


def _out(args, default: str) -> Path:
    out = args.out if args.out is not None else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _backbone(cfg: RunConfig) -> dict:
    if not cfg.backbone:
        raise UsageError("this command needs a pretrained backbone: pass --backbone PATH (from `cobot pretrain`)")
    return experiments.load_backbone(cfg.backbone)


def _print_json(d: dict) -> None:
    print(json.dumps(d, sort_keys=True))


# ------------------------------------------------------------ commands


def cmd_gen_data(args, cfg):
    if args.seed is not None:
        cfg = cfg.replace(data_seed=args.seed)
    spec = cfg.train_spec()
    out = _out(args, "runs/data")
    path = out / f"{spec.domain}.csyn"
    data.write_dataset(data.generate(spec), path)
    experiments.echo_config(cfg, out)
    print(f"wrote {spec.count} {spec.domain} samples (seed {spec.seed}) to {path}")
    return EXIT_OK


def cmd_pretrain(args, cfg):
    out = _out(args, "runs/pretrain")
    run = experiments.pretrain(cfg, out)
    _print_json(run.metrics)
    return EXIT_OK


def cmd_finetune(args, cfg):
    out = _out(args, f"runs/finetune-{cfg.mode}")
    run = experiments.finetune(cfg, _backbone(cfg), out)
    print(f"dsc {run.metrics['dsc']:.6f}")
    print(f"miou {run.metrics['miou']:.6f}")
    return EXIT_OK


def cmd_eval(args, cfg):
    if args.checkpoint is None:
        raise UsageError("eval needs --checkpoint PATH")
    model, saved = experiments.load_model(args.checkpoint)
    records = data.read_dataset(args.data) if args.data else experiments.eval_records(saved)
    ev = evaluate(model, records, box_perturb=saved.box_perturb)
    print(f"dsc {ev['dsc']:.6f}")
    print(f"miou {ev['miou']:.6f}")
    return EXIT_OK


def _grid(args, cfg, cells, default):
    out = _out(args, default)
    experiments.echo_config(cfg, out)
    (out / "table.csv").write_text(experiments.table_csv(cells))
    experiments.write_jsonl(out / "metrics.jsonl", experiments.cells_jsonl(cells))
    print(experiments.table_text(cells), end="")
    return EXIT_OK


def cmd_ablate(args, cfg):
    return _grid(args, cfg, experiments.ablate(cfg, _backbone(cfg)), "runs/ablate")


def cmd_sweep_v(args, cfg):
    return _grid(args, cfg, experiments.sweep_v(cfg, _backbone(cfg)), "runs/sweep-v")


def _verification(args, lines: str, passed: bool, name: str) -> int:
    if args.out is not None:
        out = _out(args, "")
        (out / f"{name}.jsonl").write_text(lines)
    print(lines, end="")
    print(f"{name}: {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_VERIFY


def cmd_gradcheck(args, cfg):
    report = verify.gradcheck_suite(cfg.seed)
    return _verification(args, report.to_jsonl(), report.passed, "gradcheck")


def cmd_algebra_check(args, cfg):
    results = verify.algebra_suite(cfg.seed)
    return _verification(args, verify.report_jsonl(results), all(r.passed for r in results), "algebra-check")


def cmd_params(args, cfg):
    counts = experiments.count_parameters_for_config(cfg)
    for k in ("frozen", "decoder", "peft", "cobot"):
        print(f"{k}: {counts[k]}")
    if "cobot_formula" in counts:
        print(f"cobot (closed form): {counts['cobot_formula']}")
    return EXIT_OK


def cmd_dump_rm(args, cfg):
    if args.checkpoint is not None:
        model, _ = experiments.load_model(args.checkpoint)
    else:
        model = experiments.build_model(cfg)
    out = _out(args, "runs/rm")
    written = experiments.dump_relation_matrices(model, out)
    if not written:
        print("no relation matrices (coefficient sets disabled)")
    for p in written:
        rm = ta.RelationMatrix(ta.matrix_from_csv(p.read_text()))
        print(f"{p}  L={rm.n_blocks}")
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-v": cmd_sweep_v,
    "gradcheck": cmd_gradcheck,
    "algebra-check": cmd_algebra_check,
    "params": cmd_params,
    "dump-rm": cmd_dump_rm,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](args, cfg)
    except (UsageError, ConfigError, ModelError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:  # includes dataset and checkpoint format errors
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
