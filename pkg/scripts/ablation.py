"""CoS / RM / HL ablation grid (baseline, +CoS, +CoS+HL, +CoS+RM, full).

    python scripts/ablation.py --out runs/ablation [--backbone ckpt] [--peft adapter]
"""

from _common import parser, setup
from cobot import experiments


def main():
    p = parser(__doc__.splitlines()[0])
    p.add_argument("--peft", choices=("lora", "adapter"), default="lora")
    args = p.parse_args()
    cfg, backbone = setup(args)
    cfg = cfg.replace(peft=args.peft)
    cells = experiments.ablate(cfg, backbone, seeds=args.seeds)
    experiments.echo_config(cfg, args.out)
    (args.out / "table.csv").write_text(experiments.table_csv(cells))
    experiments.write_jsonl(args.out / "metrics.jsonl", experiments.cells_jsonl(cells))
    print(experiments.table_text(cells), end="")


if __name__ == "__main__":
    main()
