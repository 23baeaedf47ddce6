"""Baseline vs full COBOT as the PEFT hidden dimension V grows.

    python scripts/sweep_v.py --out runs/sweep-v [--backbone ckpt] [--values 4,8,16,32]
"""

from _common import parser, setup
from cobot import experiments


def main():
    p = parser(__doc__.splitlines()[0])
    p.add_argument("--values", default="4,8,16,32")
    args = p.parse_args()
    cfg, backbone = setup(args)
    cfg = cfg.replace(sweep_v=args.values)
    cells = experiments.sweep_v(cfg, backbone, seeds=args.seeds)
    experiments.echo_config(cfg, args.out)
    (args.out / "table.csv").write_text(experiments.table_csv(cells))
    experiments.write_jsonl(args.out / "metrics.jsonl", experiments.cells_jsonl(cells))
    print(experiments.table_text(cells), end="")


if __name__ == "__main__":
    main()
