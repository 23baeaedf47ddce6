"""Zero-shot vs lightweight vs LoRA vs LoRA+COBOT on the source -> target-inverted task.

    python scripts/effectiveness.py --out runs/effectiveness [--backbone ckpt] [--adapter]
"""

import json

import numpy as np

from _common import parser, setup
from cobot import experiments

ADAPTER_MODES = (
    ("adapter", {"mode": "peft", "peft": "adapter", "flags": ""}),
    ("adapter+cobot", {"mode": "cobot", "peft": "adapter", "flags": "cos,rm,hl"}),
)


def main():
    p = parser(__doc__.splitlines()[0])
    p.add_argument("--adapter", action="store_true", help="also run the adapter baseline and adapter+COBOT")
    args = p.parse_args()
    cfg, backbone = setup(args)
    modes = experiments.EFFECTIVENESS_MODES + (ADAPTER_MODES if args.adapter else ())
    eff = experiments.effectiveness(cfg, backbone, seeds=args.seeds, modes=modes)
    summary = {"zero_shot": eff["zero_shot"]}
    print(f"zero-shot        {100 * eff['zero_shot']:6.2f}")
    for label, scores in eff["modes"].items():
        s = np.array(scores)
        summary[label] = {"per_seed": scores, "mean": s.mean(), "std": s.std()}
        print(f"{label:<16} {100 * s.mean():6.2f} ± {100 * s.std():.2f}")
    (args.out / "effectiveness.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
