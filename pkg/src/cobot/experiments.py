"""Experiment drivers shared by the CLI, the scripts and the acceptance tests."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, data
from . import tensor_algebra as ta
from .backbone import SegModel, backbone_shapes, init_backbone
from .config import RunConfig
from .peft import attach, count_cobot_formula
from .train import TrainResult, evaluate, train

logger = logging.getLogger(__name__)

ABLATION_ROWS = (
    ("baseline", ""),
    ("+CoS", "cos"),
    ("+CoS+HL", "cos,hl"),
    ("+CoS+RM", "cos,rm"),
    ("full", "cos,rm,hl"),
)


# ------------------------------------------------------------ model assembly


def _attachment(cfg: RunConfig):
    if cfg.mode not in ("peft", "cobot"):
        return None
    flags = cfg.ablation_flags()
    return attach(
        cfg.peft,
        cfg.depth,
        cfg.d_model,
        cfg.v,
        flags,
        cfg.seed,
        lora_targets=cfg.targets(),
        linear_head=cfg.linear_head,
        shared_base=cfg.shared_base,
    )


def build_model(cfg: RunConfig, backbone: dict | None = None) -> SegModel:
    """Model for ``cfg``; ``backbone`` maps weight names to arrays (random init when ``None``)."""
    vit = cfg.vit()
    params = init_backbone(vit, cfg.pretrain_seed)
    if backbone is not None:
        for k, v in params.items():
            if k not in backbone:
                raise checkpoint.CheckpointError(f"backbone checkpoint lacks {k!r}")
            arr = np.asarray(backbone[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise checkpoint.CheckpointError(f"{k}: checkpoint shape {arr.shape} != model shape {v.shape}")
            v.value = arr.copy()
    return SegModel(vit, params, _attachment(cfg))


def backbone_arrays(model: SegModel) -> dict:
    return {k: np.array(v.value) for k, v in model.params.items()}


def model_arrays(model: SegModel) -> dict:
    return {k: np.array(v.value) for k, v in model.all_params().items()}


def save_model(path, model: SegModel, cfg: RunConfig) -> None:
    checkpoint.save(path, model_arrays(model), {"config": cfg.dumps()})


def load_backbone(path) -> dict:
    """Backbone weights from a checkpoint (``backbone.*`` entries, prefix stripped)."""
    arrays, _ = checkpoint.load(path)
    out = {k[len("backbone.") :]: v for k, v in arrays.items() if k.startswith("backbone.")}
    if not out:
        raise checkpoint.CheckpointError(f"{path}: no backbone weights")
    return out


def load_model(path) -> tuple:
    """Rebuild the exact model stored by :func:`save_model`; returns ``(model, cfg)``."""
    from .config import parse

    arrays, meta = checkpoint.load(path)
    if "config" not in meta:
        raise checkpoint.CheckpointError(f"{path}: checkpoint has no run config")
    cfg = parse(meta["config"])
    model = build_model(cfg)
    params = model.all_params()
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise checkpoint.CheckpointError(f"{path}: missing arrays {missing[:3]}")
    for k, v in params.items():
        v.value = np.array(arrays[k])
    return model, cfg


# ------------------------------------------------------------ parameter accounting


def _categorize(mode: str, backbone: dict, peft: dict, cobot_trainable: dict) -> dict:
    decoder_n = sum(backbone[k] for k in ("head.w", "head.b"))
    encoder_n = sum(n for k, n in backbone.items() if k not in ("head.w", "head.b"))
    decoder_trains = mode in ("lightweight", "peft", "cobot")
    return {
        "frozen": encoder_n + (0 if decoder_trains else decoder_n),
        "decoder": decoder_n if decoder_trains else 0,
        "peft": sum(peft.values()) if mode in ("peft", "cobot") else 0,
        "cobot": sum(cobot_trainable.values()) if mode == "cobot" else 0,
    }


def count_parameters(model: SegModel, mode: str) -> dict:
    """Exact counts by category: frozen backbone, trainable decoder, PEFT branches, COBOT additions."""
    backbone = {k: v.value.size for k, v in model.params.items()}
    peft = {k: v.value.size for k, v in model.peft_params().items()}
    cobot = {k: v.value.size for k, v in model.cobot_params(trainable_only=True).items()}
    return _categorize(mode, backbone, peft, cobot)


def count_parameters_for_config(cfg: RunConfig) -> dict:
    """Same as :func:`count_parameters` without allocating backbone weights (works at ViT-B scale)."""
    backbone = {k: math.prod(s) for k, s in backbone_shapes(cfg.vit()).items()}
    att = _attachment(cfg)
    peft, cobot = {}, {}
    if att is not None:
        peft = {k: v.value.size for k, v in att.peft_variables().items()}
        cobot = {k: v.value.size for k, v in att.cobot_variables(trainable_only=True).items()}
    counts = _categorize(cfg.mode, backbone, peft, cobot)
    if cfg.mode == "cobot":
        groups = len(att.groups)
        counts["cobot_formula"] = count_cobot_formula(cfg.v, cfg.depth, groups, groups, cfg.ablation_flags(), cfg.linear_head)
    return counts


# ------------------------------------------------------------ data


def _records(path: str, spec: data.DatasetSpec) -> list:
    return data.read_dataset(path) if path else data.generate(spec)


def train_records(cfg: RunConfig) -> list:
    return _records(cfg.train_data, cfg.train_spec())


def eval_records(cfg: RunConfig) -> list:
    return _records(cfg.eval_data, cfg.eval_spec())


# ------------------------------------------------------------ runs


@dataclass
class RunOutcome:
    model: SegModel
    result: TrainResult
    metrics: dict  # held-out DSC / mIoU (+ extras)


def write_jsonl(path, rows: list) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.dumps())


def pretrain(cfg: RunConfig, out: Path | None = None) -> RunOutcome:
    """Train the whole segmenter on the source domain; report held-out source and zero-shot target DSC."""
    model = SegModel(cfg.vit(), init_backbone(cfg.vit(), cfg.pretrain_seed))
    result = train(model, data.generate(cfg.pretrain_spec()), "full", cfg.pretrain_config())
    heldout = data.DatasetSpec(cfg.pretrain_domain, cfg.eval_samples, cfg.image_size, cfg.pretrain_seed + 10_000, cfg.noise)
    src = evaluate(model, data.generate(heldout))
    tgt = evaluate(model, eval_records(cfg))
    metrics = {"source_dsc": src["dsc"], "source_miou": src["miou"], "target_dsc": tgt["dsc"], "target_miou": tgt["miou"]}
    if out is not None:
        echo_config(cfg, out)
        write_jsonl(out / "metrics.jsonl", result.log)
        (out / "eval.json").write_text(json.dumps(metrics, sort_keys=True) + "\n")
        checkpoint.save(out / "checkpoint.cobt", {"backbone." + k: v for k, v in backbone_arrays(model).items()}, {"config": cfg.dumps()})
    return RunOutcome(model, result, metrics)


def zero_shot(cfg: RunConfig, backbone: dict) -> dict:
    model = build_model(cfg.replace(mode="freeze"), backbone)
    return evaluate(model, eval_records(cfg), box_perturb=cfg.box_perturb)


def finetune(cfg: RunConfig, backbone: dict, out: Path | None = None, records=None, test=None) -> RunOutcome:
    """Adapt ``backbone`` to the target domain under ``cfg.mode`` and evaluate on the held-out split."""
    model = build_model(cfg, backbone)
    records = train_records(cfg) if records is None else records
    test = eval_records(cfg) if test is None else test
    result = train(model, records, cfg.mode, cfg.train_config())
    ev = evaluate(model, test, box_perturb=cfg.box_perturb)
    metrics = {"dsc": ev["dsc"], "miou": ev["miou"], "per_sample_dsc": ev["per_sample_dsc"]}
    if out is not None:
        echo_config(cfg, out)
        write_jsonl(out / "metrics.jsonl", result.log)
        (out / "eval.json").write_text(json.dumps({"dsc": ev["dsc"], "miou": ev["miou"]}, sort_keys=True) + "\n")
        save_model(out / "checkpoint.cobt", model, cfg)
        dump_relation_matrices(model, out)
    return RunOutcome(model, result, metrics)


def dump_relation_matrices(model: SegModel, out: Path) -> list:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if model.peft is None:
        return written
    for name, rm in model.peft.relation_matrices().items():
        p = out / f"rm_{name}.csv"
        p.write_text(ta.matrix_to_csv(rm.s))
        written.append(p)
    return written


# ------------------------------------------------------------ grids


@dataclass
class Cell:
    row: str
    seed: int
    dsc: float
    miou: float
    counts: dict = field(default_factory=dict)
    log: list = field(default_factory=list)


def row_config(cfg: RunConfig, flags: str) -> RunConfig:
    if flags:
        return cfg.replace(mode="cobot", flags=flags)
    return cfg.replace(mode="peft", flags="")


def run_cell(cfg: RunConfig, backbone: dict, row: str, records, test) -> Cell:
    run = finetune(cfg, backbone, records=records, test=test)
    return Cell(row, cfg.seed, run.metrics["dsc"], run.metrics["miou"], count_parameters(run.model, cfg.mode), run.result.log)


def ablate(cfg: RunConfig, backbone: dict, seeds: int | None = None, rows=ABLATION_ROWS) -> list:
    """The 5-row ablation grid over ``seeds`` fine-tuning seeds (``cfg.seed``, ``cfg.seed + 1``, ...)."""
    seeds = cfg.seeds if seeds is None else seeds
    records, test = train_records(cfg), eval_records(cfg)
    cells = []
    for label, flags in rows:
        for k in range(seeds):
            c = row_config(cfg, flags).replace(seed=cfg.seed + k)
            cells.append(run_cell(c, backbone, label, records, test))
            logger.info("%s seed %d: dsc %.4f", label, c.seed, cells[-1].dsc)
    return cells


def sweep_v(cfg: RunConfig, backbone: dict, seeds: int | None = None, values=None) -> list:
    """Baseline and full COBOT at each hidden dimension ``V``."""
    seeds = cfg.seeds if seeds is None else seeds
    values = [int(t) for t in cfg.sweep_v.split(",")] if values is None else values
    records, test = train_records(cfg), eval_records(cfg)
    cells = []
    for v in values:
        for label, flags in (("baseline", ""), ("full", "cos,rm,hl")):
            for k in range(seeds):
                c = row_config(cfg.replace(v=v), flags).replace(seed=cfg.seed + k)
                cells.append(run_cell(c, backbone, f"V={v} {label}", records, test))
    return cells


def summarize(cells: list) -> list:
    """Rows of ``(label, n, dsc_mean, dsc_std, miou_mean, miou_std, trainable)`` in first-seen order."""
    order, groups = [], {}
    for c in cells:
        if c.row not in groups:
            order.append(c.row)
            groups[c.row] = []
        groups[c.row].append(c)
    rows = []
    for label in order:
        g = groups[label]
        d = np.array([c.dsc for c in g])
        m = np.array([c.miou for c in g])
        trainable = g[0].counts.get("decoder", 0) + g[0].counts.get("peft", 0) + g[0].counts.get("cobot", 0)
        rows.append((label, len(g), d.mean(), d.std(), m.mean(), m.std(), trainable))
    return rows


def table_csv(cells: list) -> str:
    lines = ["row,seeds,dsc_mean,dsc_std,miou_mean,miou_std,trainable_params"]
    for label, n, dm, ds, mm, ms, tr in summarize(cells):
        lines.append(f"{label},{n},{dm:.6f},{ds:.6f},{mm:.6f},{ms:.6f},{tr}")
    return "\n".join(lines) + "\n"


def table_text(cells: list) -> str:
    lines = [f"{'row':<16}{'DSC (%)':>18}{'mIoU (%)':>18}{'trainable':>11}"]
    for label, n, dm, ds, mm, ms, tr in summarize(cells):
        lines.append(f"{label:<16}{100 * dm:>10.2f} ± {100 * ds:<5.2f}{100 * mm:>10.2f} ± {100 * ms:<5.2f}{tr:>11}")
    return "\n".join(lines) + "\n"


def cells_jsonl(cells: list) -> list:
    return [{"row": c.row, "seed": c.seed, "dsc": c.dsc, "miou": c.miou, "counts": c.counts} for c in cells]


# ------------------------------------------------------------ desk-scale effectiveness


EFFECTIVENESS_MODES = (
    ("lightweight", {"mode": "lightweight"}),
    ("lora", {"mode": "peft", "peft": "lora", "flags": ""}),
    ("lora+cobot", {"mode": "cobot", "peft": "lora", "flags": "cos,rm,hl"}),
)


def effectiveness(cfg: RunConfig, backbone: dict, seeds: int = 5, modes=EFFECTIVENESS_MODES) -> dict:
    """Zero-shot DSC plus per-seed held-out DSC (and step losses) for each fine-tuning mode."""
    records, test = train_records(cfg), eval_records(cfg)
    out = {"zero_shot": zero_shot(cfg, backbone)["dsc"], "modes": {}, "losses": {}}
    for label, changes in modes:
        scores, losses = [], []
        for k in range(seeds):
            c = cfg.replace(seed=cfg.seed + k, **changes)
            run = finetune(c, backbone, records=records, test=test)
            scores.append(run.metrics["dsc"])
            losses.append(run.result.losses)
            logger.info("%s seed %d: dsc %.4f", label, c.seed, scores[-1])
        out["modes"][label] = scores
        out["losses"][label] = losses
    return out

