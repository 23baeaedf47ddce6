"""Acceptance criteria, one PASS/FAIL line each (collected and reprinted in the terminal summary).

Criterion 7 trains the desk-scale model and takes several minutes.
"""

import math
import time

import numpy as np
import pytest

from cobot import data, experiments, verify
from cobot.backbone import SegModel, bce_loss, dice_loss, dsc_metric, init_backbone, iou
from cobot.cli import main
from cobot.config import RunConfig, load
from cobot.peft import AblationFlags, attach
from cobot.train import checksum, train, TrainConfig


@pytest.fixture
def report(acceptance_lines):
    def emit(n, name, passed, detail=""):
        line = f"criterion {n:>2} {name}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        acceptance_lines.append(line)
        print(line)
        assert passed, line

    return emit


# ------------------------------------------------------------ shared desk-scale run


@pytest.fixture(scope="module")
def desk():
    cfg = RunConfig()
    t0 = time.perf_counter()
    pre = experiments.pretrain(cfg)
    backbone = experiments.backbone_arrays(pre.model)
    eff = experiments.effectiveness(cfg, backbone, seeds=5)
    return {"cfg": cfg, "pretrain": pre, "backbone": backbone, "eff": eff, "seconds": time.perf_counter() - t0}


# ------------------------------------------------------------ 1, 2: algebra


def test_c01_hypercomplex_algebra(report):
    t0 = time.perf_counter()
    results = {r.name: r for r in verify.algebra_suite(0) if r.name.startswith("hypercomplex.")}
    dt = time.perf_counter() - t0
    want = {"hypercomplex.identity": 0.0, "hypercomplex.unit_relations": 0.0, "hypercomplex.associativity": 1e-12, "hypercomplex.norm_multiplicative": 1e-12, "hypercomplex.left_mul_faithful": 1e-14}
    ok = all(k in results and results[k].tol == tol and results[k].passed for k, tol in want.items())
    worst = max(results[k].max_err for k in want)
    report(1, "hypercomplex algebra", ok and dt < 5, f"max err {worst:.2e}, {dt:.2f} s")


def test_c02_tproduct_equivalence(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    pairs = verify._tensor_pairs(rng, 50, (5, 5, 6))
    err = verify.check_tproduct_equivalence(pairs)
    dt = time.perf_counter() - t0
    report(2, "t-product bcirc vs DFT", len(pairs) == 50 and err < 1e-9 and dt < 5, f"rel err {err:.2e}, {dt:.2f} s")


# ------------------------------------------------------------ 3: gradients


def test_c03_gradient_checks(report):
    t0 = time.perf_counter()
    rep = verify.gradcheck_suite(0)
    dt = time.perf_counter() - t0
    names = {e.name for e in rep.entries}
    classes = {
        "quaternion bank": ".head",
        "lambda_mc": ".lambda_mc",
        "lambda_base": ".lambda_base",
        "relation matrix": ".S",
        "lora": ".alpha",
        "adapter": ".down",
        "decoder head": "head.w",
    }
    covered = all(any(n.startswith(("lora_full", "adapter_full")) and suffix in n for n in names) for suffix in classes.values())
    assert verify.TOY.depth == 2 and verify.TOY.image_size == 8
    report(3, "gradient checks", rep.passed and covered and dt < 120, f"max rel err {rep.max_rel_err:.2e} over {len(rep.entries)} checks, {dt:.1f} s")


# ------------------------------------------------------------ 4, 5: init


def test_c04_orthogonal_init(report):
    worst = 0.0
    for kind in ("lora", "adapter"):
        for v in (4, 8, 16, 32):
            for seed in range(3):
                p = attach(kind, 6, 64, v, AblationFlags.full(), seed)
                for g in p.groups.values():
                    for i in range(g.n_blocks):
                        w = g.projection_weights(i)
                        worst = max(worst, np.max(np.abs(w.T @ w - np.eye(v))))
    report(4, "orthogonal init", worst < 1e-10, f"max |W^T W - I| {worst:.2e}")


def test_c05_zero_init_neutrality(report):
    cfg = RunConfig().vit()
    params = init_backbone(cfg, 0)
    recs = data.generate(data.DatasetSpec("target-inverted", 4, 64, 0))
    images, _, boxes = data.stack(recs)
    frozen = SegModel(cfg, params).logits(images, boxes)
    worst = 0.0
    for kind in ("lora", "adapter"):
        m = SegModel(cfg, params, attach(kind, cfg.depth, cfg.d_model, 4, AblationFlags.full(), 0))
        worst = max(worst, np.max(np.abs(m.logits(images, boxes) - frozen)))
    m = SegModel(cfg, params, attach("lora", cfg.depth, cfg.d_model, 4, AblationFlags.full(), 0))
    before = checksum(m.all_params())
    train(m, recs, "freeze", TrainConfig(steps=3))
    identical = checksum(m.all_params()) == before
    report(5, "zero-init neutrality", worst <= 1e-12 and identical, f"max |dlogits| {worst:.1e}, freeze bit-identical {identical}")


# ------------------------------------------------------------ 6: parameter accounting


def test_c06_parameter_accounting(report):
    cfg = load("configs/lora_vitbase.cfg")
    assert (cfg.d_model, cfg.v, cfg.depth, cfg.targets()) == (768, 4, 12, ("q", "v"))
    c = experiments.count_parameters_for_config(cfg)
    # reference LoRA figure, quoted in thousands to one decimal
    reference_k = 147.4
    ok = c["peft"] == 147_456 and math.floor(c["peft"] / 100) / 10 == reference_k
    ok = ok and c["cobot"] == c["cobot_formula"] and 300 <= c["cobot"] <= 1500
    report(6, "parameter accounting", ok, f"peft {c['peft']}, cobot {c['cobot']} (closed form {c['cobot_formula']})")


# ------------------------------------------------------------ 7: desk-scale effectiveness


def test_c07_desk_scale_effectiveness(desk, report):
    eff = desk["eff"]
    zs = eff["zero_shot"]
    means = {k: float(np.mean(v)) for k, v in eff["modes"].items()}
    beats = all(m - zs >= 0.05 for m in means.values())
    lora, cob = np.array(eff["modes"]["lora"]), np.array(eff["modes"]["lora+cobot"])
    directional = cob.mean() >= lora.mean() - 0.005 and np.median(cob - lora) >= 0
    fast = desk["seconds"] < 15 * 60
    detail = f"zero-shot {zs:.3f}; " + ", ".join(f"{k} {v:.3f}" for k, v in means.items())
    detail += f"; median seedwise gain {np.median(cob - lora):+.4f}; {desk['seconds']:.0f} s"
    for label, scores in eff["modes"].items():
        detail += f"\n    {label} per seed: " + " ".join(f"{x:.3f}" for x in scores)
    report(7, "desk-scale effectiveness", beats and directional and fast, detail)


def test_training_loss_decreases(desk):
    for label, runs in desk["eff"]["losses"].items():
        for losses in runs:
            k = len(losses) // 10
            assert np.median(losses[-k:]) < np.median(losses[:k]), label
            assert min(losses[1:]) < losses[0], label


def test_domain_shift_audit():
    gaps = []
    for seed in (1, 2, 3):
        cfg = RunConfig(pretrain_seed=seed, pretrain_steps=400, eval_seed=seed + 100)
        m = experiments.pretrain(cfg).metrics
        gaps.append(m["source_dsc"] - m["target_dsc"])
    assert min(gaps) >= 0.15, gaps


# ------------------------------------------------------------ 8: ablation harness


def test_c08_ablation_harness(desk, report):
    cfg = desk["cfg"].replace(steps=40, samples=40, eval_samples=40)
    cells = experiments.ablate(cfg, desk["backbone"], seeds=5)
    rows = experiments.summarize(cells)
    labels = [r[0] for r in rows]
    structure = labels == ["baseline", "+CoS", "+CoS+HL", "+CoS+RM", "full"] and all(r[1] == 5 for r in rows)
    text = experiments.table_text(cells)
    structure = structure and text.count("±") == 10
    match = True
    records, test = experiments.train_records(cfg), experiments.eval_records(cfg)
    for cell in (c for c in cells if c.row == "baseline"):
        solo = experiments.finetune(cfg.replace(mode="peft", flags="", seed=cell.seed), desk["backbone"], records=records, test=test)
        match = match and solo.metrics["dsc"] == cell.dsc and solo.metrics["miou"] == cell.miou and solo.result.log == cell.log
    report(8, "ablation harness", structure and match, f"{len(rows)} rows x 5 seeds, baseline bit-identical to standalone PEFT: {match}")


# ------------------------------------------------------------ 9: metric oracles


def test_c09_metric_oracles(report):
    pred = np.zeros((4, 4), bool)
    gt = np.zeros((4, 4), bool)
    pred[0] = True
    gt[0, 2:] = True
    gt[1, :2] = True
    hand = dsc_metric(pred, gt) == 0.5 and iou(pred, gt) == 1 / 3
    mask = np.ones((1, 8, 8))
    b = abs(bce_loss(np.zeros((1, 8, 8)), mask).value.item() - math.log(2))
    eps = 1e-6
    d = abs(dice_loss(np.full((1, 8, 8), 0.5), mask).value.item() - (1 - (64 + eps) / (96 + eps)))
    report(9, "metric oracles", hand and b < 1e-9 and d < 1e-9, f"bce err {b:.1e}, dice err {d:.1e}")


# ------------------------------------------------------------ 10: dataset determinism


def test_c10_dataset_determinism(tmp_path, report):
    files = []
    for name in ("a", "b"):
        assert main(["gen-data", "--seed", "3", "--out", str(tmp_path / name)]) == 0
        files.append((tmp_path / name / "target-inverted.csyn").read_bytes())
    recs = data.generate(RunConfig().train_spec())
    data.write_dataset(recs, tmp_path / "rt.csyn")
    lossless = data.read_dataset(tmp_path / "rt.csyn") == recs
    report(10, "dataset determinism", files[0] == files[1] and lossless, f"{len(files[0])} bytes, round trip lossless {lossless}")
