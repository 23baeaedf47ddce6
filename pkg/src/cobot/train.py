"""Training modes, Adam, and evaluation for the toy segmenter."""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import SegModel, binarize, dsc_metric, miou_metric, perturb_box, total_loss
from .data import stack
from .peft import component_rng

logger = logging.getLogger(__name__)

MODES = ("freeze", "lightweight", "peft", "cobot", "full")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    lr: float = 3e-3
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    box_perturb: int = 5
    seed: int = 0


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: list, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.wd:
                g = g + self.wd * p.value
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()


def set_mode(model: SegModel, mode: str) -> list:
    """Flip ``requires_grad`` for ``mode`` and return the trainable variables.

    freeze: nothing. lightweight: mask decoder. peft / cobot: decoder + every
    branch parameter attached (cobot additionally trains coefficient sets,
    relation matrices and heads). full: the whole backbone (pretraining).
    """
    if mode not in MODES:
        raise TrainingError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode in ("peft", "cobot") and model.peft is None:
        raise TrainingError(f"mode {mode!r} needs attached PEFT branches")
    if mode == "peft" and model.peft is not None and model.peft.wiring.cos:
        raise TrainingError("mode 'peft' is the plain baseline; use mode 'cobot' with coefficient sets")
    for v in model.all_params().values():
        v.requires_grad = False
    train: dict = {}
    if mode == "full":
        train.update(model.params)
    elif mode in ("lightweight", "peft", "cobot"):
        train.update(model.decoder_params())
    if mode in ("peft", "cobot"):
        train.update(model.peft_params())
        train.update(model.cobot_params(trainable_only=True))
    for v in train.values():
        v.requires_grad = True
    return list(train.values())


def checksum(variables: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(variables):
        h.update(k.encode())
        h.update(np.ascontiguousarray(variables[k].value).tobytes())
    return h.hexdigest()


def relation_conditions(model: SegModel) -> dict:
    if model.peft is None:
        return {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return {n: rm.condition() for n, rm in model.peft.relation_matrices().items()}


def _batch_metrics(logits: np.ndarray, masks: np.ndarray):
    pred = binarize(logits)
    dsc = [dsc_metric(p, g) for p, g in zip(pred, masks)]
    mi = [miou_metric(p, g) for p, g in zip(pred, masks)]
    return dsc, mi


@dataclass
class TrainResult:
    log: list  # one metrics dict per epoch
    losses: list  # total loss at every step, before that step's update


def train(model: SegModel, records: list, mode: str, cfg: TrainConfig, on_log=None) -> TrainResult:
    """Mini-batch Adam on ``bce + dice`` over ``cfg.steps`` steps.

    Only the variables selected by ``mode`` change. ``on_log`` (optional)
    receives each epoch's metrics dict as it is produced.
    """
    if not records:
        raise TrainingError("empty training set")
    params = set_mode(model, mode)
    opt = Adam(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay) if params else None
    images, masks, boxes = stack(records)
    n = len(records)
    s = model.cfg.image_size
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    log: list = []
    losses: list = []
    acc = {"bce": [], "dice": [], "dsc": [], "miou": []}
    order = None
    for step in range(cfg.steps):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0:
            order = component_rng(cfg.seed, "order", epoch).permutation(n)
        idx = order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
        brng = component_rng(cfg.seed, "box", step)
        bboxes = np.array([perturb_box(boxes[i], cfg.box_perturb, brng, s) for i in idx])
        with ad.Tape() as tape:
            logits = model.forward(images[idx], bboxes)
            loss, bce, dice = total_loss(logits, masks[idx])
        value = float(loss.value.item())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step} (epoch {epoch}, mode {mode})")
        losses.append(value)
        if opt is not None:
            tape.backward(loss)
            opt.step()
        dsc, mi = _batch_metrics(logits.value, masks[idx])
        acc["bce"].append(float(bce.value.item()))
        acc["dice"].append(float(dice.value.item()))
        acc["dsc"].extend(dsc)
        acc["miou"].extend(mi)
        if pos == per_epoch - 1 or step == cfg.steps - 1:
            entry = {
                "epoch": epoch,
                "step": step + 1,
                "loss_bce": float(np.mean(acc["bce"])),
                "loss_dice": float(np.mean(acc["dice"])),
                "dsc": float(np.mean(acc["dsc"])),
                "miou": float(np.mean(acc["miou"])),
                "cond_S": relation_conditions(model),
            }
            log.append(entry)
            logger.debug("epoch %d step %d loss %.5f", epoch, step + 1, entry["loss_bce"] + entry["loss_dice"])
            if on_log is not None:
                on_log(entry)
            acc = {k: [] for k in acc}
    set_mode(model, "freeze")
    return TrainResult(log, losses)


def evaluate(model: SegModel, records: list, box_perturb: int = 5, seed: int = 12345, batch_size: int = 32) -> dict:
    """Mean DSC / mIoU with deterministically perturbed boxes (stream keyed by sample index)."""
    images, masks, boxes = stack(records)
    s = model.cfg.image_size
    eval_boxes = np.array(
        [perturb_box(boxes[i], box_perturb, component_rng(seed, "eval-box", i), s) for i in range(len(records))]
    )
    dsc, mi = [], []
    for start in range(0, len(records), batch_size):
        sl = slice(start, start + batch_size)
        d, m = _batch_metrics(model.logits(images[sl], eval_boxes[sl]), masks[sl])
        dsc.extend(d)
        mi.extend(m)
    return {"dsc": float(np.mean(dsc)), "miou": float(np.mean(mi)), "per_sample_dsc": dsc, "per_sample_miou": mi}
