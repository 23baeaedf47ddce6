"""Toy promptable segmenter: a small pre-norm ViT encoder and a per-patch linear mask head.

The box prompt enters as a rendered binary channel stacked with the gray image.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .peft import PeftAttachment, component_rng


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    heads: int = 4
    depth: int = 6
    mlp_ratio: int = 4
    in_channels: int = 2
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ModelError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.heads:
            raise ModelError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 4:
            raise ModelError(f"d_model {self.d_model} must be divisible by 4")
        if self.in_channels != 2:
            raise ModelError("input is the gray image plus one box channel: in_channels must be 2")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    def to_dict(self) -> dict:
        return asdict(self)


DECODER_KEYS = ("head.w", "head.b")


def init_backbone(cfg: ViTConfig, seed: int = 0) -> dict:
    """Random encoder + decoder weights, all frozen (``requires_grad=False``)."""
    rng = component_rng(seed, "backbone")
    d, hid = cfg.d_model, cfg.d_model * cfg.mlp_ratio

    def lin(fan_in, fan_out, gain=1.0):
        return rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out))

    p = {
        "patch.w": lin(cfg.patch_dim, d),
        "patch.b": np.zeros(d),
        "pos": rng.normal(0.0, 0.02, size=(cfg.n_tokens, d)),
    }
    out_gain = 1.0 / math.sqrt(2 * cfg.depth)
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        p[b + "ln1.g"], p[b + "ln1.b"] = np.ones(d), np.zeros(d)
        for n in ("q", "k", "v"):
            p[b + f"attn.w{n}"], p[b + f"attn.b{n}"] = lin(d, d), np.zeros(d)
        p[b + "attn.wo"], p[b + "attn.bo"] = lin(d, d, out_gain), np.zeros(d)
        p[b + "ln2.g"], p[b + "ln2.b"] = np.ones(d), np.zeros(d)
        p[b + "mlp.w1"], p[b + "mlp.b1"] = lin(d, hid), np.zeros(hid)
        p[b + "mlp.w2"], p[b + "mlp.b2"] = lin(hid, d, out_gain), np.zeros(d)
    p["ln_f.g"], p["ln_f.b"] = np.ones(d), np.zeros(d)
    p["head.w"] = lin(d, cfg.patch_size * cfg.patch_size, 0.1)
    p["head.b"] = np.zeros(cfg.patch_size * cfg.patch_size)
    return {k: ad.Variable(v, requires_grad=False, name=k) for k, v in p.items()}


def render_box_channel(boxes: np.ndarray, size: int) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    idx = np.arange(size)
    inx = (idx[None, :] >= boxes[:, 0:1]) & (idx[None, :] <= boxes[:, 2:3])
    iny = (idx[None, :] >= boxes[:, 1:2]) & (idx[None, :] <= boxes[:, 3:4])
    return (iny[:, :, None] & inx[:, None, :]).astype(np.float64)


def patchify(images: np.ndarray, boxes: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """``(B, s, s)`` images + boxes -> ``(B, tokens, p*p*2)`` patch rows, row-major over the grid."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    b, s = images.shape[0], cfg.image_size
    if images.shape[1:] != (s, s):
        raise ModelError(f"expected images of size {s}x{s}, got {images.shape[1:]}")
    x = np.stack([images, render_box_channel(boxes, s)], axis=-1)
    g, ps = cfg.grid, cfg.patch_size
    x = x.reshape(b, g, ps, g, ps, 2).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, ps * ps * 2)


def _affine_ln(x, g, b, eps):
    return ad.add(ad.scale_columns(ad.layernorm(x, eps), g), b)


class SegModel:
    def __init__(self, cfg: ViTConfig, params: dict, peft: PeftAttachment | None = None):
        missing = [k for k in init_param_names(cfg) if k not in params]
        if missing:
            raise ModelError(f"missing backbone weights: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        self.cfg = cfg
        self.params = params
        self.peft = peft

    # -- parameter views

    def encoder_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k not in DECODER_KEYS}

    def decoder_params(self) -> dict:
        return {k: self.params[k] for k in DECODER_KEYS}

    def peft_params(self) -> dict:
        return {} if self.peft is None else self.peft.peft_variables()

    def cobot_params(self, trainable_only: bool = True) -> dict:
        return {} if self.peft is None else self.peft.cobot_variables(trainable_only)

    def all_params(self) -> dict:
        out = {}
        out.update({"backbone." + k: v for k, v in self.params.items()})
        out.update({"peft." + k: v for k, v in self.peft_params().items()})
        out.update({"cobot." + k: v for k, v in self.cobot_params(trainable_only=False).items()})
        return out

    # -- forward

    def encode(self, images, boxes, zero_pos: bool = False):
        cfg, p = self.cfg, self.params
        patches = patchify(images, boxes, cfg)
        x = ad.add(ad.matmul(patches, p["patch.w"]), p["patch.b"])
        if not zero_pos:
            x = ad.add(x, p["pos"])
        return self.encode_tokens(x)

    def encode_tokens(self, x):
        cfg, p = self.cfg, self.params
        eps = cfg.ln_eps
        nb, nt, d = x.shape
        hd = d // cfg.heads
        peft = self.peft
        if peft is not None:
            peft.begin_forward()
        for i in range(cfg.depth):
            b = f"blocks.{i}."
            y = _affine_ln(x, p[b + "ln1.g"], p[b + "ln1.b"], eps)
            proj = {}
            for n in ("q", "k", "v"):
                t = ad.add(ad.matmul(y, p[b + f"attn.w{n}"]), p[b + f"attn.b{n}"])
                if peft is not None:
                    delta = peft.delta(n, i, y)
                    if delta is not None:
                        t = ad.add(t, delta)
                proj[n] = ad.transpose(ad.reshape(t, (nb, nt, cfg.heads, hd)), (0, 2, 1, 3))
            scores = ad.scale(ad.matmul(proj["q"], ad.transpose(proj["k"], (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
            att = ad.matmul(ad.softmax_rows(scores), proj["v"])
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (nb, nt, d))
            o = ad.add(ad.matmul(att, p[b + "attn.wo"]), p[b + "attn.bo"])
            if peft is not None:
                delta = peft.delta("o", i, att)
                if delta is not None:
                    o = ad.add(o, delta)
            x = ad.add(x, o)
            y = _affine_ln(x, p[b + "ln2.g"], p[b + "ln2.b"], eps)
            m = ad.gelu(ad.add(ad.matmul(y, p[b + "mlp.w1"]), p[b + "mlp.b1"]))
            m = ad.add(ad.matmul(m, p[b + "mlp.w2"]), p[b + "mlp.b2"])
            if peft is not None:
                delta = peft.delta("adapter", i, y)
                if delta is not None:
                    m = ad.add(m, delta)
            x = ad.add(x, m)
        return _affine_ln(x, p["ln_f.g"], p["ln_f.b"], eps)

    def decode(self, tokens):
        return decode_mask(tokens, self.params["head.w"], self.params["head.b"], self.cfg)

    def forward(self, images, boxes):
        return self.decode(self.encode(images, boxes))

    def logits(self, images, boxes) -> np.ndarray:
        return np.array(self.forward(images, boxes).value)


def init_param_names(cfg: ViTConfig) -> list:
    names = ["patch.w", "patch.b", "pos"]
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        names += [b + n for n in ("ln1.g", "ln1.b", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")]
        names += [b + f"attn.{w}{n}" for n in ("q", "k", "v", "o") for w in ("w", "b")]
    return names + ["ln_f.g", "ln_f.b", *DECODER_KEYS]


def backbone_shapes(cfg: ViTConfig) -> dict:
    """Weight shapes by name, without allocating (used for counting large configs)."""
    d, hid, pp = cfg.d_model, cfg.d_model * cfg.mlp_ratio, cfg.patch_size * cfg.patch_size
    shapes = {"patch.w": (cfg.patch_dim, d), "patch.b": (d,), "pos": (cfg.n_tokens, d)}
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        for n in ("ln1.g", "ln1.b", "ln2.g", "ln2.b", "mlp.b2"):
            shapes[b + n] = (d,)
        shapes[b + "mlp.w1"], shapes[b + "mlp.b1"], shapes[b + "mlp.w2"] = (d, hid), (hid,), (hid, d)
        for n in ("q", "k", "v", "o"):
            shapes[b + f"attn.w{n}"], shapes[b + f"attn.b{n}"] = (d, d), (d,)
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, pp), "head.b": (pp,)})
    return shapes


def decode_mask(tokens, head_w, head_b, cfg: ViTConfig):
    """Linear head per token -> ``p*p`` logits, tiled back onto the ``s x s`` image grid."""
    tokens = ad.as_variable(tokens)
    nb = tokens.shape[0]
    g, ps = cfg.grid, cfg.patch_size
    t = ad.add(ad.matmul(tokens, head_w), head_b)
    t = ad.transpose(ad.reshape(t, (nb, g, g, ps, ps)), (0, 1, 3, 2, 4))
    return ad.reshape(t, (nb, cfg.image_size, cfg.image_size))


# ------------------------------------------------------------ losses, metrics


class MaskError(ValueError):
    pass


def _check_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0) | (mask == 1)):
        raise MaskError("mask must be binary (0/1)")
    return mask


def bce_loss(logits, mask):
    return ad.bce_with_logits(logits, _check_binary(mask))


def dice_loss(probs, mask, eps: float = 1e-6):
    return ad.dice_loss(probs, _check_binary(mask), eps)


def total_loss(logits, mask):
    """``bce + dice``; returns ``(total, bce, dice)`` variables."""
    mask = _check_binary(mask)
    bce = ad.bce_with_logits(logits, mask)
    dice = ad.dice_loss(ad.sigmoid(logits), mask)
    return ad.add(bce, dice), bce, dice


def _pair(pred, gt):
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise MaskError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def dsc_metric(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


def iou(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    return 1.0 if union == 0 else float(np.logical_and(pred, gt).sum() / union)


def miou_metric(pred, gt) -> float:
    """Mean of foreground and background IoU."""
    pred, gt = _pair(pred, gt)
    return 0.5 * (iou(pred, gt) + iou(~pred, ~gt))


def binarize(logits, threshold: float = 0.5) -> np.ndarray:
    return ad._sigmoid(np.asarray(logits, dtype=np.float64)) > threshold


def perturb_box(box, magnitude: int, rng: np.random.Generator, image_size: int) -> tuple:
    """Shift each coordinate by an independent integer in ``[-m, m]``; clamp to the image."""
    if magnitude < 0:
        raise ValueError("perturbation magnitude must be >= 0")
    box = np.asarray(box, dtype=np.int64)
    if magnitude == 0:
        return tuple(int(v) for v in box)
    shifted = np.clip(box + rng.integers(-magnitude, magnitude + 1, size=4), 0, image_size - 1)
    x0, x1 = sorted((int(shifted[0]), int(shifted[2])))
    y0, y1 = sorted((int(shifted[1]), int(shifted[3])))
    return x0, y0, x1, y1
