"""Verification suites behind ``algebra-check`` and ``gradcheck``.

Each check yields a :class:`CheckResult` (one JSON line in the report).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import hypercomplex as hc
from . import tensor_algebra as ta
from .backbone import SegModel, ViTConfig, init_backbone, total_loss
from .peft import AblationFlags, attach, cobot_delta, component_rng


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.max_err <= self.tol) if self.tol > 0 else self.max_err == 0.0

    def to_json(self) -> str:
        err = self.max_err if math.isfinite(self.max_err) else str(self.max_err)
        return json.dumps({"name": self.name, "max_err": err, "tol": self.tol, "pass": self.passed, "seconds": round(self.seconds, 4)})


def report_jsonl(results) -> str:
    return "".join(r.to_json() + "\n" for r in results)


def _timed(name, tol, fn) -> CheckResult:
    t0 = time.perf_counter()
    err = float(fn())
    return CheckResult(name, err, tol, time.perf_counter() - t0)


# ------------------------------------------------------------ algebra


def _q(*c) -> hc.Hypercomplex:
    return hc.Hypercomplex(np.array(c, dtype=np.float64))


ONE, J1, J2, J3 = _q(1, 0, 0, 0), _q(0, 1, 0, 0), _q(0, 0, 1, 0), _q(0, 0, 0, 1)


def _dist(a: hc.Hypercomplex, b: hc.Hypercomplex) -> float:
    return float(np.max(np.abs(a.components - b.components)))


def check_identity(rng, n=1000) -> float:
    err = 0.0
    for _ in range(n):
        q = hc.Hypercomplex(rng.standard_normal(4))
        err = max(err, _dist(ONE * q, q), _dist(q * ONE, q))
    return err


def check_unit_relations() -> float:
    neg1 = -1.0 * ONE
    cases = [
        (J1 * J1, neg1), (J2 * J2, neg1), (J3 * J3, neg1),
        (J1 * J2, J3), (J2 * J1, -1.0 * J3),
        (J2 * J3, J1), (J3 * J2, -1.0 * J1),
        (J3 * J1, J2), (J1 * J3, -1.0 * J2),
        (J1 * J2 * J3, neg1),
    ]
    return max(_dist(a, b) for a, b in cases)


def _triples(rng, n):
    return [tuple(hc.Hypercomplex(rng.standard_normal(4)) for _ in range(3)) for _ in range(n)]


def check_associativity(triples) -> float:
    err = 0.0
    for a, b, c in triples:
        scale = hc.norm(a) * hc.norm(b) * hc.norm(c)
        err = max(err, _dist((a * b) * c, a * (b * c)) / scale)
    return err


def check_norm_multiplicative(triples) -> float:
    err = 0.0
    for a, b, _ in triples:
        na, nb = hc.norm(a), hc.norm(b)
        err = max(err, abs(hc.norm(a * b) - na * nb) / (na * nb))
    return err


def check_left_mul_faithful(rng, n=2000) -> float:
    """``M(a) b == a ⊗ b`` and ``M(a ⊗ b) == M(a) M(b)`` for unit quaternions."""
    err = 0.0
    for _ in range(n):
        a, b = hc.random_unit_quaternion(rng), hc.random_unit_quaternion(rng)
        ma = hc.left_mul_matrix(a)
        err = max(err, float(np.max(np.abs(ma @ b.components - (a * b).components))))
        err = max(err, float(np.max(np.abs(hc.left_mul_matrix(a * b) - ma @ hc.left_mul_matrix(b)))))
    return err


def check_conjugate(rng, n=1000) -> float:
    err = 0.0
    for _ in range(n):
        a = hc.Hypercomplex(rng.standard_normal(4))
        n2 = hc.norm(a) ** 2
        err = max(err, _dist(a * hc.conjugate(a), n2 * ONE) / n2)
    return err


def _tensor_pairs(rng, n=50, max_dims=(5, 5, 6)):
    pairs = []
    for _ in range(n):
        n1, n2, n3 = (int(rng.integers(1, m + 1)) for m in max_dims)
        n4 = int(rng.integers(1, max_dims[1] + 1))
        pairs.append((rng.standard_normal((n1, n2, n3)), rng.standard_normal((n2, n4, n3))))
    return pairs


def check_tproduct_equivalence(pairs) -> float:
    """Block-circulant path vs DFT transform-domain path, relative to the result's scale."""
    err = 0.0
    for a, b in pairs:
        c1 = ta.t_product(a, b)
        c2 = ta.transform_domain_tproduct(a, b)
        err = max(err, float(np.max(np.abs(c1 - c2))) / max(1.0, float(np.max(np.abs(c1)))))
    return err


def check_tproduct_identity(rng, n=20) -> float:
    err = 0.0
    for _ in range(n):
        n1, n2, n3 = (int(x) for x in rng.integers(1, 6, size=3))
        a = rng.standard_normal((n1, n2, n3))
        err = max(err, float(np.max(np.abs(ta.t_product(a, ta.identity_tensor(n2, n3)) - a))))
    return err


def check_mode3_invertible(rng, n=20) -> float:
    err = 0.0
    for _ in range(n):
        n3 = int(rng.integers(2, 8))
        t = rng.standard_normal((3, 4, n3))
        s = np.eye(n3) + 0.3 * rng.standard_normal((n3, n3)) / math.sqrt(n3)
        back = ta.mode3_product(ta.mode3_product(t, s), np.linalg.inv(s))
        err = max(err, float(np.max(np.abs(back - t))))
    return err


def check_slice_mix(rng, n=20) -> float:
    """Vector mixing equals the mode-3 product on the stack of diagonal slices."""
    err = 0.0
    for _ in range(n):
        L, V = int(rng.integers(1, 8)), int(rng.integers(1, 9))
        s, base = rng.standard_normal((L, L)), rng.standard_normal((L, V))
        full = ta.mode3_product(ta.diagonal_stack(base), s)
        diags = np.stack([np.diag(full[:, :, l]) for l in range(L)])
        err = max(err, float(np.max(np.abs(ta.mix_diagonals(s, base) - diags))))
    return err


def check_orthogonal_init(rng) -> float:
    err = 0.0
    for v in (4, 8, 16, 32, 64):
        for _ in range(20):
            w = hc.build_projection_weights(hc.QuaternionBank.random(v, rng), v)
            err = max(err, float(np.max(np.abs(w.T @ w - np.eye(v)))))
    return err


def algebra_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    triples = _triples(rng, 10_000)
    pairs = _tensor_pairs(rng)
    return [
        _timed("hypercomplex.identity", 0.0, lambda: check_identity(rng)),
        _timed("hypercomplex.unit_relations", 0.0, check_unit_relations),
        _timed("hypercomplex.associativity", 1e-12, lambda: check_associativity(triples)),
        _timed("hypercomplex.norm_multiplicative", 1e-12, lambda: check_norm_multiplicative(triples)),
        _timed("hypercomplex.left_mul_faithful", 1e-14, lambda: check_left_mul_faithful(rng)),
        _timed("hypercomplex.conjugate_norm", 1e-12, lambda: check_conjugate(rng)),
        _timed("tensor.tproduct_equivalence", 1e-9, lambda: check_tproduct_equivalence(pairs)),
        _timed("tensor.tproduct_identity", 1e-12, lambda: check_tproduct_identity(rng)),
        _timed("tensor.mode3_invertible", 1e-10, lambda: check_mode3_invertible(rng)),
        _timed("tensor.slice_mix_vs_mode3", 1e-14, lambda: check_slice_mix(rng)),
        _timed("hl.orthogonal_init", 1e-10, lambda: check_orthogonal_init(rng)),
    ]


# ------------------------------------------------------------ gradients

TOY = ViTConfig(image_size=8, patch_size=4, d_model=8, heads=2, depth=2, mlp_ratio=2)


def _randomize(model: SegModel, rng) -> None:
    """Move every branch/coefficient/head away from its (degenerate) init so all gradients are informative."""
    for name, v in model.cobot_params(trainable_only=False).items():
        if name.endswith(".S"):
            n = v.shape[0]
            v.value = np.eye(n) + 0.3 * rng.standard_normal((n, n))
        else:
            v.value = rng.standard_normal(v.shape)
    for v in model.peft_params().values():
        v.value = 0.5 * rng.standard_normal(v.shape)
    for k in ("head.w", "head.b"):
        model.params[k].value = 0.5 * rng.standard_normal(model.params[k].shape)


def toy_model(kind: str, flags: AblationFlags, seed: int, linear_head: bool = False) -> SegModel:
    att = attach(kind, TOY.depth, TOY.d_model, 4, flags, seed, linear_head=linear_head)
    model = SegModel(TOY, init_backbone(TOY, seed), att)
    _randomize(model, component_rng(seed, "gradcheck"))
    return model


def _toy_batch(seed: int):
    rng = component_rng(seed, "gradcheck-batch")
    images = rng.uniform(0, 1, size=(2, TOY.image_size, TOY.image_size))
    masks = (rng.uniform(size=images.shape) > 0.5).astype(np.float64)
    boxes = np.array([[1, 1, 5, 6], [0, 2, 7, 7]])
    return images, masks, boxes


def model_gradcheck(model: SegModel, seed: int, prefix: str, h: float = 1e-4, tol: float = 1e-5, stencil: int = 4) -> ad.GradCheckReport:
    images, masks, boxes = _toy_batch(seed)
    params = {**model.decoder_params(), **model.peft_params(), **model.cobot_params(trainable_only=True)}
    for v in params.values():
        v.requires_grad = True

    def f():
        return total_loss(model.forward(images, boxes), masks)[0]

    names = [f"{prefix}.{k}" for k in params]
    return ad.grad_check(f, list(params.values()), h=h, tol=tol, names=names, stencil=stencil)


def op_gradcheck(seed: int, h: float = 1e-6, tol: float = 1e-5) -> ad.GradCheckReport:
    """Each operator alone, composed with a random linear readout so the loss is scalar."""
    rng = np.random.default_rng(seed)
    report = ad.GradCheckReport()

    def readout(shape):
        return ad.as_variable(rng.standard_normal(shape))

    def check(name, build, *arrays):
        vs = [ad.parameter(a, f"{name}.in{i}") for i, a in enumerate(arrays)]
        out_shape = build(*vs).shape
        r = readout(out_shape)
        f = lambda: ad.mean(ad.hadamard(build(*vs), r))  # noqa: E731
        report.extend(ad.grad_check(f, vs, h=h, tol=tol, names=[f"op.{name}.{i}" for i in range(len(vs))]))

    x = rng.standard_normal((2, 3, 4))
    relu_in = rng.standard_normal((2, 3, 4))
    relu_in += np.sign(relu_in) * 0.1  # keep away from the kink
    check("matmul", ad.matmul, x, rng.standard_normal((4, 5)))
    check("matmul_batched", ad.matmul, x, rng.standard_normal((2, 4, 3)))
    check("add_broadcast", ad.add, x, rng.standard_normal(4))
    check("sub", ad.sub, x, rng.standard_normal((2, 3, 4)))
    check("hadamard", ad.hadamard, x, rng.standard_normal((2, 3, 4)))
    check("scale_columns", ad.scale_columns, x, rng.standard_normal(4))
    check("relu", ad.relu, relu_in)
    check("gelu", ad.gelu, x)
    check("sigmoid", ad.sigmoid, x)
    check("sigmoid_matmul", lambda a, b: ad.sigmoid(ad.matmul(a, b)), x, rng.standard_normal((4, 3)))
    check("softmax_rows", ad.softmax_rows, x)
    check("layernorm", ad.layernorm, x)
    check("transpose", lambda a: ad.transpose(a, (0, 2, 1)), x)
    check("reshape", lambda a: ad.reshape(a, (6, 4)), x)
    check("getitem", lambda a: ad.getitem(a, 1), rng.standard_normal((3, 4)))
    check("slice_mix", ad.slice_mix, rng.standard_normal((5, 5)), rng.standard_normal((5, 4)))
    check("quaternion_weights", ad.quaternion_weights, rng.standard_normal((3, 4)))
    target = (rng.uniform(size=(2, 4, 4)) > 0.5).astype(np.float64)
    lg = [ad.parameter(rng.standard_normal((2, 4, 4)), "logits")]
    report.extend(ad.grad_check(lambda: ad.bce_with_logits(lg[0], target), lg, h=h, tol=tol, names=["op.bce_with_logits"]))
    report.extend(ad.grad_check(lambda: ad.dice_loss(ad.sigmoid(lg[0]), target), lg, h=h, tol=tol, names=["op.dice_sigmoid"]))
    return report


def block_delta_gradcheck(seed: int, h: float = 1e-6, tol: float = 1e-5) -> ad.GradCheckReport:
    """A single full branch (LoRA and adapter) with random coefficients, mixed set and head."""
    report = ad.GradCheckReport()
    for kind in ("lora", "adapter"):
        att = attach(kind, 3, 4, 4, AblationFlags.full(), seed)
        group = next(iter(att.groups.values()))
        rng = component_rng(seed, "block-delta", kind)
        group.lambda_mc.value = rng.standard_normal(group.lambda_mc.shape)
        group.lambda_base.value = rng.standard_normal(group.lambda_base.shape)
        group.s.value = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
        x = rng.standard_normal((2, 4))
        r = ad.as_variable(rng.standard_normal((2, 4)))
        block = group.blocks[1]
        vs = [group.lambda_mc, group.lambda_base, group.s, block.head, *block.peft.variables().values()]

        def f():
            lm = ad.getitem(ad.slice_mix(group.s, group.lambda_base), block.index)
            return ad.mean(ad.hadamard(cobot_delta(x, block, lm), r))

        names = [f"block.{kind}.{v.name}" for v in vs]
        report.extend(ad.grad_check(f, vs, h=h, tol=tol, names=names))
    return report


def gradcheck_suite(seed: int = 0, h: float = 1e-6, tol: float = 1e-5, h_model: float = 1e-4) -> ad.GradCheckReport:
    """Operators and single branches: two-point central differences at ``h``.

    Whole toy models: the end-to-end loss has gradient entries near 1e-7
    where a two-point difference loses ~1e-5 relative to rounding at any
    step, so those use the four-point central stencil at ``h_model``.
    """
    report = op_gradcheck(seed, h, tol)
    report.extend(block_delta_gradcheck(seed, h, tol))
    full = AblationFlags.full()
    report.extend(model_gradcheck(toy_model("lora", full, seed), seed, "lora_full", h_model, tol))
    report.extend(model_gradcheck(toy_model("adapter", full, seed), seed, "adapter_full", h_model, tol))
    lin = AblationFlags(cos=True, rm=True, hl=False)
    report.extend(model_gradcheck(toy_model("lora", lin, seed, linear_head=True), seed, "lora_linear_head", h_model, tol))
    return report
