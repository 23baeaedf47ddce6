"""Minimal reverse-mode autodiff over float64 numpy arrays.

Operations record onto the active :class:`Tape` only when some input requires a
gradient, so an inference pass (no tape, or only frozen inputs) costs nothing
extra. The operator set is closed: every pullback below is written by hand and
covered by the finite-difference checker at the bottom of this module.

    with Tape() as tape:
        loss = mean(hadamard(x, x))
    tape.backward(loss)
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import hypercomplex as hc
from . import tensor_algebra as ta


class AutodiffError(ValueError):
    pass


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Variable:
    __slots__ = ("value", "_grad", "requires_grad", "name", "parents", "pullback", "node_id", "op")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.parents: tuple = ()
        self.pullback = None
        self.node_id = -1
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = None if g is None else np.asarray(g, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Variable{tag}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def parameter(value, name: str | None = None) -> Variable:
    return Variable(np.array(value, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Ordered record of operations. Backward walks the record in exact reverse."""

    def __init__(self):
        self.nodes: list[Variable] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self
        return False

    def record(self, out: Variable, parents: Sequence[Variable], pullback: Callable, op: str) -> Variable:
        out.parents = tuple(parents)
        out.pullback = pullback
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out.op = op
        self.nodes.append(out)
        return out

    def backward(self, loss: Variable) -> None:
        if loss.value.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        cot: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        touched: dict[int, Variable] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = cot.get(id(node))
            if g is None:
                continue
            grads = node.pullback(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in cot:
                    cot[key] = cot[key] + pg
                else:
                    cot[key] = pg
                    touched[key] = parent
        for key, var in touched.items():
            g = cot[key]
            # cotangents are never mutated in place, so they can be stored without copying
            if var._grad is None:
                var._grad = g
            else:
                var._grad = var._grad + g


def backward(loss: Variable, tape: Tape | None = None) -> None:
    tape = tape or active_tape()
    if tape is None:
        raise AutodiffError("no tape to run backward on")
    tape.backward(loss)


def _emit(value, parents: Sequence[Variable], pullback: Callable, op: str) -> Variable:
    out = Variable(value)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, pullback, op)
    else:
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise AutodiffError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- forward ops


def matmul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise AutodiffError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")

    flat = bv.ndim == 2 and av.ndim > 2

    def pullback(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ bv.T).reshape(av.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    if flat:
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))
    else:
        out = av @ bv
    return _emit(out, (a, b), pullback, "matmul")


def add(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def hadamard(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _check_broadcast(a.value, b.value, "hadamard")
    av, bv = a.value, b.value
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "hadamard",
    )


def scale(a, c: float) -> Variable:
    a = as_variable(a)
    c = float(c)
    return _emit(a.value * c, (a,), lambda g: (g * c,), "scale")


def scale_columns(h, lam) -> Variable:
    """``h @ diag(lam)``: multiply the last axis of ``h`` by a coefficient vector."""
    h, lam = as_variable(h), as_variable(lam)
    hv, lv = h.value, lam.value
    if lv.ndim != 1 or hv.shape[-1] != lv.shape[0]:
        raise AutodiffError(f"scale_columns: {hv.shape} with coefficient vector {lv.shape}")

    def pullback(g):
        gl = (g * hv).reshape(-1, lv.shape[0]).sum(axis=0) if lam.requires_grad else None
        return g * lv, gl

    return _emit(hv * lv, (h, lam), pullback, "scale_columns")


def relu(x) -> Variable:
    x = as_variable(x)
    mask = x.value > 0
    return _emit(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Variable:
    """Tanh-approximated GELU."""
    x = as_variable(x)
    xv = x.value
    x2 = xv * xv
    t = x2 * 0.044715
    t += 1.0
    t *= xv
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xv
    out *= 0.5

    def pullback(g):
        # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 * 0.044715 x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= xv
        d *= (0.5 * _GELU_C) * (1.0 - t * t)
        d += 0.5 * (1.0 + t)
        d *= g
        return (d,)

    return _emit(out, (x,), pullback, "gelu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Variable:
    x = as_variable(x)
    y = _sigmoid(x.value)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softmax_rows(x) -> Variable:
    x = as_variable(x)
    y = x.value - x.value.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def pullback(g):
        gx = g * y
        gx -= y * gx.sum(axis=-1, keepdims=True)
        return (gx,)

    return _emit(y, (x,), pullback, "softmax_rows")


def layernorm(x, eps: float = 1e-12) -> Variable:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    x = as_variable(x)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def pullback(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit(y, (x,), pullback, "layernorm")


def mean(x) -> Variable:
    x = as_variable(x)
    n = x.value.size
    shape = x.shape
    return _emit(np.array(x.value.mean()).reshape(1, 1, 1), (x,), lambda g: (np.full(shape, g.item() / n),), "mean")


def reshape(x, shape) -> Variable:
    x = as_variable(x)
    old = x.shape
    return _emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Variable:
    x = as_variable(x)
    axes = tuple(reversed(range(x.value.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, index) -> Variable:
    """Basic (non-fancy) indexing, e.g. picking one row of a stacked parameter."""
    x = as_variable(x)
    shape = x.shape

    def pullback(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _emit(x.value[index], (x,), pullback, "getitem")


def slice_mix(s, base) -> Variable:
    """Cross-block coefficient mixing ``S @ base`` (mode-3 product on diagonal slices)."""
    s, base = as_variable(s), as_variable(base)
    sv, bv = s.value, base.value
    if sv.ndim != 2 or bv.ndim != 2 or sv.shape[1] != bv.shape[0]:
        raise AutodiffError(f"slice_mix: relation matrix {sv.shape} vs coefficient sets {bv.shape}")
    out = ta.mix_diagonals(sv, bv)
    return _emit(out, (s, base), lambda g: (g @ bv.T, sv.T @ g), "slice_mix")


def quaternion_weights(bank) -> Variable:
    """``(V/4, 4)`` quaternion components -> block-diagonal ``V x V`` head."""
    bank = as_variable(bank)
    if bank.value.ndim != 2 or bank.value.shape[1] != 4:
        raise AutodiffError(f"quaternion_weights: bank must be (k, 4), got {bank.shape}")
    w = hc.projection_weights_from_array(bank.value)
    return _emit(w, (bank,), lambda g: (hc.projection_weights_pullback(g),), "quaternion_weights")


def bce_with_logits(logits, target) -> Variable:
    """Mean binary cross-entropy, ``max(x,0) - x t + log(1 + exp(-|x|))``."""
    logits = as_variable(logits)
    t = np.asarray(target.value if isinstance(target, Variable) else target, dtype=np.float64)
    x = logits.value
    if x.shape != t.shape:
        raise AutodiffError(f"bce_with_logits: logits {x.shape} vs target {t.shape}")
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    return _emit(
        np.array(loss.mean()).reshape(1, 1, 1),
        (logits,),
        lambda g: (g.item() * (_sigmoid(x) - t) / n,),
        "bce_with_logits",
    )


def dice_loss(probs, target, eps: float = 1e-6) -> Variable:
    """Soft dice loss per sample over the last two axes, averaged over leading axes."""
    probs = as_variable(probs)
    p = probs.value
    t = np.asarray(target.value if isinstance(target, Variable) else target, dtype=np.float64)
    if p.shape != t.shape or p.ndim < 2:
        raise AutodiffError(f"dice_loss: probs {p.shape} vs target {t.shape}")
    axes = (-2, -1)
    inter = (p * t).sum(axis=axes, keepdims=True)
    denom = p.sum(axis=axes, keepdims=True) + t.sum(axis=axes, keepdims=True) + eps
    ratio = (2 * inter + eps) / denom
    count = ratio.size

    def pullback(g):
        # d ratio / d p = 2 t / denom - (2 inter + eps) / denom^2
        d = 2 * t / denom - (2 * inter + eps) / denom**2
        return (-g.item() * d / count,)

    return _emit(np.array(1.0 - ratio.mean()).reshape(1, 1, 1), (probs,), pullback, "dice_loss")


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool
    location: str | None = None

    def to_json(self) -> str:
        err = self.max_rel_err if math.isfinite(self.max_rel_err) else str(self.max_rel_err)
        d = {"name": self.name, "max_rel_err": err, "pass": self.passed}
        if self.location:
            d["location"] = self.location
        return json.dumps(d)


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.entries)

    def extend(self, other: "GradCheckReport") -> None:
        self.entries.extend(other.entries)


def _scalar(loss) -> float:
    v = loss.value if isinstance(loss, Variable) else np.asarray(loss)
    return float(np.asarray(v).reshape(-1)[0])


def grad_check(
    f: Callable[[], Variable],
    inputs: Sequence[Variable],
    h: float = 1e-6,
    tol: float = 1e-5,
    names: Sequence[str] | None = None,
    floor: float = 1e-12,
    stencil: int = 2,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` takes no arguments and reads the current ``.value`` of each input.
    The step for entry ``x`` is ``h * (1 + |x|)``. The error per entry is
    ``|g_ad - g_fd| / (|g_ad| + |g_fd| + floor)``; the maximum is reported
    for every input. ``stencil=4`` uses the fourth-order central formula
    ``(-f(x+2s) + 8f(x+s) - 8f(x-s) + f(x-2s)) / 12s``, which tolerates a
    larger step and so loses less to rounding on small gradient entries.
    """
    if not 1e-8 <= h <= 1e-4:
        raise AutodiffError(f"finite-difference step {h} outside [1e-8, 1e-4]")
    if stencil not in (2, 4):
        raise AutodiffError(f"stencil must be 2 or 4, got {stencil}")
    names = list(names) if names is not None else [v.name or f"input{i}" for i, v in enumerate(inputs)]
    for v in inputs:
        v.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.isfinite(_scalar(loss)):
        return GradCheckReport([GradCheckEntry(n, float("nan"), False, "loss") for n in names])
    tape.backward(loss)
    report = GradCheckReport()
    for name, var in zip(names, inputs):
        g_ad = var.grad.copy()
        if not np.all(np.isfinite(g_ad)):
            bad = np.argwhere(~np.isfinite(g_ad))[0]
            report.entries.append(GradCheckEntry(name, float("nan"), False, f"autodiff grad at {tuple(bad)}"))
            continue
        g_fd = np.zeros_like(var.value)
        worst, worst_at, location = 0.0, None, None
        flat = var.value.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            step = h * (1.0 + abs(x0))
            offsets = (1, -1) if stencil == 2 else (1, -1, 2, -2)
            vals = []
            for k in offsets:
                flat[i] = x0 + k * step
                vals.append(_scalar(f()))
            flat[i] = x0
            if not all(np.isfinite(vals)):
                location = f"loss at entry {np.unravel_index(i, var.shape)}"
                break
            if stencil == 2:
                g_fd.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * step)
            else:
                g_fd.reshape(-1)[i] = (8 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12 * step)
        if location is not None:
            report.entries.append(GradCheckEntry(name, float("nan"), False, location))
            continue
        rel = np.abs(g_ad - g_fd) / (np.abs(g_ad) + np.abs(g_fd) + floor)
        if rel.size:
            k = int(np.argmax(rel))
            worst, worst_at = float(rel.reshape(-1)[k]), np.unravel_index(k, var.shape)
        report.entries.append(
            GradCheckEntry(name, worst, worst < tol, None if worst < tol else f"entry {tuple(int(j) for j in worst_at)}")
        )
    for v in inputs:
        v.zero_grad()
    return report
