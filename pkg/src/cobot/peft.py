"""LoRA / Adaptformer branches with cross-block coefficient orchestration.

A :class:`CobotGroup` owns every PEFT branch attached at one kind of site
(all query projections, all value projections, or all MLP-parallel adapters)
across the ``L`` encoder blocks. With coefficient sets enabled each branch's
``V``-dim hidden ``h`` is rescaled by two coefficient vectors before the
up-projection::

    delta_l = (h * (lambda_mc[l] + lm[l])) @ W_l.T @ up_l,    lm = S @ lambda_base

``lambda_mc`` is local to the block, ``lm`` mixes every block's base set
through the relation matrix ``S``, and ``W_l`` is the realified quaternion
head (block-diagonal left-multiplication matrices, orthogonal at init).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import hypercomplex as hc
from . import tensor_algebra as ta


class ConfigError(ValueError):
    pass


def component_rng(seed: int, *tags) -> np.random.Generator:
    """Independent RNG stream per (seed, component) so toggling one part never shifts another."""
    words = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        words.append(zlib.crc32(str(t).encode()) if not isinstance(t, int) else t & 0xFFFFFFFF)
    return np.random.default_rng(words)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    # torch's default for Linear / LoRA-A: a = sqrt(5) -> bound = 1 / sqrt(fan_in)
    bound = math.sqrt(6.0 / ((1.0 + 5.0) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class AblationFlags:
    cos: bool = False
    rm: bool = False
    hl: bool = False

    @classmethod
    def parse(cls, text: str | None) -> "AblationFlags":
        if text is None:
            return cls()
        items = {t.strip().lower() for t in text.split(",") if t.strip()}
        unknown = items - {"cos", "rm", "hl", "none"}
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        return cls(cos="cos" in items, rm="rm" in items, hl="hl" in items)

    @classmethod
    def full(cls) -> "AblationFlags":
        return cls(True, True, True)

    def label(self) -> str:
        on = [n for n in ("cos", "rm", "hl") if getattr(self, n)]
        return "+".join(on) if on else "baseline"


@dataclass(frozen=True)
class Wiring:
    """Resolved structure of a group's branch.

    head is one of ``"none"`` (plain PEFT), ``"identity"`` (fixed ``W = I``),
    ``"linear"`` (learnable ``V x V`` initialized to identity) or
    ``"hypercomplex"`` (quaternion-generated ``W``).
    """

    cos: bool
    train_rm: bool
    head: str
    shared_base: bool = False


def ablation_config(flags: AblationFlags, linear_head: bool = False, shared_base: bool = False) -> Wiring:
    if flags.rm and not flags.cos:
        raise ConfigError("the relation matrix mixes coefficient sets; RM requires CoS")
    if not flags.cos:
        return Wiring(cos=False, train_rm=False, head="hypercomplex" if flags.hl else "none")
    if flags.hl:
        head = "hypercomplex"
    else:
        head = "linear" if linear_head else "identity"
    return Wiring(cos=True, train_rm=flags.rm, head=head, shared_base=shared_base)


@dataclass
class LoraParams:
    beta: ad.Variable  # D x V down factor
    alpha: ad.Variable  # V x K up factor

    def hidden(self, x):
        return ad.matmul(x, self.beta)

    @property
    def up(self):
        return self.alpha

    def variables(self):
        return {"beta": self.beta, "alpha": self.alpha}


@dataclass
class AdapterParams:
    down: ad.Variable
    up_w: ad.Variable

    def hidden(self, x):
        return ad.relu(ad.matmul(x, self.down))

    @property
    def up(self):
        return self.up_w

    def variables(self):
        return {"down": self.down, "up": self.up_w}


@dataclass
class CobotBlock:
    """Branch of block ``index``: its PEFT factors plus its slot in the group's coefficient tables."""

    index: int
    peft: LoraParams | AdapterParams
    head: ad.Variable | None = None  # (V/4, 4) quaternions or (V, V) linear head
    group: "CobotGroup | None" = field(default=None, repr=False)

    @property
    def lambda_mc(self) -> np.ndarray:
        return self.group.lambda_mc.value[self.index]

    @property
    def lambda_base(self) -> np.ndarray:
        return self.group.lambda_base.value[self.index]

    def projection(self):
        """``V x V`` head applied after the coefficients, or ``None`` for identity/no head."""
        g = self.group
        if g.wiring.head == "hypercomplex":
            return ad.quaternion_weights(self.head)
        if g.wiring.head == "linear":
            return self.head
        return None


class CobotGroup:
    def __init__(self, name: str, kind: str, blocks: list, wiring: Wiring, hidden_dim: int, seed: int = 0):
        if kind not in ("lora", "adapter"):
            raise ConfigError(f"unknown PEFT kind {kind!r}")
        self.name = name
        self.kind = kind
        self.blocks = blocks
        self.wiring = wiring
        self.hidden_dim = hidden_dim
        n = len(blocks)
        for b in blocks:
            b.group = self
        self.lambda_mc = None
        self.lambda_base = None
        self.s = None
        if wiring.cos:
            self.lambda_mc = ad.parameter(np.zeros((n, hidden_dim)), f"{name}.lambda_mc")
            if not wiring.shared_base:
                self.lambda_base = ad.parameter(np.zeros((n, hidden_dim)), f"{name}.lambda_base")
            else:
                self.lambda_base = self.lambda_mc
            self.s = ad.Variable(np.eye(n), requires_grad=wiring.train_rm, name=f"{name}.S")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    # -- parameter bookkeeping

    def peft_variables(self) -> dict:
        out = {}
        for b in self.blocks:
            for k, v in b.peft.variables().items():
                out[f"{self.name}.{b.index}.{k}"] = v
        return out

    def cobot_variables(self, trainable_only: bool = False) -> dict:
        out = {}
        if self.wiring.cos:
            out[f"{self.name}.lambda_mc"] = self.lambda_mc
            if not self.wiring.shared_base:
                out[f"{self.name}.lambda_base"] = self.lambda_base
            if self.wiring.train_rm or not trainable_only:
                out[f"{self.name}.S"] = self.s
        if self.wiring.head in ("hypercomplex", "linear"):
            for b in self.blocks:
                out[f"{self.name}.{b.index}.head"] = b.head
        return out

    def relation_matrix(self) -> ta.RelationMatrix | None:
        return None if self.s is None else ta.RelationMatrix(self.s.value)

    def projection_weights(self, index: int) -> np.ndarray:
        w = self.blocks[index].projection()
        return np.eye(self.hidden_dim) if w is None else np.array(w.value)


def new_group(
    name: str,
    kind: str,
    n_blocks: int,
    d_in: int,
    d_out: int,
    hidden_dim: int,
    wiring: Wiring,
    seed: int,
) -> CobotGroup:
    if hidden_dim < 1:
        raise ConfigError("hidden dimension V must be positive")
    if wiring.head == "hypercomplex" and hidden_dim % 4:
        raise ConfigError(f"hypercomplex head needs V divisible by 4, got V={hidden_dim}")
    blocks = []
    for i in range(n_blocks):
        rng = component_rng(seed, "peft", name, i)
        down = kaiming_uniform(rng, d_in, (d_in, hidden_dim))
        up = rng.normal(0.0, 0.02, size=(hidden_dim, d_out))
        if kind == "lora":
            peft = LoraParams(ad.parameter(down, f"{name}.{i}.beta"), ad.parameter(up, f"{name}.{i}.alpha"))
        else:
            peft = AdapterParams(ad.parameter(down, f"{name}.{i}.down"), ad.parameter(up, f"{name}.{i}.up"))
        head = None
        if wiring.head == "hypercomplex":
            bank = hc.QuaternionBank.random(hidden_dim, component_rng(seed, "quat", name, i))
            head = ad.parameter(bank.as_array(), f"{name}.{i}.head")
        elif wiring.head == "linear":
            head = ad.parameter(np.eye(hidden_dim), f"{name}.{i}.head")
        blocks.append(CobotBlock(i, peft, head))
    return CobotGroup(name, kind, blocks, wiring, hidden_dim, seed)


def compute_lm_sets(group: CobotGroup):
    """Cross-block coefficient sets: row ``l`` is ``sum_k S[l, k] * lambda_base[k]``."""
    if not group.wiring.cos:
        raise ConfigError(f"group {group.name!r} has no coefficient sets")
    return ad.slice_mix(group.s, group.lambda_base)


def cobot_delta(x, block: CobotBlock, lm=None):
    """Branch output added to the frozen sublayer output for tokens ``x`` (``... x D``).

    ``lm`` is the block's row of :func:`compute_lm_sets` (a ``V`` vector).
    Without coefficient sets this is the plain PEFT delta.
    """
    x = ad.as_variable(x)
    d_in = block.peft.variables()["beta" if isinstance(block.peft, LoraParams) else "down"].shape[0]
    if x.shape[-1] != d_in:
        raise ConfigError(f"branch expects width {d_in}, got {x.shape[-1]}")
    h = block.peft.hidden(x)
    group = block.group
    if group is None or not group.wiring.cos:
        w = block.projection() if group is not None else None
        if w is not None:
            h = ad.matmul(h, ad.transpose(w))
        return ad.matmul(h, block.peft.up)
    coeff = ad.getitem(group.lambda_mc, block.index)
    if lm is not None:
        lm = ad.as_variable(lm)
        if lm.shape != (group.hidden_dim,):
            raise ConfigError(f"lm vector must have length {group.hidden_dim}, got {lm.shape}")
        coeff = ad.add(coeff, lm)
    hs = ad.scale_columns(h, coeff)
    w = block.projection()
    if w is not None:
        hs = ad.matmul(hs, ad.transpose(w))
    return ad.matmul(hs, block.peft.up)


class PeftAttachment:
    """All groups attached to one encoder, plus the per-forward cache of mixed sets."""

    def __init__(self, kind: str, groups: dict, flags: AblationFlags, wiring: Wiring):
        self.kind = kind
        self.groups = groups
        self.flags = flags
        self.wiring = wiring
        self._lm = {}

    def begin_forward(self) -> None:
        self._lm = {name: compute_lm_sets(g) for name, g in self.groups.items() if g.wiring.cos}

    def delta(self, site: str, index: int, x):
        group = self.groups.get(site)
        if group is None:
            return None
        lm = None
        if site in self._lm:
            lm = ad.getitem(self._lm[site], index)
        return cobot_delta(x, group.blocks[index], lm)

    def peft_variables(self) -> dict:
        out = {}
        for g in self.groups.values():
            out.update(g.peft_variables())
        return out

    def cobot_variables(self, trainable_only: bool = False) -> dict:
        out = {}
        for g in self.groups.values():
            out.update(g.cobot_variables(trainable_only))
        return out

    def relation_matrices(self) -> dict:
        return {n: g.relation_matrix() for n, g in self.groups.items() if g.s is not None}


def attach(
    kind: str,
    n_blocks: int,
    d_model: int,
    hidden_dim: int,
    flags: AblationFlags,
    seed: int,
    mlp_hidden: int | None = None,
    lora_targets=("q", "v"),
    linear_head: bool = False,
    shared_base: bool = False,
) -> PeftAttachment:
    """Build the PEFT groups for an encoder: LoRA on attention projections or adapters beside the MLP."""
    wiring = ablation_config(flags, linear_head=linear_head, shared_base=shared_base)
    groups = {}
    if kind == "lora":
        for t in lora_targets:
            if t not in ("q", "k", "v", "o"):
                raise ConfigError(f"unknown LoRA target {t!r}")
            groups[t] = new_group(t, "lora", n_blocks, d_model, d_model, hidden_dim, wiring, seed)
    elif kind == "adapter":
        groups["adapter"] = new_group("adapter", "adapter", n_blocks, d_model, d_model, hidden_dim, wiring, seed)
    else:
        raise ConfigError(f"unknown PEFT kind {kind!r}")
    return PeftAttachment(kind, groups, flags, wiring)


def count_cobot_formula(hidden_dim: int, n_blocks: int, attachments_per_block: int, n_groups: int, flags: AblationFlags, linear_head: bool = False) -> int:
    """Closed-form count of coefficient-set, relation-matrix and head parameters."""
    sites = attachments_per_block * n_blocks
    total = 2 * hidden_dim * sites if flags.cos else 0
    if flags.rm:
        total += n_blocks * n_blocks * n_groups
    if flags.hl:
        total += hidden_dim * sites
    elif linear_head and flags.cos:
        total += hidden_dim * hidden_dim * sites
    return total
