"""Flat ``key = value`` run configuration (TOML without tables)."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import ViTConfig
from .data import DatasetSpec
from .peft import AblationFlags, ConfigError, ablation_config
from .train import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class RunConfig:
    # encoder
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    heads: int = 4
    depth: int = 6
    mlp_ratio: int = 4
    # data
    domain: str = "target-inverted"
    samples: int = 200
    noise: float = 0.1
    data_seed: int = 3
    eval_samples: int = 100
    eval_seed: int = 4
    train_data: str = ""
    eval_data: str = ""
    # pretraining (source domain, whole backbone trainable)
    pretrain_domain: str = "source"
    pretrain_samples: int = 400
    pretrain_seed: int = 1
    pretrain_steps: int = 1000
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 8
    pretrain_weight_decay: float = 0.0
    # fine-tuning
    mode: str = "cobot"
    peft: str = "lora"
    flags: str = "cos,rm,hl"
    v: int = 4
    lora_targets: str = "q,v"
    linear_head: bool = False
    shared_base: bool = False
    steps: int = 500
    batch_size: int = 4
    lr: float = 3e-3
    weight_decay: float = 5e-5
    box_perturb: int = 5
    seed: int = 0
    backbone: str = ""
    # grids
    seeds: int = 5
    sweep_v: str = "4,8,16,32"

    def vit(self) -> ViTConfig:
        return ViTConfig(self.image_size, self.patch_size, self.d_model, self.heads, self.depth, self.mlp_ratio)

    def ablation_flags(self) -> AblationFlags:
        if self.mode != "cobot":
            return AblationFlags()
        return AblationFlags.parse(self.flags)

    def targets(self) -> tuple:
        return tuple(t.strip() for t in self.lora_targets.split(",") if t.strip())

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            box_perturb=self.box_perturb,
            seed=self.seed,
        )

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.pretrain_steps,
            batch_size=self.pretrain_batch_size,
            lr=self.pretrain_lr,
            weight_decay=self.pretrain_weight_decay,
            box_perturb=self.box_perturb,
            seed=self.pretrain_seed,
        )

    def train_spec(self) -> DatasetSpec:
        return DatasetSpec(self.domain, self.samples, self.image_size, self.data_seed, self.noise)

    def eval_spec(self) -> DatasetSpec:
        return DatasetSpec(self.domain, self.eval_samples, self.image_size, self.eval_seed, self.noise)

    def pretrain_spec(self) -> DatasetSpec:
        return DatasetSpec(self.pretrain_domain, self.pretrain_samples, self.image_size, self.pretrain_seed, self.noise)

    def replace(self, **changes) -> "RunConfig":
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return validate(dataclasses.replace(self, **changes))

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid config: {e}") from None
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for key, v in raw.items():
        if isinstance(v, dict):
            raise ConfigError(f"[{key}]: tables are not supported in a flat config")
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        want = types[key]
        if want == "float" and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        ok = {"int": int, "float": float, "str": str, "bool": bool}[want]
        if not isinstance(v, ok) or (want == "int" and isinstance(v, bool)):
            raise ConfigError(f"key {key!r} expects {want}, got {v!r}")
        values[key] = v
    return (base or RunConfig()).replace(**values)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise FileNotFoundError(f"cannot read config {path}: {e}") from e
    return parse(text)


def validate(cfg: RunConfig) -> RunConfig:
    cfg.vit()
    if cfg.mode not in ("freeze", "lightweight", "peft", "cobot"):
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    if cfg.peft not in ("lora", "adapter"):
        raise ConfigError(f"unknown peft kind {cfg.peft!r}")
    flags = AblationFlags.parse(cfg.flags)
    if cfg.v < 1:
        raise ConfigError("v must be positive")
    if cfg.mode == "cobot":
        ablation_config(flags, cfg.linear_head, cfg.shared_base)
        if flags.hl and cfg.v % 4:
            raise ConfigError(f"hypercomplex head needs v divisible by 4, got v={cfg.v}")
    bad = set(cfg.targets()) - {"q", "k", "v", "o"}
    if bad or not cfg.targets():
        raise ConfigError(f"lora_targets must be a non-empty subset of q,k,v,o, got {cfg.lora_targets!r}")
    try:
        sweep = [int(t) for t in cfg.sweep_v.split(",")]
    except ValueError:
        raise ConfigError(f"sweep_v must be a comma list of integers, got {cfg.sweep_v!r}") from None
    if any(v < 4 or v % 4 for v in sweep):
        raise ConfigError("sweep_v values must be positive multiples of 4 (the full row uses the hypercomplex head)")
    if cfg.seeds < 1:
        raise ConfigError("seeds must be >= 1")
    for spec in ("train_spec", "eval_spec", "pretrain_spec"):
        try:
            getattr(cfg, spec)()
        except ValueError as e:
            raise ConfigError(str(e)) from None
    return cfg
