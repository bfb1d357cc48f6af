"""Experiment configuration: typed sections, YAML loading, dotted overrides, fingerprints."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train_users: int = 8
    n_heldout_users: int = 4
    per_user: int = 64
    n_prior: int = 1024
    image_size: int = 16
    min_style_distance: float = 0.15
    # per-sample spread of a user's style around its centre; texture class is never jittered
    style_jitter: float = 0.03
    max_rejection_attempts: int = 10_000


@dataclass
class BackboneConfig:
    blocks: int = 4
    d_model: int = 64
    heads: int = 4
    d_mod: int = 64
    d_pool: int = 32
    mlp_hidden: int = 128
    patch_size: int = 4
    channels: int = 3
    image_size: int = 16
    modulate_image_tokens: bool = False

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size={self.image_size} not divisible by "
                              f"patch_size={self.patch_size}")
        if self.blocks < 1:
            raise ConfigError("backbone needs at least one block")

    @property
    def n_image_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class AdapterConfig:
    tokens: int = 8          # rows M of a user embedding
    d_user: int = 64         # width D_u of a user embedding row
    blocks: int = 3
    heads: int = 4
    mlp_hidden: int = 128
    init_std: float = 0.02
    use_shared: bool = True
    use_distinct: bool = True
    prompt_modulation: bool = True
    dispersion_flatten: str = "concat"   # or "token_mean"
    # adapter outputs pass through bound * tanh(x / bound); null leaves them unbounded
    delta_bound: float | None = 1.0


@dataclass
class LossConfig:
    # 0.1 against a per-image sum of squares, rescaled to the element-mean flow loss
    lambda_shared: float = 1.3e-4
    lambda_distinct: float = 1.3e-4
    use_dispersion: bool = True

    def weights(self) -> tuple[float, float]:
        if not self.use_dispersion:
            return 0.0, 0.0
        return self.lambda_shared, self.lambda_distinct


@dataclass
class StageConfig:
    stage: int = 0
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    mode: str | None = None
    cond_dropout: float = 0.0
    log_every: int = 50
    bank_subset: int | None = None


@dataclass
class SamplerConfig:
    steps: int = 50
    seed: int = 0


@dataclass
class EvalConfig:
    prompts: int = 9
    seeds: int = 3
    history_lengths: list[int] = field(default_factory=lambda: [2, 4, 8, 16, 32])
    history_modes: list[str] = field(default_factory=lambda: ["linear_combination", "direct"])
    history_seeds: int = 3
    history_users: int = 4


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    stage0: StageConfig = field(default_factory=lambda: StageConfig(stage=0, steps=4500,
                                                                    lr=5e-3))
    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1, steps=2000,
                                                                    cond_dropout=0.1))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(
        stage=2, steps=500, batch_size=2, lr=1e-2, mode="linear_combination"))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.backbone.validate()
        if self.backbone.image_size != self.data.image_size:
            raise ConfigError("backbone.image_size must equal data.image_size")
        for name in ("stage0", "stage1", "stage2"):
            st = getattr(self, name)
            if st.steps <= 0:
                raise ConfigError(f"{name}.steps must be positive")
            if st.batch_size <= 0:
                raise ConfigError(f"{name}.batch_size must be positive")
            if not 0.0 <= st.cond_dropout < 1.0:
                raise ConfigError(f"{name}.cond_dropout must be in [0, 1)")
            if (st.stage == 2) != (st.mode is not None):
                raise ConfigError(f"{name}: mode is required for stage 2 and only for stage 2")
        if self.stage2.mode not in ("linear_combination", "direct"):
            raise ConfigError(f"unknown stage-2 mode {self.stage2.mode!r}")
        if self.loss.lambda_shared < 0 or self.loss.lambda_distinct < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.adapter.dispersion_flatten not in ("concat", "token_mean"):
            raise ConfigError(f"unknown dispersion_flatten {self.adapter.dispersion_flatten!r}")
        if self.adapter.delta_bound is not None and self.adapter.delta_bound <= 0:
            raise ConfigError("adapter.delta_bound must be positive or null")
        if self.data.n_train_users < 2:
            raise ConfigError("need at least two training users")
        if self.sampler.steps < 1:
            raise ConfigError("sampler.steps must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: dict[str, Any], path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            merged = dataclasses.asdict(current)
            merged.update(value or {})
            kwargs[name] = _build(type(current), merged, f"{path}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, copy.deepcopy(data), "")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {p}: {e}") from e
    for item in overrides or []:
        apply_override(data, item)
    return from_dict(data)


def apply_override(data: dict[str, Any], item: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a scalar")
    node[parts[-1]] = parse_value(raw)


def parse_value(raw: str) -> Any:
    """YAML scalar parsing, except that ``3e-3`` is a float (YAML 1.1 wants ``3.0e-3``)."""
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    return value


def replace(cfg: ExperimentConfig, **changes: Any) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-key changes, e.g. ``replace(cfg, **{"loss.lambda_shared": 0})``."""
    data = cfg.to_dict()
    for key, value in changes.items():
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(data)


def diff(a: ExperimentConfig, b: ExperimentConfig) -> list[str]:
    """Dotted keys whose values differ between two configs."""
    out: list[str] = []

    def walk(x, y, prefix):
        for k in x:
            if isinstance(x[k], dict):
                walk(x[k], y[k], f"{prefix}{k}.")
            elif x[k] != y[k]:
                out.append(prefix + k)

    walk(a.to_dict(), b.to_dict(), "")
    return out
