"""Architecture description, layer plan, and config/preset loading."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import yaml

from .errors import ConfigError, PresetLookupError


@dataclass(frozen=True)
class MambaSettings:
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    dt_rank: Optional[int] = None  # None -> ceil(d_model / 16)


@dataclass(frozen=True)
class JambaConfig:
    d_model: int
    n_q_heads: int
    n_kv_heads: int
    d_ff: int
    vocab_size: int
    n_blocks: int = 1
    layers_per_block: int = 8
    attn_layer_offset: int = 3
    mamba_per_attn: int = 7  # m in the a:m = 1:m attention-to-Mamba ratio
    moe_every: int = 2
    moe_offset: int = 1
    n_experts: int = 16
    top_k: int = 2
    tie_embeddings: bool = False
    rms_eps: float = 1e-6
    mamba: MambaSettings = field(default_factory=MambaSettings)
    name: str = "custom"

    @property
    def n_layers(self) -> int:
        return self.n_blocks * self.layers_per_block

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_q_heads

    @property
    def d_inner(self) -> int:
        return self.mamba.expand * self.d_model

    @property
    def dt_rank(self) -> int:
        return self.mamba.dt_rank or math.ceil(self.d_model / 16)

    def validate(self) -> "JambaConfig":
        problems = []
        positive = ("d_model", "n_q_heads", "n_kv_heads", "d_ff", "vocab_size", "n_blocks",
                    "layers_per_block", "moe_every", "n_experts", "top_k")
        for key in positive:
            if getattr(self, key) < 1:
                problems.append(f"{key} must be >= 1 (got {getattr(self, key)})")
        for key in ("d_state", "d_conv", "expand"):
            if getattr(self.mamba, key) < 1:
                problems.append(f"mamba.{key} must be >= 1")
        if self.mamba.dt_rank is not None and self.mamba.dt_rank < 1:
            problems.append("mamba.dt_rank must be >= 1 when given")
        if problems:
            raise ConfigError("; ".join(problems))
        if self.d_model % self.n_q_heads:
            problems.append(f"d_model={self.d_model} not divisible by n_q_heads={self.n_q_heads}")
        if self.n_q_heads % self.n_kv_heads:
            problems.append(f"n_q_heads={self.n_q_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.mamba_per_attn < 0:
            problems.append("mamba_per_attn must be >= 0")
        elif self.layers_per_block % (self.mamba_per_attn + 1):
            problems.append(
                f"layers_per_block={self.layers_per_block} not divisible by a:m group size {self.mamba_per_attn + 1}"
            )
        if not 0 <= self.attn_layer_offset < self.layers_per_block:
            problems.append(f"attn_layer_offset={self.attn_layer_offset} outside block of {self.layers_per_block}")
        if self.layers_per_block % self.moe_every:
            problems.append(f"moe_every={self.moe_every} does not divide layers_per_block={self.layers_per_block}")
        if not 1 <= self.top_k <= self.n_experts:
            problems.append(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        if self.rms_eps <= 0:
            problems.append("rms_eps must be positive")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def replace(self, **changes) -> "JambaConfig":
        if "mamba" in changes and isinstance(changes["mamba"], dict):
            changes["mamba"] = dataclasses.replace(self.mamba, **changes["mamba"])
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class LayerSpec:
    mixer: str  # "attention" | "mamba"
    ffn: str  # "mlp" | "moe"


def layer_plan(config: JambaConfig) -> list:
    config.validate()
    group = config.mamba_per_attn + 1
    plan = []
    for _ in range(config.n_blocks):
        for i in range(config.layers_per_block):
            mixer = "attention" if i % group == config.attn_layer_offset % group else "mamba"
            ffn = "moe" if i % config.moe_every == config.moe_offset % config.moe_every else "mlp"
            plan.append(LayerSpec(mixer, ffn))
    return plan


def attention_only(config: JambaConfig) -> JambaConfig:
    """Same depth and widths with every mixer replaced by attention."""
    return config.replace(mamba_per_attn=0, attn_layer_offset=0, name=f"{config.name}-attn-only")


# -- (de)serialisation ------------------------------------------------------

_FIELDS = {f.name for f in dataclasses.fields(JambaConfig)}
_MAMBA_FIELDS = {f.name for f in dataclasses.fields(MambaSettings)}


def config_from_dict(data: dict) -> JambaConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    unknown = set(data) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data = dict(data)
    mamba = data.pop("mamba", None) or {}
    if not isinstance(mamba, dict):
        raise ConfigError("mamba must be a mapping")
    unknown = set(mamba) - _MAMBA_FIELDS
    if unknown:
        raise ConfigError(f"unknown mamba keys: {sorted(unknown)}")
    try:
        return JambaConfig(**data, mamba=MambaSettings(**mamba)).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: Union[str, Path]) -> JambaConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(yaml.safe_load(fh))


def save_config(config: JambaConfig, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


@lru_cache(maxsize=None)
def _preset_document() -> dict:
    text = resources.files("jamba_kit").joinpath("data/presets.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def model_preset_names() -> list:
    return list(_preset_document()["models"])


def model_preset(name: str) -> JambaConfig:
    models = _preset_document()["models"]
    if name not in models:
        raise PresetLookupError(f"unknown model preset {name!r}; known: {', '.join(models)}")
    return config_from_dict({**models[name], "name": name})
