"""Closed-form inference-state memory: KV cache plus Mamba state."""

from __future__ import annotations

from dataclasses import dataclass

from .config import JambaConfig, _preset_document, layer_plan
from .errors import ConfigError, PresetLookupError

GiB = 2**30


@dataclass(frozen=True)
class ModelMemoryPreset:
    name: str
    n_attn_layers: int
    n_kv_heads: int
    head_dim: int
    n_mamba_layers: int = 0
    d_inner: int = 0
    d_state: int = 0
    d_conv: int = 0

    def __post_init__(self):
        for key in ("n_attn_layers", "n_kv_heads", "head_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{self.name}: {key} must be a positive integer")
        if self.n_mamba_layers < 0:
            raise ConfigError(f"{self.name}: n_mamba_layers must be >= 0")
        if self.n_mamba_layers and min(self.d_inner, self.d_state, self.d_conv) < 1:
            raise ConfigError(f"{self.name}: Mamba layers need positive d_inner, d_state and d_conv")


def memory_presets() -> dict:
    return {name: ModelMemoryPreset(name=name, **fields) for name, fields in _preset_document()["memory"].items()}


def memory_preset(name: str) -> ModelMemoryPreset:
    presets = memory_presets()
    if name not in presets:
        raise PresetLookupError(f"unknown memory preset {name!r}; known: {', '.join(presets)}")
    return presets[name]


def preset_from_config(config: JambaConfig) -> ModelMemoryPreset:
    plan = layer_plan(config)
    n_attn = sum(s.mixer == "attention" for s in plan)
    n_mamba = len(plan) - n_attn
    if n_attn == 0:
        raise ConfigError("config has no attention layers")
    return ModelMemoryPreset(
        name=config.name,
        n_attn_layers=n_attn,
        n_kv_heads=config.n_kv_heads,
        head_dim=config.head_dim,
        n_mamba_layers=n_mamba,
        d_inner=config.d_inner if n_mamba else 0,
        d_state=config.mamba.d_state if n_mamba else 0,
        d_conv=config.mamba.d_conv if n_mamba else 0,
    )


def kv_cache_bytes(preset: ModelMemoryPreset, context_len: int, bytes_per_elem: int = 2) -> int:
    if context_len < 0:
        raise ValueError("context_len must be >= 0")
    return 2 * preset.n_attn_layers * preset.n_kv_heads * preset.head_dim * context_len * bytes_per_elem


def ssm_state_bytes(preset: ModelMemoryPreset, bytes_per_elem: int = 2) -> int:
    """Recurrent state plus convolution window; no context-length argument
    because there is no dependence on it."""
    per_layer = preset.d_inner * preset.d_state + preset.d_inner * (preset.d_conv - 1)
    return preset.n_mamba_layers * per_layer * bytes_per_elem if preset.n_mamba_layers else 0


def format_bytes(n: int) -> str:
    if n == 0:
        return "0 B"
    for unit, size in (("GiB", GiB), ("MiB", 2**20), ("KiB", 2**10)):
        if n >= size:
            return f"{n / size:.1f} {unit}"
    return f"{n} B"


@dataclass(frozen=True)
class StateReport:
    preset: str
    context_len: int
    bytes_per_elem: int
    kv_bytes: int
    ssm_bytes: int
    baseline: str
    baseline_kv_bytes: int
    baseline_ssm_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.kv_bytes + self.ssm_bytes

    @property
    def reduction(self) -> float:
        """Baseline KV cache over this preset's KV cache."""
        return _ratio(self.baseline_kv_bytes, self.kv_bytes)

    @property
    def total_reduction(self) -> float:
        """Same ratio with the Mamba state included on both sides."""
        return _ratio(self.baseline_kv_bytes + self.baseline_ssm_bytes, self.total_bytes)

    def row(self) -> dict:
        return {
            "preset": self.preset,
            "context": self.context_len,
            "bytes_per_elem": self.bytes_per_elem,
            "kv_bytes": self.kv_bytes,
            "kv": format_bytes(self.kv_bytes),
            "ssm_bytes": self.ssm_bytes,
            "total_bytes": self.total_bytes,
            "total": format_bytes(self.total_bytes),
            "baseline": self.baseline,
            "reduction": round(self.reduction, 3),
            "total_reduction": round(self.total_reduction, 3),
        }


def _ratio(num: int, den: int) -> float:
    if den == 0:
        return 1.0 if num == 0 else float("inf")
    return num / den


def total_state_report(preset, context_len: int, baseline="llama-3.1-70b", bytes_per_elem: int = 2) -> StateReport:
    """State breakdown for ``preset`` and its size ratio against ``baseline``
    (presets or preset names)."""
    p = memory_preset(preset) if isinstance(preset, str) else preset
    b = memory_preset(baseline) if isinstance(baseline, str) else baseline
    kv = kv_cache_bytes(p, context_len, bytes_per_elem)
    ssm = ssm_state_bytes(p, bytes_per_elem)
    return StateReport(p.name, context_len, bytes_per_elem, kv, ssm, b.name,
                       kv_cache_bytes(b, context_len, bytes_per_elem), ssm_state_bytes(b, bytes_per_elem))
