"""Mean-square activation penalty and FP16 overflow reporting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

FP16_MAX = 65504.0

# Hook sites the model can record.
EXPERTS = "experts"
LAST_MAMBA = "last_mamba"
BLOCK_LAST_MAMBA = "block_last_mamba"
DEFAULT_HOOKS = frozenset({EXPERTS, LAST_MAMBA})


@dataclass
class PenaltyConfig:
    alpha: float = 1e-5
    hooks: frozenset = DEFAULT_HOOKS
    fp16_max: float = FP16_MAX
    per_hook: bool = False  # average per-hook mean squares instead of one global mean
    start_step: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        self.hooks = frozenset(self.hooks)
        unknown = self.hooks - {EXPERTS, LAST_MAMBA, BLOCK_LAST_MAMBA}
        if unknown:
            raise ConfigError(f"unknown hook sites: {sorted(unknown)}")


@dataclass
class HookStats:
    max_abs: float
    mean_square: float
    numel: int


@dataclass
class ActivationReport:
    """Activations recorded during one forward pass, keyed by hook name
    (``layer{i}.expert{e}`` or ``layer{i}.mamba``)."""

    tensors: dict = field(default_factory=dict)

    def add(self, name: str, t: Tensor) -> None:
        self.tensors[name] = t

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def stats(self) -> dict:
        out = {}
        for name, t in self.tensors.items():
            a = t.data.astype(np.float64)
            out[name] = HookStats(float(np.abs(a).max()) if a.size else 0.0,
                                  float((a * a).mean()) if a.size else 0.0, int(a.size))
        return out

    @property
    def global_max(self) -> float:
        return max((s.max_abs for s in self.stats.values()), default=0.0)

    def summary(self) -> dict:
        return {name: (s.max_abs, s.mean_square) for name, s in self.stats.items()}


def activation_loss(report: ActivationReport, alpha: float, per_hook: bool = False) -> Tensor:
    """``alpha * mean(a**2)`` over every hooked element jointly.

    With ``per_hook`` the mean square of each hook is taken first and those
    are averaged, so small hooks weigh as much as large ones.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    hooked = [t for t in report.tensors.values() if t.size]
    if not hooked:
        raise ConfigError("activation_loss needs at least one hooked activation")
    if per_hook:
        total = None
        for t in hooked:
            term = t.square().mean()
            total = term if total is None else total + term
        return total * (alpha / len(hooked))
    n = sum(t.size for t in hooked)
    total = None
    for t in hooked:
        term = t.square().sum()
        total = term if total is None else total + term
    return total * (alpha / n)


def overflow_check(report: ActivationReport, fp16_max: float = FP16_MAX) -> list:
    """Hooks whose max |activation| exceeds ``fp16_max``; empty means safe."""
    return [name for name, s in report.stats.items() if s.max_abs > fp16_max]
