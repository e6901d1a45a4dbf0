"""Top-K mixture-of-experts feed-forward and the plain gated MLP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, index_add_rows, linear, silu, softmax


@dataclass
class ExpertMLP:
    """Gated-SiLU MLP: ``down(silu(gate(x)) * up(x))``. Weights are [out, in];
    any of them may be swapped for a quantized linear."""

    gate_proj: Tensor
    up_proj: Tensor
    down_proj: Tensor

    def named(self) -> dict:
        return {"gate_proj": self.gate_proj, "up_proj": self.up_proj, "down_proj": self.down_proj}

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(x, self)


@dataclass
class RouterParams:
    gate: Tensor  # [n_experts, d_model]
    top_k: int

    @property
    def n_experts(self) -> int:
        return self.gate.shape[0]

    def validate(self) -> None:
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")


@dataclass
class RoutingDecision:
    indices: np.ndarray  # [L, k]
    weights: np.ndarray  # [L, k]
    n_experts: int


@dataclass
class MoEOutput:
    y: Tensor
    routing: RoutingDecision
    expert_outputs: dict = field(default_factory=dict)  # expert id -> Tensor [n_routed, d_model]


def init_mlp(rng: np.random.Generator, d_model: int, d_ff: int) -> dict:
    return {
        "gate_proj": rng.normal(0.0, d_model**-0.5, size=(d_ff, d_model)),
        "up_proj": rng.normal(0.0, d_model**-0.5, size=(d_ff, d_model)),
        "down_proj": rng.normal(0.0, d_ff**-0.5, size=(d_model, d_ff)),
    }


def mlp_forward(x: Tensor, mlp: ExpertMLP) -> Tensor:
    return linear(silu(linear(x, mlp.gate_proj)) * linear(x, mlp.up_proj), mlp.down_proj)


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, largest first;
    equal values resolve toward the lower index."""
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"top_k={k} must lie in [1, {n}]")
    # stable sort of -logits keeps lower indices first among ties
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def route_topk(logits, k: int):
    """Route one token (or a batch along leading axes).

    Returns ``(indices, weights)`` where ``weights`` is the softmax over the
    selected logits only.
    """
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    idx = topk_indices(logits, k)
    chosen = np.take_along_axis(logits, idx, axis=-1)
    z = np.exp(chosen - chosen.max(axis=-1, keepdims=True))
    return idx, z / z.sum(axis=-1, keepdims=True)


def moe_forward(x: Tensor, router: RouterParams, experts: list, keep_outputs: bool = False) -> MoEOutput:
    """Per token: ``y = sum_{i in topk} w_i * expert_i(x)``.

    Only experts that received at least one token are evaluated. The routing
    weights are differentiable through the router; the selection itself is not.
    """
    x = as_tensor(x)
    router.validate()
    if len(experts) != router.n_experts:
        raise DimensionError(f"router has {router.n_experts} outputs but {len(experts)} experts were given")
    if x.ndim != 2 or x.shape[1] != router.gate.shape[1]:
        raise DimensionError(f"moe input {x.shape} does not match router {router.gate.shape}")
    L = x.shape[0]
    k = router.top_k

    logits = linear(x, router.gate)
    idx = topk_indices(logits.data, k)
    rows = np.arange(L)[:, None]
    w = softmax(logits[rows, idx], axis=-1)

    y = None
    outputs = {}
    for e in range(router.n_experts):
        tok, slot = np.nonzero(idx == e)
        if tok.size == 0:
            continue
        out = experts[e](x[tok])
        if keep_outputs:
            outputs[e] = out
        contrib = index_add_rows(out * w[tok, slot].reshape(-1, 1), tok, L)
        y = contrib if y is None else y + contrib
    if y is None:  # L == 0
        y = Tensor(np.zeros_like(x.data))
    return MoEOutput(y, RoutingDecision(idx, w.data.copy(), router.n_experts), outputs)


def expert_load_histogram(decisions, n_experts: Optional[int] = None) -> np.ndarray:
    """Count how many (token, slot) assignments each expert received."""
    if isinstance(decisions, RoutingDecision):
        decisions = [decisions]
    decisions = list(decisions)
    if not decisions:
        raise ValueError("need at least one routing decision")
    n = n_experts or decisions[0].n_experts
    counts = np.zeros(n, dtype=np.int64)
    for d in decisions:
        counts += np.bincount(np.asarray(d.indices).reshape(-1), minlength=n)
    return counts
